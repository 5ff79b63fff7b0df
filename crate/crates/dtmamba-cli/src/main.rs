//! DTMamba command line: ingest timestamped CSVs, train forecasting models,
//! evaluate checkpoints, export plot-ready predictions, sweep hyperparameter
//! grids, and inspect parameter layouts.
//!
//! Every run serializes its effective configuration next to its outputs, so
//! any result can be reproduced from the snapshot alone. Metric files are
//! byte-identical across reruns with the same seed; wall-clock columns are
//! the only nondeterministic fields.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dtmamba::dataset::{self, SeriesData, SplitSpec, Splits};
use dtmamba::model::{DtMamba, ModelConfig};
use dtmamba::train::{self, TrainConfig};
use dtmamba::{DtError, Result};

#[derive(Parser)]
#[command(name = "dtmamba", version, about = "DTMamba long-term time-series forecasting")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes checkpoint, per-epoch metrics, config snapshot.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split; prints mse/mae, writes a report.
    Eval(EvalArgs),
    /// Export (window, channel, step, y_true, y_pred) rows for plotting.
    Predict(PredictArgs),
    /// Train and evaluate every point of a hyperparameter grid.
    Sweep(SweepArgs),
    /// Print the parameter count and every layer shape.
    Inspect(InspectArgs),
}

/// Flags shared by every command; each one overrides the corresponding
/// field of the effective configuration.
#[derive(Args, Default)]
struct ConfigFlags {
    /// Effective-config snapshot from a previous run to start from.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input CSV with a leading timestamp column.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Benchmark preset pinning channel count and split (etth1, etth2,
    /// ettm1, ettm2, weather, exchange).
    #[arg(long)]
    preset: Option<String>,
    /// Lookback window length.
    #[arg(long = "T")]
    lookback: Option<usize>,
    /// Forecast horizon length.
    #[arg(long = "S")]
    horizon: Option<usize>,
    /// Expected channel count; checked against the dataset.
    #[arg(long)]
    channels: Option<usize>,
    /// First embedding width.
    #[arg(long)]
    n1: Option<usize>,
    /// Second embedding width.
    #[arg(long)]
    n2: Option<usize>,
    /// Dropout probability after each embedding.
    #[arg(long)]
    dropout_p: Option<f64>,
    /// SSM state dimension.
    #[arg(long)]
    d_state: Option<usize>,
    /// Mixer expansion factor.
    #[arg(long)]
    e_fact: Option<usize>,
    /// Causal convolution width.
    #[arg(long)]
    d_conv: Option<usize>,
    /// Architecture variant: dtmamba, dmamba, tmamba, mamba.
    #[arg(long)]
    variant: Option<String>,
    /// Drop the per-block residual branches.
    #[arg(long)]
    no_residual: bool,
    /// Flatten all channels into one row instead of per-channel rows.
    #[arg(long)]
    no_channel_independence: bool,
    /// Disable the learnable scale/shift around normalization.
    #[arg(long)]
    no_revin_affine: bool,
    /// Share one weight set between the two mixers of a block.
    #[arg(long)]
    twin_tied: bool,
    /// Mixer sequence axis: feature or sequence.
    #[arg(long)]
    mamba_axis: Option<String>,
    /// Number of passes over the training split.
    #[arg(long)]
    epochs: Option<usize>,
    /// Windows per optimizer step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Coupled L2 penalty added to every gradient.
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Non-improving validation epochs before the learning rate halves.
    #[arg(long)]
    patience: Option<usize>,
    /// Training objective scale: raw or normalized.
    #[arg(long)]
    loss_scale: Option<String>,
    /// Seed for weight init, batch order, and dropout.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: $DTMAMBA_OUT_DIR, else the working dir).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    flags: ConfigFlags,
    /// Checkpoint to evaluate (default: <out-dir>/model.ckpt).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Split to score: train, val, or test.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    flags: ConfigFlags,
    /// Checkpoint to predict with (default: <out-dir>/model.ckpt).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Split to draw windows from: train, val, or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Window indices within the split: "3", "0,4,7", or "2..10"
    /// (default: every window).
    #[arg(long)]
    windows: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    flags: ConfigFlags,
    /// Grid dimension as key=v1,v2,...; repeat for a Cartesian product.
    /// Keys: dropout_p, n1, n2, e_fact, d_state, d_conv, T, variant.
    #[arg(long = "grid")]
    grid: Vec<String>,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    flags: ConfigFlags,
    /// Inspect this checkpoint instead of a freshly built model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

/// The full, serializable record of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    dataset: Option<PathBuf>,
    preset: Option<String>,
    model: ModelConfig,
    train: TrainConfig,
    out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            preset: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            out_dir: std::env::var_os("DTMAMBA_OUT_DIR")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(".")),
        }
    }
}

fn resolve(flags: &ConfigFlags) -> Result<RunConfig> {
    let mut rc = match &flags.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            serde_json::from_str(&text).map_err(|e| {
                DtError::Config(format!("bad config {}: {e}", path.display()))
            })?
        }
        None => RunConfig::default(),
    };
    if let Some(v) = &flags.dataset {
        rc.dataset = Some(v.clone());
    }
    if let Some(v) = &flags.preset {
        dataset::preset(v)?;
        rc.preset = Some(v.clone());
    }
    if let Some(v) = flags.lookback {
        rc.model.lookback = v;
    }
    if let Some(v) = flags.horizon {
        rc.model.horizon = v;
    }
    if let Some(v) = flags.channels {
        rc.model.channels = v;
    }
    if let Some(v) = flags.n1 {
        rc.model.n1 = v;
    }
    if let Some(v) = flags.n2 {
        rc.model.n2 = v;
    }
    if let Some(v) = flags.dropout_p {
        rc.model.dropout_p = v;
    }
    if let Some(v) = flags.d_state {
        rc.model.d_state = v;
    }
    if let Some(v) = flags.e_fact {
        rc.model.e_fact = v;
    }
    if let Some(v) = flags.d_conv {
        rc.model.d_conv = v;
    }
    if let Some(v) = &flags.variant {
        rc.model.variant = v.parse()?;
    }
    if flags.no_residual {
        rc.model.use_residual = false;
    }
    if flags.no_channel_independence {
        rc.model.use_channel_independence = false;
    }
    if flags.no_revin_affine {
        rc.model.revin_affine = false;
    }
    if flags.twin_tied {
        rc.model.twin_tied = true;
    }
    if let Some(v) = &flags.mamba_axis {
        rc.model.mamba_axis = v.parse()?;
    }
    if let Some(v) = flags.epochs {
        rc.train.epochs = v;
    }
    if let Some(v) = flags.batch_size {
        rc.train.batch_size = v;
    }
    if let Some(v) = flags.lr {
        rc.train.lr = v;
    }
    if let Some(v) = flags.weight_decay {
        rc.train.weight_decay = v;
    }
    if let Some(v) = flags.patience {
        rc.train.patience = v;
    }
    if let Some(v) = &flags.loss_scale {
        rc.train.loss_scale = v.parse()?;
    }
    if let Some(v) = flags.seed {
        rc.train.seed = v;
    }
    if let Some(v) = &flags.out_dir {
        rc.out_dir = v.clone();
    }
    Ok(rc)
}

/// Ingests the configured dataset and resolves the split specification,
/// checking any channel expectations from the preset or the flags.
fn load_series(rc: &RunConfig, explicit_channels: Option<usize>) -> Result<(SeriesData, Splits)> {
    let path = rc
        .dataset
        .as_ref()
        .ok_or_else(|| DtError::Config("no dataset given; pass --dataset <csv>".into()))?;
    let data = dataset::ingest_csv(path)?;
    let split_spec = match &rc.preset {
        Some(name) => {
            let p = dataset::preset(name)?;
            if data.channels != p.channels {
                return Err(DtError::Data(format!(
                    "preset {name} expects {} channels, {} has {}",
                    p.channels,
                    path.display(),
                    data.channels
                )));
            }
            p.split
        }
        None => SplitSpec::Fractions { train: 0.7, val: 0.1, test: 0.2 },
    };
    if let Some(c) = explicit_channels {
        if c != data.channels {
            return Err(DtError::Config(format!(
                "--channels {c} does not match the dataset's {} channels",
                data.channels
            )));
        }
    }
    let splits = dataset::split_rows(data.rows, &split_spec)?;
    Ok((data, splits))
}

fn split_range(splits: &Splits, name: &str) -> Result<std::ops::Range<usize>> {
    match name {
        "train" => Ok(splits.train.clone()),
        "val" => Ok(splits.val.clone()),
        "test" => Ok(splits.test.clone()),
        other => Err(DtError::Config(format!(
            "unknown split {other:?}; expected train, val, or test"
        ))),
    }
}

/// Shortest exact decimal representation; reparses to the same bits.
fn num(v: f64) -> String {
    format!("{v}")
}

fn write_config(rc: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&rc.out_dir)?;
    let path = rc.out_dir.join("config.json");
    let text = serde_json::to_string_pretty(rc)
        .map_err(|e| DtError::Config(format!("cannot serialize config: {e}")))?;
    fs::write(&path, text)?;
    Ok(path)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path)
        .map_err(|e| DtError::Data(format!("cannot write {}: {e}", path.display())))
}

fn csv_flush(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush()
        .map_err(|e| DtError::Data(format!("cannot write {}: {e}", path.display())))
}

fn csv_row(w: &mut csv::Writer<fs::File>, path: &Path, row: &[String]) -> Result<()> {
    w.write_record(row)
        .map_err(|e| DtError::Data(format!("cannot write {}: {e}", path.display())))
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut rc = resolve(&args.flags)?;
    let (data, splits) = load_series(&rc, args.flags.channels)?;
    rc.model.channels = data.channels;
    if !data.gap_rows.is_empty() {
        eprintln!(
            "note: {} rows follow irregular timestamp gaps (first at row {})",
            data.gap_rows.len(),
            data.gap_rows[0]
        );
    }
    write_config(&rc)?;
    let mut model = DtMamba::new(rc.model.clone(), rc.train.seed)?;
    let history = train::train(&mut model, &data, &splits, &rc.train, |e| {
        eprintln!(
            "epoch {} train {} val {} lr {} ({:.1}s)",
            e.epoch,
            num(e.train_loss),
            e.val_mse.map_or_else(|| "-".into(), num),
            num(e.lr),
            e.seconds
        );
    })?;
    let ckpt = rc.out_dir.join("model.ckpt");
    model.save(&ckpt)?;

    let metrics_path = rc.out_dir.join("train_metrics.csv");
    let mut w = csv_writer(&metrics_path)?;
    csv_row(
        &mut w,
        &metrics_path,
        &["epoch", "split", "mse", "mae", "lr", "seconds"].map(String::from),
    )?;
    for e in &history {
        csv_row(
            &mut w,
            &metrics_path,
            &[
                e.epoch.to_string(),
                "train".into(),
                num(e.train_loss),
                String::new(),
                num(e.lr),
                num(e.seconds),
            ],
        )?;
        if let (Some(mse), Some(mae)) = (e.val_mse, e.val_mae) {
            csv_row(
                &mut w,
                &metrics_path,
                &[
                    e.epoch.to_string(),
                    "val".into(),
                    num(mse),
                    num(mae),
                    num(e.lr),
                    String::new(),
                ],
            )?;
        }
    }
    csv_flush(w, &metrics_path)?;

    println!("checkpoint {}", ckpt.display());
    println!("epochs {}", history.len());
    if let Some(e) = history.iter().filter_map(|e| e.val_mse).reduce(f64::min) {
        println!("best_val_mse {}", num(e));
    }
    Ok(())
}

fn load_checkpoint(rc: &RunConfig, explicit: &Option<PathBuf>) -> Result<DtMamba> {
    let path = explicit
        .clone()
        .unwrap_or_else(|| rc.out_dir.join("model.ckpt"));
    DtMamba::load(&path)
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let rc = resolve(&args.flags)?;
    let model = load_checkpoint(&rc, &args.checkpoint)?;
    let (data, splits) = load_series(&rc, args.flags.channels)?;
    if data.channels != model.config.channels {
        return Err(DtError::Config(format!(
            "checkpoint expects {} channels, dataset has {}",
            model.config.channels, data.channels
        )));
    }
    let range = split_range(&splits, &args.split)?;
    let report = train::evaluate(&model, &data, &range, rc.train.batch_size)?
        .ok_or_else(|| {
            DtError::Data(format!(
                "{} split has no complete {}+{} window",
                args.split, model.config.lookback, model.config.horizon
            ))
        })?;

    fs::create_dir_all(&rc.out_dir)?;
    let path = rc.out_dir.join(format!("eval_{}.csv", args.split));
    let mut w = csv_writer(&path)?;
    csv_row(&mut w, &path, &["scope", "index", "mse", "mae"].map(String::from))?;
    csv_row(
        &mut w,
        &path,
        &["overall".into(), String::new(), num(report.mse), num(report.mae)],
    )?;
    for (k, &(m, a)) in report.per_horizon.iter().enumerate() {
        csv_row(&mut w, &path, &["horizon".into(), k.to_string(), num(m), num(a)])?;
    }
    for (c, &(m, a)) in report.per_channel.iter().enumerate() {
        csv_row(&mut w, &path, &["channel".into(), c.to_string(), num(m), num(a)])?;
    }
    csv_flush(w, &path)?;

    println!("split {}", args.split);
    println!("windows {}", report.n_windows);
    println!("mse {}", num(report.mse));
    println!("mae {}", num(report.mae));
    Ok(())
}

/// Parses "3", "0,4,7", or "2..10" into window indices, all below `count`.
fn parse_selector(sel: &Option<String>, count: usize) -> Result<Vec<usize>> {
    let text = match sel {
        None => return Ok((0..count).collect()),
        Some(t) => t.trim(),
    };
    let bad = |what: &str| DtError::Config(format!("bad window selector {text:?}: {what}"));
    let indices: Vec<usize> = if let Some((a, b)) = text.split_once("..") {
        let lo: usize = a.parse().map_err(|_| bad("start is not a number"))?;
        let hi: usize = b.parse().map_err(|_| bad("end is not a number"))?;
        if lo >= hi {
            return Err(bad("empty range"));
        }
        (lo..hi).collect()
    } else {
        text.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|_| bad("not a number")))
            .collect::<Result<_>>()?
    };
    if let Some(&i) = indices.iter().find(|&&i| i >= count) {
        return Err(DtError::Config(format!(
            "window {i} out of range: split has {count} windows"
        )));
    }
    Ok(indices)
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let rc = resolve(&args.flags)?;
    let model = load_checkpoint(&rc, &args.checkpoint)?;
    let (data, splits) = load_series(&rc, args.flags.channels)?;
    if data.channels != model.config.channels {
        return Err(DtError::Config(format!(
            "checkpoint expects {} channels, dataset has {}",
            model.config.channels, data.channels
        )));
    }
    let (t, s) = (model.config.lookback, model.config.horizon);
    let range = split_range(&splits, &args.split)?;
    let starts = dataset::split_window_starts(&range, t, s);
    let selected = parse_selector(&args.windows, starts.len())?;
    if selected.is_empty() {
        return Err(DtError::Data(format!(
            "{} split has no complete {t}+{s} window",
            args.split
        )));
    }

    fs::create_dir_all(&rc.out_dir)?;
    let path = rc.out_dir.join("predictions.csv");
    let mut w = csv_writer(&path)?;
    csv_row(
        &mut w,
        &path,
        &["window_id", "channel", "step_in_horizon", "y_true", "y_pred"].map(String::from),
    )?;
    let n = data.channels;
    for chunk in selected.chunks(rc.train.batch_size.max(1)) {
        let chunk_starts: Vec<usize> = chunk.iter().map(|&i| starts[i]).collect();
        let (x, y) = data.batch(&chunk_starts, t, s)?;
        let pred = train::forecast(&model, &x)?;
        for (row, &window_id) in chunk.iter().enumerate() {
            for c in 0..n {
                for k in 0..s {
                    let at = (row * s + k) * n + c;
                    csv_row(
                        &mut w,
                        &path,
                        &[
                            window_id.to_string(),
                            c.to_string(),
                            k.to_string(),
                            num(y.data()[at]),
                            num(pred.data()[at]),
                        ],
                    )?;
                }
            }
        }
    }
    csv_flush(w, &path)?;
    println!("predictions {}", path.display());
    println!("rows {}", selected.len() * s * n);
    Ok(())
}

const GRID_KEYS: [&str; 8] =
    ["dropout_p", "n1", "n2", "e_fact", "d_state", "d_conv", "T", "variant"];

fn apply_grid_value(cfg: &mut ModelConfig, key: &str, raw: &str) -> Result<()> {
    fn parsed<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
        raw.parse()
            .map_err(|_| DtError::Config(format!("bad grid value {raw:?} for {key}")))
    }
    match key {
        "dropout_p" => cfg.dropout_p = parsed(key, raw)?,
        "n1" => cfg.n1 = parsed(key, raw)?,
        "n2" => cfg.n2 = parsed(key, raw)?,
        "e_fact" => cfg.e_fact = parsed(key, raw)?,
        "d_state" => cfg.d_state = parsed(key, raw)?,
        "d_conv" => cfg.d_conv = parsed(key, raw)?,
        "T" => cfg.lookback = parsed(key, raw)?,
        "variant" => cfg.variant = raw.parse()?,
        other => {
            return Err(DtError::Config(format!(
                "unknown grid key {other:?}; expected one of {GRID_KEYS:?}"
            )))
        }
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    if args.grid.is_empty() {
        return Err(DtError::Config(
            "sweep needs at least one --grid key=v1,v2,...".into(),
        ));
    }
    let mut grids: Vec<(String, Vec<String>)> = Vec::new();
    for spec in &args.grid {
        let (key, vals) = spec.split_once('=').ok_or_else(|| {
            DtError::Config(format!("bad grid spec {spec:?}: expected key=v1,v2,..."))
        })?;
        if !GRID_KEYS.contains(&key) {
            return Err(DtError::Config(format!(
                "unknown grid key {key:?}; expected one of {GRID_KEYS:?}"
            )));
        }
        let vals: Vec<String> = vals.split(',').map(|v| v.trim().to_string()).collect();
        if vals.is_empty() || vals.iter().any(String::is_empty) {
            return Err(DtError::Config(format!("grid {key} has an empty value")));
        }
        grids.push((key.to_string(), vals));
    }

    let mut rc = resolve(&args.flags)?;
    let (data, splits) = load_series(&rc, args.flags.channels)?;
    rc.model.channels = data.channels;
    write_config(&rc)?;

    // Cartesian product, first --grid flag outermost.
    let mut points: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (key, vals) in &grids {
        points = points
            .iter()
            .flat_map(|p| {
                vals.iter().map(|v| {
                    let mut q = p.clone();
                    q.push((key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }

    let path = rc.out_dir.join("sweep.csv");
    let mut w = csv_writer(&path)?;
    csv_row(
        &mut w,
        &path,
        &["point", "settings", "param_count", "mse", "mae", "seconds"].map(String::from),
    )?;
    let mut written = 0usize;
    for (idx, point) in points.iter().enumerate() {
        let settings = point
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ");
        let run = (|| -> Result<(usize, f64, f64, f64)> {
            let mut model_cfg = rc.model.clone();
            for (key, val) in point {
                apply_grid_value(&mut model_cfg, key, val)?;
            }
            let mut train_cfg = rc.train.clone();
            train_cfg.seed = rc.train.seed + idx as u64;
            let started = Instant::now();
            let mut model = DtMamba::new(model_cfg, train_cfg.seed)?;
            let count = model.param_count();
            train::train(&mut model, &data, &splits, &train_cfg, |_| {})?;
            let report = train::evaluate(&model, &data, &splits.test, train_cfg.batch_size)?
                .ok_or_else(|| DtError::Data("test split has no complete window".into()))?;
            Ok((count, report.mse, report.mae, started.elapsed().as_secs_f64()))
        })();
        match run {
            Ok((count, mse, mae, seconds)) => {
                csv_row(
                    &mut w,
                    &path,
                    &[
                        idx.to_string(),
                        settings,
                        count.to_string(),
                        num(mse),
                        num(mae),
                        num(seconds),
                    ],
                )?;
                written += 1;
            }
            Err(e @ DtError::Io(_)) => return Err(e),
            Err(e) => {
                eprintln!("skipping point {idx} ({settings}): {e}");
            }
        }
    }
    csv_flush(w, &path)?;
    println!("sweep {}", path.display());
    println!("points {written} of {}", points.len());
    Ok(())
}

fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let rc = resolve(&args.flags)?;
    let model = match &args.checkpoint {
        Some(path) => DtMamba::load(path)?,
        None => DtMamba::new(rc.model.clone(), rc.train.seed)?,
    };
    let cfg_line = serde_json::to_string(&model.config)
        .map_err(|e| DtError::Config(format!("cannot serialize config: {e}")))?;
    println!("config {cfg_line}");
    println!("param_count {}", model.param_count());
    for (name, t) in model.named_params() {
        let dims = t
            .shape()
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("x");
        println!("{name} {dims}");
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Predict(a) => cmd_predict(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Inspect(a) => cmd_inspect(a),
    }
}

fn main() {
    // Die quietly when a downstream pipe (head, less) closes stdout,
    // like any other line-oriented unix tool.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
