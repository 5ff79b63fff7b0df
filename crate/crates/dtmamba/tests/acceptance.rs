//! Acceptance gate: ten system-level criteria, one test each, every test
//! printing a single `criterion N: PASS/SKIP — …` line (visible under
//! `cargo test --test acceptance -- --nocapture`).
//!
//! The tests share a lock so wall-clock measurements are never distorted
//! by a sibling test on another thread.

use std::sync::Mutex;
use std::time::Instant;

use rand::Rng;

use dtmamba::dataset::{split_rows, SeriesData, SplitSpec};
use dtmamba::init::seeded_rng;
use dtmamba::metrics::{mae, mse, MetricsAccum};
use dtmamba::model::{DtMamba, ModelConfig, Variant};
use dtmamba::preprocess::{
    channel_independence, channel_independence_inverse, revin_forward, revin_inverse,
    Layout, SeriesBatch,
};
use dtmamba::ssm::{discretize, ssm_scan, SsmParams};
use dtmamba::tensor::{Tape, Tensor, TensorId};
use dtmamba::train::{evaluate, forecast, train, LossScale, TrainConfig};

static GATE: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

fn rand_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn toy_model_config() -> ModelConfig {
    ModelConfig {
        lookback: 8,
        horizon: 4,
        channels: 2,
        n1: 6,
        n2: 4,
        d_state: 4,
        e_fact: 1,
        d_conv: 2,
        ..ModelConfig::default()
    }
}

#[test]
fn criterion_01_gradient_integrity() {
    let _g = serial();
    let started = Instant::now();
    let mut model = DtMamba::new(toy_model_config(), 5).unwrap();
    let mut rng = seeded_rng(17);
    let x = Tensor::from_vec(vec![2, 8, 2], rand_vec(&mut rng, 32, -1.0, 1.0)).unwrap();
    let y = Tensor::from_vec(vec![2, 4, 2], rand_vec(&mut rng, 16, -1.0, 1.0)).unwrap();

    // Analytic gradients in one reverse pass.
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape).unwrap();
    let art = model.forward(&mut tape, &bound, &x, None).unwrap();
    let y_id = tape.constant(y.clone()).unwrap();
    let diff = tape.sub(art.prediction, y_id).unwrap();
    let sq = tape.mul(diff, diff).unwrap();
    let loss_id = tape.mean_all(sq).unwrap();
    tape.backward(loss_id).unwrap();
    let analytic: Vec<Vec<f64>> = bound
        .ids
        .iter()
        .map(|&id| tape.grad(id).expect("every parameter reaches the loss").to_vec())
        .collect();
    drop(tape);

    // Central differences on every master weight.
    let h = 1e-5;
    let n_params: usize = analytic.iter().map(Vec::len).sum();
    let mut passing = 0usize;
    for (j, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = model.params_mut()[j].data()[i];
            model.params_mut()[j].data_mut()[i] = orig + h;
            let up = mse(&forecast(&model, &x).unwrap(), &y).unwrap();
            model.params_mut()[j].data_mut()[i] = orig - h;
            let down = mse(&forecast(&model, &x).unwrap(), &y).unwrap();
            model.params_mut()[j].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            assert!(a.is_finite(), "non-finite analytic gradient at param {j}[{i}]");
            let rel = (a - numeric).abs() / (a.abs().max(numeric.abs()) + 1e-8);
            if rel < 1e-3 {
                passing += 1;
            }
        }
    }
    let frac = passing as f64 / n_params as f64;
    let secs = started.elapsed().as_secs_f64();
    assert!(
        frac >= 0.99,
        "only {passing}/{n_params} parameter gradients within 1e-3"
    );
    assert!(secs < 120.0, "gradient check took {secs:.1}s");
    println!(
        "criterion 1: PASS — {passing}/{n_params} params rel-err < 1e-3 ({secs:.1}s)"
    );
}

#[test]
fn criterion_02_reversibility() {
    let _g = serial();
    let mut rng = seeded_rng(23);

    // Normalization round trip within 1e-9, affine enabled.
    let (b, t, n) = (3, 10, 2);
    let mut tape = Tape::new();
    let x_data = rand_vec(&mut rng, b * t * n, -4.0, 4.0);
    let x = tape
        .constant(Tensor::from_vec(vec![b, t, n], x_data.clone()).unwrap())
        .unwrap();
    let gamma = tape
        .constant(Tensor::from_vec(vec![n], rand_vec(&mut rng, n, 0.5, 1.5)).unwrap())
        .unwrap();
    let beta = tape
        .constant(Tensor::from_vec(vec![n], rand_vec(&mut rng, n, -1.0, 1.0)).unwrap())
        .unwrap();
    let batch = SeriesBatch::new(&tape, x, Layout::BatchTimeChannel { b, len: t, n }).unwrap();
    let (normed, stats) = revin_forward(&mut tape, &batch, Some((gamma, beta)), 1e-5).unwrap();
    let restored = revin_inverse(&mut tape, &normed, &stats).unwrap();
    let max_err = tape
        .value(restored.id)
        .data()
        .iter()
        .zip(&x_data)
        .map(|(r, o)| (r - o).abs())
        .fold(0.0f64, f64::max);
    assert!(max_err < 1e-9, "round-trip error {max_err}");

    // Channel-independence round trip is bit-exact.
    let folded = channel_independence(&mut tape, &batch).unwrap();
    let unfolded = channel_independence_inverse(&mut tape, &folded).unwrap();
    assert_eq!(tape.value(unfolded.id).data(), x_data.as_slice());

    // Checkpoint round trip: parameters and forward outputs bit-exact.
    let model = DtMamba::new(toy_model_config(), 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.save(&path).unwrap();
    let loaded = DtMamba::load(&path).unwrap();
    for ((name_a, a), (name_b, b)) in
        model.named_params().iter().zip(loaded.named_params().iter())
    {
        assert_eq!(name_a, name_b);
        assert_eq!(a.data(), b.data(), "{name_a} changed across save/load");
    }
    let probe = Tensor::from_vec(vec![2, 8, 2], rand_vec(&mut rng, 32, -1.0, 1.0)).unwrap();
    assert_eq!(
        forecast(&model, &probe).unwrap().data(),
        forecast(&loaded, &probe).unwrap().data()
    );
    println!(
        "criterion 2: PASS — revin round trip {max_err:.1e}, fold and checkpoint bit-exact"
    );
}

/// Leaf helper for hand-built scan graphs.
fn leaf(tape: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> TensorId {
    tape.leaf(Tensor::from_vec(shape, data).unwrap().requires_grad())
        .unwrap()
}

/// Direct per-step recurrence, written independently of the production
/// scan: h_t = exp(dA) h_{t-1} + dB x_t, y_t = C h_t, with the same
/// small-step series limit.
#[allow(clippy::too_many_arguments)]
fn naive_recurrence(
    x: &[f64],
    a_log: &[f64],
    w_delta: &[f64],
    b_delta: &[f64],
    w_b: &[f64],
    w_c: &[f64],
    len: usize,
    di: usize,
    ds: usize,
) -> Vec<f64> {
    let mut h = vec![0.0; di * ds];
    let mut y = vec![0.0; len * di];
    for t in 0..len {
        let xt = &x[t * di..(t + 1) * di];
        let proj = |w: &[f64], s: usize| -> f64 {
            (0..di).map(|j| w[s * di + j] * xt[j]).sum()
        };
        for i in 0..di {
            let u: f64 = proj(w_delta, i) + b_delta[i];
            let delta = u.exp().ln_1p(); // softplus
            for s in 0..ds {
                let a = -(a_log[i * ds + s]).exp();
                let da = delta * a;
                let a_bar = da.exp();
                let b_t = proj(w_b, s);
                let b_bar = if da.abs() < 1e-8 {
                    delta * b_t
                } else {
                    (a_bar - 1.0) / a * b_t
                };
                h[i * ds + s] = a_bar * h[i * ds + s] + b_bar * xt[i];
            }
        }
        for i in 0..di {
            y[t * di + i] = (0..ds).map(|s| proj(w_c, s) * h[i * ds + s]).sum();
        }
    }
    y
}

fn scan_case(rng: &mut impl Rng, len: usize, di: usize, ds: usize) -> f64 {
    let bound = 1.0 / (di as f64).sqrt();
    let x = rand_vec(rng, len * di, -1.0, 1.0);
    let a_log = rand_vec(rng, di * ds, -1.0, 1.0);
    let w_delta = rand_vec(rng, di * di, -bound, bound);
    let b_delta = rand_vec(rng, di, -2.0, 0.0);
    let w_b = rand_vec(rng, ds * di, -bound, bound);
    let w_c = rand_vec(rng, ds * di, -bound, bound);

    let mut tape = Tape::new();
    let x_id = leaf(&mut tape, vec![len, di], x.clone());
    let p = SsmParams {
        a_log: leaf(&mut tape, vec![di, ds], a_log.clone()),
        w_delta: leaf(&mut tape, vec![di, di], w_delta.clone()),
        b_delta: leaf(&mut tape, vec![di], b_delta.clone()),
        w_b: leaf(&mut tape, vec![ds, di], w_b.clone()),
        w_c: leaf(&mut tape, vec![ds, di], w_c.clone()),
        d_state: ds,
    };
    let y = ssm_scan(&mut tape, x_id, &p).unwrap();
    let got = tape.value(y).data().to_vec();
    let want = naive_recurrence(&x, &a_log, &w_delta, &b_delta, &w_b, &w_c, len, di, ds);
    got.iter()
        .zip(&want)
        .map(|(g, w)| (g - w).abs())
        .fold(0.0f64, f64::max)
}

#[test]
fn criterion_03_scan_matches_naive_recurrence() {
    let _g = serial();
    let mut rng = seeded_rng(31);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let len = rng.random_range(1..=64);
        let di = rng.random_range(1..=6);
        let ds = rng.random_range(1..=6);
        worst = worst.max(scan_case(&mut rng, len, di, ds));
    }
    assert!(worst < 1e-10, "worst scan deviation {worst}");

    // Closed-form discretization checks.
    let (a_bar, b_bar) = discretize(-1.0, 1.0, std::f64::consts::LN_2).unwrap();
    assert!((a_bar - 0.5).abs() < 1e-12);
    assert!((b_bar - 0.5).abs() < 1e-12);
    let (a_bar, b_bar) = discretize(-2.0, 3.0, 1.0).unwrap();
    let want_a = (-2.0f64).exp();
    let want_b = 3.0 * (1.0 - (-2.0f64).exp()) / 2.0;
    assert!((a_bar - want_a).abs() < 1e-12);
    assert!((b_bar - want_b).abs() < 1e-12);
    println!(
        "criterion 3: PASS — 100 random scans within {worst:.1e}, closed forms to 1e-12"
    );
}

#[test]
fn criterion_04_causality() {
    let _g = serial();
    let mut rng = seeded_rng(37);
    let (rows, len, di, ds) = (2usize, 8usize, 3usize, 2usize);
    let x = rand_vec(&mut rng, rows * len * di, -1.0, 1.0);
    let a_log = rand_vec(&mut rng, di * ds, -1.0, 1.0);
    let w_delta = rand_vec(&mut rng, di * di, -0.5, 0.5);
    let b_delta = rand_vec(&mut rng, di, -1.0, 0.0);
    let w_b = rand_vec(&mut rng, ds * di, -0.5, 0.5);
    let w_c = rand_vec(&mut rng, ds * di, -0.5, 0.5);

    let run = |x: &[f64]| -> Vec<f64> {
        let mut tape = Tape::new();
        let x_id = leaf(&mut tape, vec![rows, len, di], x.to_vec());
        let p = SsmParams {
            a_log: leaf(&mut tape, vec![di, ds], a_log.clone()),
            w_delta: leaf(&mut tape, vec![di, di], w_delta.clone()),
            b_delta: leaf(&mut tape, vec![di], b_delta.clone()),
            w_b: leaf(&mut tape, vec![ds, di], w_b.clone()),
            w_c: leaf(&mut tape, vec![ds, di], w_c.clone()),
            d_state: ds,
        };
        let y = ssm_scan(&mut tape, x_id, &p).unwrap();
        tape.value(y).data().to_vec()
    };

    let base = run(&x);
    let mut checks = 0usize;
    for row in 0..rows {
        for t_mod in 0..len {
            for d in 0..di {
                let mut bumped = x.clone();
                bumped[(row * len + t_mod) * di + d] += 0.35;
                let got = run(&bumped);
                for r in 0..rows {
                    for t in 0..len {
                        let same = got[(r * len + t) * di..(r * len + t + 1) * di]
                            == base[(r * len + t) * di..(r * len + t + 1) * di];
                        if r != row || t < t_mod {
                            assert!(
                                same,
                                "perturbing row {row} step {t_mod} leaked into row {r} step {t}"
                            );
                            checks += 1;
                        }
                    }
                }
                // The perturbed step itself must respond (nonzero readout).
                assert_ne!(
                    &got[(row * len + t_mod) * di..(row * len + t_mod + 1) * di],
                    &base[(row * len + t_mod) * di..(row * len + t_mod + 1) * di],
                    "step {t_mod} ignored its own input"
                );
            }
        }
    }
    println!("criterion 4: PASS — {checks} past/other-row outputs bit-unchanged at L=8");
}

fn overfit_setup() -> (SeriesData, ModelConfig, TrainConfig) {
    let mut rng = seeded_rng(99);
    let values: Vec<f64> = (0..2000)
        .map(|i| (i as f64 * 0.13).sin() + 0.01 * rng.random_range(-1.0..1.0))
        .collect();
    let data = SeriesData::new(values, 2000, 1).unwrap();
    let model_cfg = ModelConfig {
        lookback: 32,
        horizon: 16,
        channels: 1,
        n1: 16,
        n2: 8,
        d_state: 8,
        e_fact: 1,
        d_conv: 2,
        dropout_p: 0.0,
        ..ModelConfig::default()
    };
    // 1353 train windows / batch 32 = 43 steps per epoch; 11 epochs = 473
    // optimizer steps, inside the 500-step budget.
    let train_cfg = TrainConfig {
        epochs: 11,
        batch_size: 32,
        lr: 3e-3,
        weight_decay: 0.0,
        patience: 2,
        seed: 7,
        loss_scale: LossScale::Raw,
    };
    (data, model_cfg, train_cfg)
}

fn overfit_run() -> (Vec<f64>, f64, f64) {
    let (data, model_cfg, train_cfg) = overfit_setup();
    let splits = split_rows(
        data.rows,
        &SplitSpec::Fractions { train: 0.7, val: 0.1, test: 0.2 },
    )
    .unwrap();
    let mut model = DtMamba::new(model_cfg, train_cfg.seed).unwrap();
    let history = train(&mut model, &data, &splits, &train_cfg, |_| {}).unwrap();
    let losses: Vec<f64> = history.iter().map(|e| e.train_loss).collect();
    let final_train = *losses.last().unwrap();
    let test = evaluate(&model, &data, &splits.test, train_cfg.batch_size)
        .unwrap()
        .expect("test split has windows");
    (losses, final_train, test.mse)
}

#[test]
fn criterion_05_overfit_probe() {
    let _g = serial();
    let started = Instant::now();
    let (_, final_train, test_mse) = overfit_run();
    let secs = started.elapsed().as_secs_f64();
    assert!(final_train < 0.01, "train mse {final_train} after 473 steps");
    assert!(test_mse < 0.05, "test mse {test_mse}");
    assert!(secs < 300.0, "probe took {secs:.1}s");
    println!(
        "criterion 5: PASS — train mse {final_train:.2e}, test mse {test_mse:.2e} ({secs:.1}s)"
    );
}

#[test]
fn criterion_06_variant_structure() {
    let _g = serial();
    let variants = [Variant::DtMamba, Variant::DMamba, Variant::TMamba, Variant::Mamba];
    let mut rng = seeded_rng(41);
    let x = Tensor::from_vec(vec![1, 96, 1], rand_vec(&mut rng, 96, -1.0, 1.0)).unwrap();
    let mut counts = Vec::new();
    for v in variants {
        let cfg = ModelConfig { variant: v, ..ModelConfig::default() };
        let model = DtMamba::new(cfg, 13).unwrap();
        let out = forecast(&model, &x).unwrap();
        assert_eq!(out.shape(), &[1, 96, 1], "{v:?} output shape");
        counts.push(model.param_count());
    }
    let (dt, dm, tm, m) = (counts[0], counts[1], counts[2], counts[3]);
    assert!(dt > dm, "DtMamba {dt} vs DMamba {dm}");
    assert!(dt > tm && tm > m, "DtMamba {dt} vs TMamba {tm} vs Mamba {m}");
    println!(
        "criterion 6: PASS — all variants emit (B,S,N); params {dt} > {dm}, {dt} > {tm} > {m}"
    );
}

#[test]
fn criterion_07_metric_fidelity() {
    let _g = serial();
    let mut rng = seeded_rng(43);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (b, s, n) = (
            rng.random_range(1..4),
            rng.random_range(1..6),
            rng.random_range(1..4),
        );
        let pred =
            Tensor::from_vec(vec![b, s, n], rand_vec(&mut rng, b * s * n, -3.0, 3.0)).unwrap();
        let truth =
            Tensor::from_vec(vec![b, s, n], rand_vec(&mut rng, b * s * n, -3.0, 3.0)).unwrap();

        // Brute-force recomputation, element by element.
        let mut sq = 0.0;
        let mut ab = 0.0;
        for (p, t) in pred.data().iter().zip(truth.data()) {
            sq += (p - t).powi(2);
            ab += (p - t).abs();
        }
        let count = (b * s * n) as f64;
        let m = mse(&pred, &truth).unwrap();
        let a = mae(&pred, &truth).unwrap();
        worst = worst.max((m - sq / count).abs()).max((a - ab / count).abs());

        let mut accum = MetricsAccum::new(s, n);
        accum.add(&pred, &truth).unwrap();
        let report = accum.finish().unwrap();
        worst = worst.max((report.mse - m).abs()).max((report.mae - a).abs());
        assert!(report.mae <= report.mse.sqrt() + 1e-12, "mae above rms");
    }
    assert!(worst < 1e-12, "worst metric deviation {worst}");
    println!("criterion 7: PASS — 50 reports match brute force within {worst:.1e}");
}

#[test]
fn criterion_08_scan_scales_linearly() {
    let _g = serial();
    let (di, ds) = (64usize, 16usize);
    let mut rng = seeded_rng(47);
    let a_log = rand_vec(&mut rng, di * ds, -1.0, 1.0);
    let w_delta = rand_vec(&mut rng, di * di, -0.1, 0.1);
    let b_delta = rand_vec(&mut rng, di, -1.0, 0.0);
    let w_b = rand_vec(&mut rng, ds * di, -0.1, 0.1);
    let w_c = rand_vec(&mut rng, ds * di, -0.1, 0.1);

    let mut time_len = |len: usize| -> f64 {
        let x = rand_vec(&mut rng, len * di, -1.0, 1.0);
        let mut best = f64::INFINITY;
        for _ in 0..5 {
            let mut tape = Tape::new();
            let x_id = leaf(&mut tape, vec![len, di], x.clone());
            let p = SsmParams {
                a_log: leaf(&mut tape, vec![di, ds], a_log.clone()),
                w_delta: leaf(&mut tape, vec![di, di], w_delta.clone()),
                b_delta: leaf(&mut tape, vec![di], b_delta.clone()),
                w_b: leaf(&mut tape, vec![ds, di], w_b.clone()),
                w_c: leaf(&mut tape, vec![ds, di], w_c.clone()),
                d_state: ds,
            };
            let started = Instant::now();
            let y = ssm_scan(&mut tape, x_id, &p).unwrap();
            let elapsed = started.elapsed().as_secs_f64();
            assert!(tape.value(y).data().iter().all(|v| v.is_finite()));
            best = best.min(elapsed);
        }
        best
    };

    let t256 = time_len(256);
    let t512 = time_len(512);
    let t1024 = time_len(1024);
    let r1 = t512 / t256;
    let r2 = t1024 / t512;
    assert!(r1 < 2.5, "256→512 scaled by {r1:.2}");
    assert!(r2 < 2.5, "512→1024 scaled by {r2:.2}");
    println!(
        "criterion 8: PASS — doubling ratios {r1:.2} (256→512) and {r2:.2} (512→1024)"
    );
}

#[test]
fn criterion_09_reproduction_probe() {
    let _g = serial();
    let path = std::env::var_os("DTMAMBA_ETTH1")
        .map(std::path::PathBuf::from)
        .or_else(|| {
            let local = std::path::Path::new("data/ETTh1.csv");
            local.exists().then(|| local.to_path_buf())
        });
    let Some(path) = path else {
        println!(
            "criterion 9: SKIP — ETTh1 CSV not present \
             (set DTMAMBA_ETTH1 or add data/ETTh1.csv); probe is best-effort"
        );
        return;
    };

    let data = dtmamba::dataset::ingest_csv(&path).unwrap();
    assert_eq!(data.channels, 7, "ETTh1 has 7 channels");
    let splits = split_rows(
        data.rows,
        &SplitSpec::Rows { train: 8640, val: 2880, test: 2880 },
    )
    .unwrap();
    let model_cfg = ModelConfig { channels: 7, ..ModelConfig::default() };
    let train_cfg = TrainConfig::default();
    let mut model = DtMamba::new(model_cfg, train_cfg.seed).unwrap();
    train(&mut model, &data, &splits, &train_cfg, |e| {
        eprintln!("epoch {} train {:.4} val {:?}", e.epoch, e.train_loss, e.val_mse);
    })
    .unwrap();
    let report = evaluate(&model, &data, &splits.test, train_cfg.batch_size)
        .unwrap()
        .expect("test split has windows");
    let (ref_mse, ref_mae) = (0.386, 0.399);
    let gap = (report.mse - ref_mse).abs() / ref_mse;
    let label = if gap <= 0.25 { "consistent" } else { "gap documented" };
    println!(
        "criterion 9: PASS ({label}) — test mse {:.3} mae {:.3} vs reference {ref_mse}/{ref_mae} ({:.0}% off)",
        report.mse,
        report.mae,
        gap * 100.0
    );
}

#[test]
fn criterion_10_determinism() {
    let _g = serial();
    let (losses_a, _, test_a) = overfit_run();
    let (losses_b, _, test_b) = overfit_run();
    assert_eq!(losses_a.len(), losses_b.len());
    for (i, (a, b)) in losses_a.iter().zip(&losses_b).enumerate() {
        assert!(
            a.to_bits() == b.to_bits(),
            "epoch {} diverged: {a} vs {b}",
            i + 1
        );
    }
    assert_eq!(test_a.to_bits(), test_b.to_bits());
    println!(
        "criterion 10: PASS — {} epoch losses and test mse bit-identical across reruns",
        losses_a.len()
    );
}
