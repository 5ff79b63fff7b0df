//! The DTMamba forecaster: normalization, channel-independent rows, a stack
//! of twin-Mamba blocks with pre-dropout residual branches, and a linear
//! projection onto the horizon.
//!
//! Full pipeline on a lookback batch x of shape (B, T, N):
//!
//!   z    = revin(x)                       per-(instance, channel) stats
//!   rows = channel_independence(z)        (B·N, 1, T)
//!   m, r¹ = block₁(rows)                  embed T → n1, residual n1 → n2
//!   m, r² = block₂(m)                     embed n1 → n2, residual n2 → n2
//!   a    = m + r¹ + r²
//!   ŷ    = revin⁻¹(ci⁻¹(project(a)))      n2 → S, back to (B, S, N)
//!
//! Reduced variants reuse the same machinery: one mixer per block, a single
//! block, or a bare mixer with neither residual nor dropout. The model owns
//! master parameter tensors; every step binds them onto a fresh tape as
//! leaves, so the graph never outlives the step.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::DtError;
use crate::init;
use crate::preprocess::{
    channel_independence, channel_independence_inverse, revin_forward, revin_inverse,
    Layout, RevinStats, SeriesBatch,
};
use crate::ssm::{linear3, MambaParams, SsmParams};
use crate::tensor::{Tape, Tensor, TensorId};
use crate::tmamba::{tmamba_forward, MambaAxis, TMambaBlockParams};
use crate::Result;

/// Architecture family: the full twin model and its reduced forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Two blocks, two mixers each.
    DtMamba,
    /// Two blocks, one mixer each.
    DMamba,
    /// One block, two mixers.
    TMamba,
    /// One block, one mixer, no residual, no dropout.
    Mamba,
}

impl Variant {
    fn two_blocks(self) -> bool {
        matches!(self, Variant::DtMamba | Variant::DMamba)
    }

    fn twin_mixers(self) -> bool {
        matches!(self, Variant::DtMamba | Variant::TMamba)
    }
}

impl std::str::FromStr for Variant {
    type Err = DtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dtmamba" => Ok(Variant::DtMamba),
            "dmamba" => Ok(Variant::DMamba),
            "tmamba" => Ok(Variant::TMamba),
            "mamba" => Ok(Variant::Mamba),
            other => Err(DtError::Config(format!(
                "unknown variant {other:?}; expected dtmamba, dmamba, tmamba, or mamba"
            ))),
        }
    }
}

/// Everything that determines the network's structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Lookback window length T.
    pub lookback: usize,
    /// Forecast horizon S.
    pub horizon: usize,
    /// Number of series channels N.
    pub channels: usize,
    /// First embedding width.
    pub n1: usize,
    /// Second embedding width; also the residual width.
    pub n2: usize,
    /// SSM state dimension per channel.
    pub d_state: usize,
    /// Mixer expansion factor: d_inner = e_fact · d_model.
    pub e_fact: usize,
    /// Causal convolution width inside each mixer.
    pub d_conv: usize,
    /// Dropout probability after each embedding.
    pub dropout_p: f64,
    pub variant: Variant,
    /// Keep the per-block residual branches.
    pub use_residual: bool,
    /// Process each channel as its own row; when off, the whole multivariate
    /// window is flattened into one row of width T·N.
    pub use_channel_independence: bool,
    /// Learnable per-channel scale/shift around normalization.
    pub revin_affine: bool,
    pub revin_eps: f64,
    /// Share one weight set between the two mixers of a block.
    pub twin_tied: bool,
    pub mamba_axis: MambaAxis,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            lookback: 96,
            horizon: 96,
            channels: 1,
            n1: 256,
            n2: 128,
            d_state: 256,
            e_fact: 1,
            d_conv: 2,
            dropout_p: 0.05,
            variant: Variant::DtMamba,
            use_residual: true,
            use_channel_independence: true,
            revin_affine: true,
            revin_eps: 1e-5,
            twin_tied: false,
            mamba_axis: MambaAxis::Feature,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("horizon", self.horizon),
            ("channels", self.channels),
            ("n1", self.n1),
            ("n2", self.n2),
            ("d_state", self.d_state),
            ("e_fact", self.e_fact),
            ("d_conv", self.d_conv),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(DtError::Config(format!("{name} must be positive")));
            }
        }
        if self.lookback < 2 {
            return Err(DtError::Config(format!(
                "lookback must be at least 2 to normalize, got {}",
                self.lookback
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(DtError::Config(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if !(self.revin_eps >= 0.0 && self.revin_eps.is_finite()) {
            return Err(DtError::Config(format!(
                "revin_eps must be finite and non-negative, got {}",
                self.revin_eps
            )));
        }
        Ok(())
    }

    /// (embed_in, embed_out) per block for this variant.
    fn block_widths(&self) -> Vec<(usize, usize)> {
        let in_dim = if self.use_channel_independence {
            self.lookback
        } else {
            self.lookback * self.channels
        };
        if self.variant.two_blocks() {
            vec![(in_dim, self.n1), (self.n1, self.n2)]
        } else {
            vec![(in_dim, self.n2)]
        }
    }

    fn has_residual(&self) -> bool {
        self.use_residual && self.variant != Variant::Mamba
    }

    fn block_dropout(&self) -> f64 {
        if self.variant == Variant::Mamba {
            0.0
        } else {
            self.dropout_p
        }
    }

    /// d_model the mixers see for a block of output width `w`.
    fn mixer_width(&self, w: usize) -> usize {
        match self.mamba_axis {
            MambaAxis::Feature => w,
            MambaAxis::Sequence => 1,
        }
    }

    fn projection_out(&self) -> usize {
        if self.use_channel_independence {
            self.horizon
        } else {
            self.horizon * self.channels
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct SsmWeights {
    pub a_log: Tensor,
    pub w_delta: Tensor,
    pub b_delta: Tensor,
    pub w_b: Tensor,
    pub w_c: Tensor,
}

#[derive(Debug, Clone)]
pub struct MambaWeights {
    pub in_proj: Linear,
    pub gate_proj: Linear,
    pub conv_k: Tensor,
    pub conv_b: Tensor,
    pub out_proj: Linear,
    pub ssm: SsmWeights,
}

#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub embed: Linear,
    pub res: Option<Linear>,
    pub mamba_a: MambaWeights,
    /// Absent for single-mixer variants and for tied twins.
    pub mamba_b: Option<MambaWeights>,
}

/// The model: a config plus master parameter tensors. Forward passes bind
/// the masters onto a caller-provided tape.
#[derive(Debug, Clone)]
pub struct DtMamba {
    pub config: ModelConfig,
    pub gamma: Option<Tensor>,
    pub beta: Option<Tensor>,
    pub blocks: Vec<BlockWeights>,
    pub proj: Linear,
}

fn init_linear(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Linear {
    Linear {
        w: init::linear_weight(rng, fan_in, fan_out),
        b: init::linear_bias(rng, fan_in, fan_out),
    }
}

fn init_mamba(rng: &mut ChaCha8Rng, cfg: &ModelConfig, d_model: usize) -> MambaWeights {
    let di = cfg.e_fact * d_model;
    MambaWeights {
        in_proj: init_linear(rng, d_model, di),
        gate_proj: init_linear(rng, d_model, di),
        conv_k: init::conv_kernel(rng, cfg.d_conv, di),
        conv_b: init::conv_bias(rng, cfg.d_conv, di),
        out_proj: init_linear(rng, di, d_model),
        ssm: SsmWeights {
            a_log: init::s4_a_log(di, cfg.d_state),
            w_delta: init::uniform(rng, vec![di, di], 1.0 / (di as f64).sqrt()),
            b_delta: init::dt_bias(rng, di),
            w_b: init::uniform(rng, vec![cfg.d_state, di], 1.0 / (di as f64).sqrt()),
            w_c: init::uniform(rng, vec![cfg.d_state, di], 1.0 / (di as f64).sqrt()),
        },
    }
}

impl DtMamba {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = init::seeded_rng(seed);
        let (gamma, beta) = if config.revin_affine {
            (
                Some(Tensor::filled(vec![config.channels], 1.0)),
                Some(Tensor::zeros(vec![config.channels])),
            )
        } else {
            (None, None)
        };
        let mut blocks = Vec::new();
        for (w_in, w_out) in config.block_widths() {
            let embed = init_linear(&mut rng, w_in, w_out);
            let res = config
                .has_residual()
                .then(|| init_linear(&mut rng, w_out, config.n2));
            let dm = config.mixer_width(w_out);
            let mamba_a = init_mamba(&mut rng, &config, dm);
            let mamba_b = (config.variant.twin_mixers() && !config.twin_tied)
                .then(|| init_mamba(&mut rng, &config, dm));
            blocks.push(BlockWeights { embed, res, mamba_a, mamba_b });
        }
        let proj = init_linear(&mut rng, config.n2, config.projection_out());
        Ok(DtMamba { config, gamma, beta, blocks, proj })
    }

    /// Parameter tensors in a stable documented order: normalization affine,
    /// then each block (embed, residual, mixer a, mixer b), then projection.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        fn mamba<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, m: &'a MambaWeights) {
            out.push((format!("{prefix}.in_w"), &m.in_proj.w));
            out.push((format!("{prefix}.in_b"), &m.in_proj.b));
            out.push((format!("{prefix}.gate_w"), &m.gate_proj.w));
            out.push((format!("{prefix}.gate_b"), &m.gate_proj.b));
            out.push((format!("{prefix}.conv_k"), &m.conv_k));
            out.push((format!("{prefix}.conv_b"), &m.conv_b));
            out.push((format!("{prefix}.out_w"), &m.out_proj.w));
            out.push((format!("{prefix}.out_b"), &m.out_proj.b));
            out.push((format!("{prefix}.a_log"), &m.ssm.a_log));
            out.push((format!("{prefix}.w_delta"), &m.ssm.w_delta));
            out.push((format!("{prefix}.b_delta"), &m.ssm.b_delta));
            out.push((format!("{prefix}.w_b"), &m.ssm.w_b));
            out.push((format!("{prefix}.w_c"), &m.ssm.w_c));
        }
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        if let Some(g) = &self.gamma {
            out.push(("revin.gamma".into(), g));
        }
        if let Some(b) = &self.beta {
            out.push(("revin.beta".into(), b));
        }
        for (i, blk) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.embed.w"), &blk.embed.w));
            out.push((format!("block{i}.embed.b"), &blk.embed.b));
            if let Some(r) = &blk.res {
                out.push((format!("block{i}.res.w"), &r.w));
                out.push((format!("block{i}.res.b"), &r.b));
            }
            mamba(&mut out, &format!("block{i}.mamba_a"), &blk.mamba_a);
            if let Some(mb) = &blk.mamba_b {
                mamba(&mut out, &format!("block{i}.mamba_b"), mb);
            }
        }
        out.push(("proj.w".into(), &self.proj.w));
        out.push(("proj.b".into(), &self.proj.b));
        out
    }

    /// Mutable view of the same tensors, in the same order as
    /// [`named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        if let Some(g) = &mut self.gamma {
            out.push(g);
        }
        if let Some(b) = &mut self.beta {
            out.push(b);
        }
        for blk in self.blocks.iter_mut() {
            out.push(&mut blk.embed.w);
            out.push(&mut blk.embed.b);
            if let Some(r) = &mut blk.res {
                out.push(&mut r.w);
                out.push(&mut r.b);
            }
            for m in [Some(&mut blk.mamba_a), blk.mamba_b.as_mut()]
                .into_iter()
                .flatten()
            {
                out.push(&mut m.in_proj.w);
                out.push(&mut m.in_proj.b);
                out.push(&mut m.gate_proj.w);
                out.push(&mut m.gate_proj.b);
                out.push(&mut m.conv_k);
                out.push(&mut m.conv_b);
                out.push(&mut m.out_proj.w);
                out.push(&mut m.out_proj.b);
                out.push(&mut m.ssm.a_log);
                out.push(&mut m.ssm.w_delta);
                out.push(&mut m.ssm.b_delta);
                out.push(&mut m.ssm.w_b);
                out.push(&mut m.ssm.w_c);
            }
        }
        out.push(&mut self.proj.w);
        out.push(&mut self.proj.b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Binds every master tensor to the tape as a gradient-carrying leaf and
    /// assembles the block handles. `ids` follows the [`named_params`] order.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        fn one(tape: &mut Tape, ids: &mut Vec<TensorId>, t: &Tensor) -> Result<TensorId> {
            let id = tape.leaf(t.clone().requires_grad())?;
            ids.push(id);
            Ok(id)
        }
        fn mamba(
            tape: &mut Tape,
            ids: &mut Vec<TensorId>,
            m: &MambaWeights,
            d_state: usize,
        ) -> Result<MambaParams> {
            Ok(MambaParams {
                in_w: one(tape, ids, &m.in_proj.w)?,
                in_b: one(tape, ids, &m.in_proj.b)?,
                gate_w: one(tape, ids, &m.gate_proj.w)?,
                gate_b: one(tape, ids, &m.gate_proj.b)?,
                conv_k: one(tape, ids, &m.conv_k)?,
                conv_b: one(tape, ids, &m.conv_b)?,
                out_w: one(tape, ids, &m.out_proj.w)?,
                out_b: one(tape, ids, &m.out_proj.b)?,
                ssm: SsmParams {
                    a_log: one(tape, ids, &m.ssm.a_log)?,
                    w_delta: one(tape, ids, &m.ssm.w_delta)?,
                    b_delta: one(tape, ids, &m.ssm.b_delta)?,
                    w_b: one(tape, ids, &m.ssm.w_b)?,
                    w_c: one(tape, ids, &m.ssm.w_c)?,
                    d_state,
                },
            })
        }
        let mut ids = Vec::new();
        let affine = match (&self.gamma, &self.beta) {
            (Some(g), Some(b)) => {
                Some((one(tape, &mut ids, g)?, one(tape, &mut ids, b)?))
            }
            _ => None,
        };
        let mut blocks = Vec::new();
        for blk in &self.blocks {
            let embed_w = one(tape, &mut ids, &blk.embed.w)?;
            let embed_b = one(tape, &mut ids, &blk.embed.b)?;
            let res = match &blk.res {
                Some(r) => Some((
                    one(tape, &mut ids, &r.w)?,
                    one(tape, &mut ids, &r.b)?,
                )),
                None => None,
            };
            let mamba_a = mamba(tape, &mut ids, &blk.mamba_a, self.config.d_state)?;
            let mamba_b = match &blk.mamba_b {
                Some(mb) => Some(mamba(tape, &mut ids, mb, self.config.d_state)?),
                None if self.config.variant.twin_mixers() && self.config.twin_tied => {
                    Some(mamba_a)
                }
                None => None,
            };
            blocks.push(TMambaBlockParams {
                embed_w,
                embed_b,
                res,
                mamba_a,
                mamba_b,
                dropout_p: self.config.block_dropout(),
                axis: self.config.mamba_axis,
            });
        }
        let proj_w = one(tape, &mut ids, &self.proj.w)?;
        let proj_b = one(tape, &mut ids, &self.proj.b)?;
        Ok(Bound { ids, affine, blocks, proj: (proj_w, proj_b) })
    }

    /// Full forward pass on a (B, T, N) lookback batch. `rng: Some` enables
    /// dropout (training); `None` is deterministic evaluation.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: &Tensor,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardArtifacts> {
        let cfg = &self.config;
        let s = x.shape();
        if s.len() != 3 || s[1] != cfg.lookback || s[2] != cfg.channels {
            return Err(DtError::Shape(format!(
                "forward expects (B, {}, {}), got {s:?}",
                cfg.lookback, cfg.channels
            )));
        }
        let b = s[0];
        if b == 0 {
            return Err(DtError::Shape("forward needs at least one window".into()));
        }
        let xid = tape.constant(x.clone())?;
        let batch = SeriesBatch::new(
            tape,
            xid,
            Layout::BatchTimeChannel { b, len: cfg.lookback, n: cfg.channels },
        )?;
        let (normed, stats) = revin_forward(tape, &batch, bound.affine, cfg.revin_eps)?;
        let mut cur = if cfg.use_channel_independence {
            channel_independence(tape, &normed)?.id
        } else {
            tape.reshape(normed.id, vec![b, 1, cfg.lookback * cfg.channels])?
        };
        let mut residuals = Vec::new();
        for blk in &bound.blocks {
            let step_rng = rng.as_deref_mut();
            let (out, res) = tmamba_forward(tape, cur, blk, step_rng)?;
            cur = out;
            if let Some(r) = res {
                residuals.push(r);
            }
        }
        let mut combined = cur;
        for r in residuals {
            combined = tape.add(combined, r)?;
        }
        let projected = linear3(tape, combined, bound.proj.0, bound.proj.1)?;
        let normalized = if cfg.use_channel_independence {
            let rows = SeriesBatch::new(
                tape,
                projected,
                Layout::ChannelRows { b, n: cfg.channels, len: cfg.horizon },
            )?;
            channel_independence_inverse(tape, &rows)?
        } else {
            let flat = tape.reshape(projected, vec![b, cfg.horizon, cfg.channels])?;
            SeriesBatch::new(
                tape,
                flat,
                Layout::BatchTimeChannel { b, len: cfg.horizon, n: cfg.channels },
            )?
        };
        let prediction = revin_inverse(tape, &normalized, &stats)?;
        Ok(ForwardArtifacts {
            prediction: prediction.id,
            normalized: normalized.id,
            stats,
        })
    }

    /// Serializes config and parameters to a versioned binary file; the
    /// round trip is bit-exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config)
            .map_err(|e| DtError::Config(format!("config serialization failed: {e}")))?;
        buf.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        buf.extend_from_slice(&cfg);
        let params = self.named_params();
        buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for (name, t) in params {
            buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`save`]. The parameter set must match
    /// the stored config exactly.
    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Cursor { bytes: &bytes, at: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(DtError::Data(format!(
                "not a checkpoint: bad magic {magic:?}"
            )));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(DtError::Data(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let cfg_len = r.u64()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
            .map_err(|e| DtError::Data(format!("corrupt checkpoint config: {e}")))?;
        let mut model = DtMamba::new(config, 0)?;
        let count = r.u64()? as usize;
        let expected: Vec<String> =
            model.named_params().iter().map(|(n, _)| n.clone()).collect();
        if count != expected.len() {
            return Err(DtError::Data(format!(
                "checkpoint holds {count} parameters, config implies {}",
                expected.len()
            )));
        }
        let mut loaded: Vec<(String, Tensor)> = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u64()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|e| DtError::Data(format!("corrupt parameter name: {e}")))?;
            let rank = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            loaded.push((name, Tensor::from_vec(shape, data)?));
        }
        for (slot, (target_name, (name, tensor))) in
            model.params_mut().into_iter().zip(expected.iter().zip(loaded))
        {
            if *target_name != name {
                return Err(DtError::Data(format!(
                    "checkpoint parameter order mismatch: expected {target_name}, found {name}"
                )));
            }
            if slot.shape() != tensor.shape() {
                return Err(DtError::Data(format!(
                    "parameter {name}: shape {:?} does not match config {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor;
        }
        Ok(model)
    }
}

const MAGIC: &[u8; 4] = b"DTMB";
const CHECKPOINT_VERSION: u32 = 1;

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(DtError::Data("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Tape handles produced by [`DtMamba::bind`] for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    /// Every bound leaf, in [`DtMamba::named_params`] order.
    pub ids: Vec<TensorId>,
    pub affine: Option<(TensorId, TensorId)>,
    pub blocks: Vec<TMambaBlockParams>,
    pub proj: (TensorId, TensorId),
}

/// Outputs of one forward pass.
#[derive(Debug)]
pub struct ForwardArtifacts {
    /// (B, S, N) forecast on the original scale.
    pub prediction: TensorId,
    /// (B, S, N) forecast on the normalized scale.
    pub normalized: TensorId,
    pub stats: RevinStats,
}
