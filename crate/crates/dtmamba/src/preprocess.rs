//! Reversible instance normalization and channel-independence reshaping.
//!
//! RevIN standardizes every (instance, channel) pair over the lookback
//! window — population std, eps added to the denominator — optionally
//! applies a learnable per-channel affine, and keeps the statistics so the
//! forecast can be mapped back to the original scale exactly.
//!
//! Channel independence flattens (B, T, N) to (B·N, 1, T): each channel of
//! each instance becomes its own row, so one set of network weights serves
//! every channel. Both reshapes are pure permutations with bit-exact
//! inverses.
//!
//! Normalization statistics are treated as constants of the window: no
//! gradient flows through mean/std. Inputs are not learnable, so every
//! parameter gradient (gamma, beta, downstream weights) is still exact.

use crate::error::DtError;
use crate::tensor::{Tape, Tensor, TensorId};
use crate::Result;

/// Shape-with-meaning tag for batches moving through the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// (B, len, N): batch x time x channels — lookback or horizon block.
    BatchTimeChannel { b: usize, len: usize, n: usize },
    /// (B·N, 1, len): one row per (instance, channel); the factorization is
    /// recorded so the inverse reshape is unambiguous.
    ChannelRows { b: usize, n: usize, len: usize },
}

impl Layout {
    pub fn shape(&self) -> Vec<usize> {
        match *self {
            Layout::BatchTimeChannel { b, len, n } => vec![b, len, n],
            Layout::ChannelRows { b, n, len } => vec![b * n, 1, len],
        }
    }
}

/// A tape tensor paired with its layout tag.
#[derive(Debug, Clone, Copy)]
pub struct SeriesBatch {
    pub id: TensorId,
    pub layout: Layout,
}

impl SeriesBatch {
    /// Tags a tape tensor, checking the tag against the actual shape.
    pub fn new(tape: &Tape, id: TensorId, layout: Layout) -> Result<Self> {
        let actual = tape.value(id).shape();
        let expected = layout.shape();
        if actual != expected.as_slice() {
            return Err(DtError::Shape(format!(
                "layout {layout:?} expects shape {expected:?}, tensor has {actual:?}"
            )));
        }
        Ok(SeriesBatch { id, layout })
    }
}

/// Per-window normalization record: statistics plus the affine parameters
/// (tape handles when the learnable affine is enabled).
#[derive(Debug, Clone)]
pub struct RevinStats {
    /// (B, 1, N) per-instance per-channel mean over the lookback window.
    pub mean: Tensor,
    /// (B, 1, N) population standard deviation (before eps).
    pub std: Tensor,
    /// Learnable per-channel scale (N,), when the affine is enabled.
    pub gamma: Option<TensorId>,
    /// Learnable per-channel shift (N,), when the affine is enabled.
    pub beta: Option<TensorId>,
    pub eps: f64,
}

/// Mean and population std per (instance, channel) over the time axis.
pub fn window_stats(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, t, n) = match *x.shape() {
        [b, t, n] => (b, t, n),
        ref s => {
            return Err(DtError::Shape(format!(
                "window stats expect (B,T,N), got {s:?}"
            )))
        }
    };
    if t < 2 {
        return Err(DtError::Data(format!(
            "lookback length {t} too short to normalize: need T >= 2"
        )));
    }
    let mut mean = vec![0.0; b * n];
    let mut std = vec![0.0; b * n];
    for bi in 0..b {
        let inst = &x.data()[bi * t * n..(bi + 1) * t * n];
        for ni in 0..n {
            let mut sum = 0.0;
            for ti in 0..t {
                sum += inst[ti * n + ni];
            }
            let mu = sum / t as f64;
            let mut var = 0.0;
            for ti in 0..t {
                let d = inst[ti * n + ni] - mu;
                var += d * d;
            }
            mean[bi * n + ni] = mu;
            std[bi * n + ni] = (var / t as f64).sqrt();
        }
    }
    Ok((
        Tensor::from_vec(vec![b, 1, n], mean)?,
        Tensor::from_vec(vec![b, 1, n], std)?,
    ))
}

/// Normalizes a lookback batch: gamma ⊙ (x − mean)/(std + eps) + beta,
/// broadcast over time. Statistics are retained for the inverse.
pub fn revin_forward(
    tape: &mut Tape,
    x: &SeriesBatch,
    affine: Option<(TensorId, TensorId)>,
    eps: f64,
) -> Result<(SeriesBatch, RevinStats)> {
    let layout = match x.layout {
        l @ Layout::BatchTimeChannel { .. } => l,
        other => {
            return Err(DtError::Shape(format!(
                "revin_forward expects (B,T,N), got layout {other:?}"
            )))
        }
    };
    let value = tape.value(x.id);
    if !value.is_finite() {
        return Err(DtError::Data("non-finite value in input window".into()));
    }
    let (mean, std) = window_stats(value)?;
    let denom = Tensor::from_vec(
        std.shape().to_vec(),
        std.data().iter().map(|&s| s + eps).collect(),
    )?;
    let mean_id = tape.constant(mean.clone())?;
    let denom_id = tape.constant(denom)?;
    let centered = tape.sub(x.id, mean_id)?;
    let mut out = tape.div(centered, denom_id)?;
    if let Some((gamma, beta)) = affine {
        let scaled = tape.mul(out, gamma)?;
        out = tape.add(scaled, beta)?;
    }
    let stats = RevinStats {
        mean,
        std,
        gamma: affine.map(|(g, _)| g),
        beta: affine.map(|(_, b)| b),
        eps,
    };
    Ok((SeriesBatch { id: out, layout }, stats))
}

/// Exact algebraic inverse of [`revin_forward`], applied to the forecast
/// horizon using the lookback-window statistics (the only ones available
/// at prediction time).
pub fn revin_inverse(
    tape: &mut Tape,
    xhat: &SeriesBatch,
    stats: &RevinStats,
) -> Result<SeriesBatch> {
    let layout = match xhat.layout {
        l @ Layout::BatchTimeChannel { .. } => l,
        other => {
            return Err(DtError::Shape(format!(
                "revin_inverse expects (B,S,N), got layout {other:?}"
            )))
        }
    };
    let mut cur = xhat.id;
    if let (Some(gamma), Some(beta)) = (stats.gamma, stats.beta) {
        if let Some(g) = tape.value(gamma).data().iter().find(|g| g.abs() < 1e-12) {
            return Err(DtError::Numeric(format!(
                "cannot invert normalization: gamma value {g} below 1e-12"
            )));
        }
        let shifted = tape.sub(cur, beta)?;
        cur = tape.div(shifted, gamma)?;
    }
    let denom = Tensor::from_vec(
        stats.std.shape().to_vec(),
        stats.std.data().iter().map(|&s| s + stats.eps).collect(),
    )?;
    let denom_id = tape.constant(denom)?;
    let mean_id = tape.constant(stats.mean.clone())?;
    let rescaled = tape.mul(cur, denom_id)?;
    let out = tape.add(rescaled, mean_id)?;
    Ok(SeriesBatch { id: out, layout })
}

/// (B, T, N) -> (B·N, 1, T): element (b, t, n) relocates to (b·N + n, 0, t).
/// Pure permutation; values are untouched.
pub fn channel_independence(tape: &mut Tape, x: &SeriesBatch) -> Result<SeriesBatch> {
    let (b, len, n) = match x.layout {
        Layout::BatchTimeChannel { b, len, n } => (b, len, n),
        other => {
            return Err(DtError::Shape(format!(
                "channel_independence expects (B,T,N), got layout {other:?}"
            )))
        }
    };
    let swapped = tape.permute(x.id, vec![0, 2, 1])?;
    let rows = tape.reshape(swapped, vec![b * n, 1, len])?;
    Ok(SeriesBatch { id: rows, layout: Layout::ChannelRows { b, n, len } })
}

/// (B·N, 1, S) -> (B, S, N): exact inverse permutation of
/// [`channel_independence`], bit-exact.
pub fn channel_independence_inverse(
    tape: &mut Tape,
    x: &SeriesBatch,
) -> Result<SeriesBatch> {
    let (b, n, len) = match x.layout {
        Layout::ChannelRows { b, n, len } => (b, n, len),
        other => {
            return Err(DtError::Shape(format!(
                "channel_independence_inverse expects (B*N,1,len), got layout {other:?}"
            )))
        }
    };
    let unstacked = tape.reshape(x.id, vec![b, n, len])?;
    let out = tape.permute(unstacked, vec![0, 2, 1])?;
    Ok(SeriesBatch { id: out, layout: Layout::BatchTimeChannel { b, len, n } })
}
