//! Twin-Mamba block: embedding, pre-dropout residual branch, and a pair of
//! Mamba mixers applied to the same input and summed.
//!
//! Per block, on rows shaped (R, 1, w_in):
//!
//!   XI'  = embed(x)            linear w_in → w_out
//!   R    = res_fc(XI')         linear w_out → n2, taken before dropout
//!   XI'' = dropout(XI')
//!   out  = mamba_a(XI'') + mamba_b(XI'')
//!
//! The residual is returned separately; the model sums every block's
//! residual into the final representation. A block can run with one mixer
//! (mamba_b absent), with tied twins (both handles pointing at the same
//! weights, which doubles the single mixer's output), and with the mixers
//! reading the row either as one long feature vector (L = 1, d_model =
//! w_out) or as a sequence of scalars (L = w_out, d_model = 1).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::DtError;
use crate::ssm::{linear3, mamba_block, MambaParams};
use crate::tensor::{Tape, Tensor, TensorId};
use crate::Result;

/// Which axis of a (R, 1, w) row the Mamba mixers treat as time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MambaAxis {
    /// The whole row is one timestep of width w (L = 1, d_model = w).
    Feature,
    /// The row is a length-w sequence of scalars (L = w, d_model = 1).
    Sequence,
}

impl std::str::FromStr for MambaAxis {
    type Err = DtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature" => Ok(MambaAxis::Feature),
            "sequence" => Ok(MambaAxis::Sequence),
            other => Err(DtError::Config(format!(
                "unknown mamba axis {other:?}; expected feature or sequence"
            ))),
        }
    }
}

/// Tape handles for one twin-Mamba block.
#[derive(Debug, Clone, Copy)]
pub struct TMambaBlockParams {
    /// (w_in, w_out) + (w_out,): embedding.
    pub embed_w: TensorId,
    pub embed_b: TensorId,
    /// (w_out, n2) + (n2,): residual branch; absent when the model runs
    /// without residuals.
    pub res: Option<(TensorId, TensorId)>,
    pub mamba_a: MambaParams,
    /// Absent for single-mixer blocks.
    pub mamba_b: Option<MambaParams>,
    pub dropout_p: f64,
    pub axis: MambaAxis,
}

/// Inverted-scale dropout mask: each entry is 0 with probability p, else
/// 1/(1−p), so the masked signal is unbiased in expectation.
pub(crate) fn dropout_mask(rng: &mut ChaCha8Rng, shape: &[usize], p: f64) -> Tensor {
    let keep = 1.0 - p;
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 / keep })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("mask shape is the input's")
}

fn twin_mix(tape: &mut Tape, x: TensorId, p: &TMambaBlockParams) -> Result<TensorId> {
    let xm = match p.axis {
        MambaAxis::Feature => x,
        MambaAxis::Sequence => tape.permute(x, vec![0, 2, 1])?,
    };
    let a = mamba_block(tape, xm, &p.mamba_a)?;
    let mixed = match &p.mamba_b {
        Some(mb) => {
            let b = mamba_block(tape, xm, mb)?;
            tape.add(a, b)?
        }
        None => a,
    };
    match p.axis {
        MambaAxis::Feature => Ok(mixed),
        MambaAxis::Sequence => tape.permute(mixed, vec![0, 2, 1]),
    }
}

/// Runs one block with an explicit dropout mask (`None` = identity).
/// Exposed for tests that need to force a particular mask.
pub(crate) fn tmamba_forward_masked(
    tape: &mut Tape,
    x: TensorId,
    p: &TMambaBlockParams,
    mask: Option<Tensor>,
) -> Result<(TensorId, Option<TensorId>)> {
    if !(0.0..1.0).contains(&p.dropout_p) {
        return Err(DtError::Config(format!(
            "dropout probability must be in [0, 1), got {}",
            p.dropout_p
        )));
    }
    let embedded = linear3(tape, x, p.embed_w, p.embed_b)?;
    let residual = match p.res {
        Some((w, b)) => Some(linear3(tape, embedded, w, b)?),
        None => None,
    };
    let dropped = match mask {
        Some(m) => {
            if m.shape() != tape.value(embedded).shape() {
                return Err(DtError::Shape(format!(
                    "dropout mask shape {:?} does not match embedding {:?}",
                    m.shape(),
                    tape.value(embedded).shape()
                )));
            }
            let mid = tape.constant(m)?;
            tape.mul(embedded, mid)?
        }
        None => embedded,
    };
    let out = twin_mix(tape, dropped, p)?;
    Ok((out, residual))
}

/// Runs one block. `rng: Some` means training mode: a fresh dropout mask is
/// drawn when dropout_p > 0. `rng: None` means evaluation: dropout is the
/// identity and the forward is deterministic.
pub fn tmamba_forward(
    tape: &mut Tape,
    x: TensorId,
    p: &TMambaBlockParams,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(TensorId, Option<TensorId>)> {
    let mask = match rng {
        Some(r) if p.dropout_p > 0.0 => {
            let shape: Vec<usize> = {
                let xs = tape.value(x).shape();
                let w_out = tape.value(p.embed_w).shape()[1];
                vec![xs[0], xs[1], w_out]
            };
            Some(dropout_mask(r, &shape, p.dropout_p))
        }
        _ => None,
    };
    tmamba_forward_masked(tape, x, p, mask)
}
