//! Shared minibatch plumbing for the classifier and policy trainers.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffusion::{step_embedding, STEP_EMBED_DIM};
use crate::error::{Error, Result};
use crate::numeric::{AdamState, FeedForwardNet, Gradients};

/// Learning-rate policy over a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate down to zero at the last step.
    Cosine,
}

impl LrSchedule {
    pub fn at(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Global-norm gradient clip applied by every trainer.
pub const GRAD_CLIP: f64 = 5.0;

/// Builds a `rows x (16 + chunk + context)` conditioned input matrix.
pub(crate) struct InputBatch {
    pub x: Array2<f64>,
    chunk_len: usize,
}

impl InputBatch {
    pub fn new(rows: usize, chunk_len: usize, context_len: usize) -> Self {
        Self {
            x: Array2::zeros((rows, STEP_EMBED_DIM + chunk_len + context_len)),
            chunk_len,
        }
    }

    pub fn set(&mut self, row: usize, k: usize, noisy: &[f64], context: &[f64]) {
        let mut r = self.x.row_mut(row);
        let r = r.as_slice_mut().expect("standard layout");
        step_embedding(k, &mut r[..STEP_EMBED_DIM]);
        let c0 = STEP_EMBED_DIM;
        r[c0..c0 + self.chunk_len].copy_from_slice(noisy);
        r[c0 + self.chunk_len..].copy_from_slice(context);
    }
}

/// Clips, checks and applies one Adam update.
pub(crate) fn apply_update(
    net: &mut FeedForwardNet,
    adam: &mut AdamState,
    grads: &mut Gradients,
    lr: f64,
) -> Result<f64> {
    let norm = grads.clip_global_norm(GRAD_CLIP);
    adam.step_net(net, grads, lr)?;
    Ok(norm)
}

/// Aborts a run whose loss left the reals.
pub(crate) fn check_loss(step: usize, loss: f64, trace: &[f64]) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            loss,
            trace: trace.to_vec(),
        })
    }
}
