//! Reverse-mode differentiation over dense `f64` tensors.

mod params;
mod tape;
mod tensor;

use serde::{Deserialize, Serialize};

pub use params::{ParamId, ParamStore};
pub use tape::{BatchStats, CustomOp, Gradients, Tape, Var, MASK_SENTINEL};
pub use tensor::{matmul_raw, Tensor};

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnRunning {
    pub fn new(features: usize) -> Self {
        BnRunning {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }

    pub fn features(&self) -> usize {
        self.mean.len()
    }

    pub fn update(&mut self, stats: &BatchStats) {
        for (m, s) in self.mean.iter_mut().zip(&stats.mean) {
            *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * s;
        }
        for (v, s) in self.var.iter_mut().zip(&stats.var) {
            *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * s;
        }
    }
}

/// Batch norm in either mode. Training mode returns the batch statistics so the
/// caller decides when to fold them into `running`.
pub fn batch_norm(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    running: &BnRunning,
    training: bool,
) -> Result<(Var, Option<BatchStats>)> {
    if tape.value(x).cols() != running.features() {
        return Err(Error::dim(
            "batch_norm",
            format!(
                "{} features, running stats for {}",
                tape.value(x).cols(),
                running.features()
            ),
        ));
    }
    if training {
        let (v, stats) = tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
        Ok((v, Some(stats)))
    } else {
        let v = tape.batch_norm_eval(x, gamma, beta, &running.mean, &running.var, BN_EPS)?;
        Ok((v, None))
    }
}
