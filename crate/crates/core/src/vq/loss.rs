use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::motion::frame_velocity;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Weights {
    /// Weight of the velocity term.
    pub alpha: f64,
    /// Weight of the commitment term.
    pub beta: f64,
}

impl Default for Stage1Weights {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 0.02 }
    }
}

impl Stage1Weights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("stage1.alpha", self.alpha), ("stage1.beta", self.beta)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(key, format!("weight {v} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub rec: f64,
    pub vel: f64,
    pub emb: f64,
    pub com: f64,
}

impl LossComponents {
    pub fn total(&self, w: Stage1Weights) -> f64 {
        self.rec + w.alpha * self.vel + self.emb + w.beta * self.com
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Stage1Loss {
    pub total: Var,
    pub rec: Var,
    pub vel: Var,
    pub emb: Var,
    pub com: Var,
}

impl Stage1Loss {
    pub fn components(&self, g: &Graph) -> LossComponents {
        LossComponents {
            rec: g.value(self.rec).item(),
            vel: g.value(self.vel).item(),
            emb: g.value(self.emb).item(),
            com: g.value(self.com).item(),
        }
    }
}

/// Decoder input whose value is `quantized` and whose gradient flows to `features`.
pub fn straight_through(g: &mut Graph, features: Var, quantized: &Tensor) -> Result<Var> {
    g.straight_through(features, quantized)
}

/// `L1(X, X̂) + α·L1(V, V̂) + mse(sg[F], q) + β·mse(F, sg[q])`.
///
/// `quantized` is the codebook rows selected for `features`, as a graph node so a
/// gradient-trained codebook receives the embedding gradient. Pass a constant
/// codebook for EMA training; the embedding term then carries no gradient.
pub fn stage1_loss(
    g: &mut Graph,
    target: &Tensor,
    recon: Var,
    features: Var,
    quantized: Var,
    w: Stage1Weights,
) -> Result<Stage1Loss> {
    w.validate()?;
    let t = target.rows();
    if t < 2 {
        return Err(Error::SequenceTooShort {
            what: "stage-1 target",
            len: t,
            min: 2,
        });
    }
    let x = g.constant(target.clone());
    let rec = g.l1_loss(recon, x)?;

    let v = g.constant(frame_velocity(target)?);
    let head = g.slice_rows(recon, 1, t)?;
    let tail = g.slice_rows(recon, 0, t - 1)?;
    let v_hat = g.sub(head, tail)?;
    let vel = g.l1_loss(v_hat, v)?;

    let f_sg = g.detach(features);
    let emb = g.mse(f_sg, quantized)?;
    let q_sg = g.detach(quantized);
    let com = g.mse(features, q_sg)?;

    let a = g.scale(vel, w.alpha);
    let b = g.scale(com, w.beta);
    let total = g.add(rec, a)?;
    let total = g.add(total, emb)?;
    let total = g.add(total, b)?;
    Ok(Stage1Loss {
        total,
        rec,
        vel,
        emb,
        com,
    })
}
