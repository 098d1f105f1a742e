use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sampling {
    Greedy,
    Temperature { tau: f64 },
    TopK { k: usize, tau: f64 },
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling::Temperature { tau: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlaConfig {
    pub d_model: usize,
    pub heads: usize,
    pub local_layers: usize,
    pub global_layers: usize,
    /// Generation cap; longer training sequences are skipped.
    pub max_codes: usize,
    /// Codebook size K; the vocabulary adds END at index K.
    pub codes: usize,
    /// Width of word and sentence embeddings.
    pub d_text: usize,
    /// Feed raw code embeddings to the global stage.
    pub ablate_local: bool,
    /// Add the projected sentence embedding to every position instead of
    /// running conditional self-attention.
    pub ablate_global: bool,
    pub sampling: Sampling,
}

impl Default for GlaConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 4,
            local_layers: 1,
            global_layers: 2,
            max_codes: 16,
            codes: 32,
            d_text: 64,
            ablate_local: false,
            ablate_global: false,
            sampling: Sampling::default(),
        }
    }
}

impl GlaConfig {
    pub fn vocab(&self) -> usize {
        self.codes + 1
    }

    pub fn end_token(&self) -> usize {
        self.codes
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(
                "stage2.heads",
                format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads),
            ));
        }
        if self.max_codes == 0 {
            return Err(Error::config("stage2.max_codes", "must be at least 1"));
        }
        if self.codes < 2 {
            return Err(Error::config("stage2.codes", "need at least 2 codes"));
        }
        if self.d_text == 0 {
            return Err(Error::config("stage2.d_text", "must be positive"));
        }
        match self.sampling {
            Sampling::Temperature { tau } | Sampling::TopK { tau, .. } if !(tau > 0.0 && tau.is_finite()) => {
                Err(Error::config("stage2.sampling.tau", format!("{tau} must be positive")))
            }
            Sampling::TopK { k: 0, .. } => Err(Error::config("stage2.sampling.k", "must be at least 1")),
            _ => Ok(()),
        }
    }
}
