use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BpstConfig {
    pub d_model: usize,
    pub heads: usize,
    pub spatial_layers: usize,
    /// Channel width after each stride-2 temporal block.
    pub tcn_channels: Vec<usize>,
    pub downsample_rate: usize,
    /// Replace the spatial transformer with one linear map of the flat frame.
    pub ablate_bpst: bool,
}

impl Default for BpstConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 4,
            spatial_layers: 1,
            tcn_channels: vec![32, 32],
            downsample_rate: 4,
            ablate_bpst: false,
        }
    }
}

impl BpstConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(
                "stage1.heads",
                format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads),
            ));
        }
        if self.tcn_channels.is_empty() || self.tcn_channels.contains(&0) {
            return Err(Error::config("stage1.tcn_channels", "need at least one non-zero width"));
        }
        let product = 1usize << self.tcn_channels.len();
        if self.downsample_rate != product {
            return Err(Error::config(
                "stage1.downsample_rate",
                format!(
                    "{} stride-2 blocks give rate {product}, not {}",
                    self.tcn_channels.len(),
                    self.downsample_rate
                ),
            ));
        }
        Ok(())
    }
}
