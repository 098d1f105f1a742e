use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Code-to-word attention weights: `layers[l][h]` is `m × N`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub layers: Vec<Vec<Tensor>>,
}

impl AttentionRecord {
    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Last layer averaged over heads.
    pub fn last_layer_mean(&self) -> Option<Tensor> {
        let heads = self.layers.last()?;
        let first = heads.first()?;
        let mut out = Tensor::zeros(first.shape());
        for h in heads {
            for (o, v) in out.data_mut().iter_mut().zip(h.data()) {
                *o += v / heads.len() as f64;
            }
        }
        Some(out)
    }
}

/// Heatmap CSV: header `step,<word tokens…>`, one row of weights per code step.
pub fn dump_attention(record: &AttentionRecord, tokens: &[String], path: &Path) -> Result<()> {
    let weights = record
        .last_layer_mean()
        .ok_or_else(|| Error::InvalidArgument("attention record is empty".into()))?;
    if weights.cols() != tokens.len() {
        return Err(Error::shape("dump_attention", weights.shape(), &[tokens.len()]));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["step".to_string()];
    header.extend(tokens.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for step in 0..weights.rows() {
        let mut row = vec![step.to_string()];
        row.extend(weights.row(step).iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}
