use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bpst::BpstConfig;
use crate::error::{Error, Result};
use crate::gla::{GlaConfig, Sampling};
use crate::motion::CorpusConfig;
use crate::vq::{Stage1Weights, VqConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub d_model: usize,
    pub heads: usize,
    pub spatial_layers: usize,
    pub tcn_channels: Vec<usize>,
    pub downsample_rate: usize,
    pub ablate_bpst: bool,
    pub codes: usize,
    pub code_dim: usize,
    pub decay: f64,
    pub reset_threshold: f64,
    pub ema: bool,
    pub reset: bool,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    /// Step from which the learning rate is multiplied by `lr_decay`; 0 keeps it constant.
    pub lr_decay_step: usize,
    pub lr_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        let b = BpstConfig::default();
        let v = VqConfig::default();
        let w = Stage1Weights::default();
        Self {
            d_model: b.d_model,
            heads: b.heads,
            spatial_layers: b.spatial_layers,
            tcn_channels: b.tcn_channels,
            downsample_rate: b.downsample_rate,
            ablate_bpst: b.ablate_bpst,
            codes: v.codes,
            code_dim: v.code_dim,
            decay: v.decay,
            reset_threshold: v.reset_threshold,
            ema: v.ema,
            reset: v.reset,
            alpha: w.alpha,
            beta: w.beta,
            lr: 2e-3,
            lr_decay_step: 1000,
            lr_decay: 0.1,
            steps: 1500,
            batch_size: 4,
        }
    }
}

impl Stage1Config {
    pub fn bpst(&self) -> BpstConfig {
        BpstConfig {
            d_model: self.d_model,
            heads: self.heads,
            spatial_layers: self.spatial_layers,
            tcn_channels: self.tcn_channels.clone(),
            downsample_rate: self.downsample_rate,
            ablate_bpst: self.ablate_bpst,
        }
    }

    pub fn vq(&self) -> VqConfig {
        VqConfig {
            codes: self.codes,
            code_dim: self.code_dim,
            decay: self.decay,
            reset_threshold: self.reset_threshold,
            ema: self.ema,
            reset: self.reset,
        }
    }

    pub fn weights(&self) -> Stage1Weights {
        Stage1Weights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    /// Learning rate for the update made at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.lr_decay_step > 0 && step >= self.lr_decay_step {
            self.lr * self.lr_decay
        } else {
            self.lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bpst().validate()?;
        self.vq().validate()?;
        self.weights().validate()?;
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("stage1.lr_decay", format!("{} is not in (0, 1]", self.lr_decay)));
        }
        check_training("stage1", self.lr, self.batch_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub d_model: usize,
    pub heads: usize,
    pub local_layers: usize,
    pub global_layers: usize,
    pub max_codes: usize,
    pub d_text: usize,
    pub ablate_local: bool,
    pub ablate_global: bool,
    pub sampling: Sampling,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        let g = GlaConfig::default();
        Self {
            d_model: g.d_model,
            heads: g.heads,
            local_layers: g.local_layers,
            global_layers: g.global_layers,
            max_codes: g.max_codes,
            d_text: g.d_text,
            ablate_local: g.ablate_local,
            ablate_global: g.ablate_global,
            sampling: g.sampling,
            lr: 2e-3,
            steps: 200,
            batch_size: 8,
        }
    }
}

impl Stage2Config {
    /// Generator configuration for a codebook of `codes` entries.
    pub fn gla(&self, codes: usize) -> GlaConfig {
        GlaConfig {
            d_model: self.d_model,
            heads: self.heads,
            local_layers: self.local_layers,
            global_layers: self.global_layers,
            max_codes: self.max_codes,
            codes,
            d_text: self.d_text,
            ablate_local: self.ablate_local,
            ablate_global: self.ablate_global,
            sampling: self.sampling,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gla(2).validate()?;
        check_training("stage2", self.lr, self.batch_size)
    }
}

fn check_training(section: &str, lr: f64, batch: usize) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::config(format!("{section}.lr"), format!("{lr} must be positive")));
    }
    if batch == 0 {
        return Err(Error::config(format!("{section}.batch_size"), "must be at least 1"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// Names accepted by `--ablate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Bpst,
    Local,
    Global,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Bpst, Ablation::Local, Ablation::Global];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Bpst => "bpst",
            Ablation::Local => "local",
            Ablation::Global => "global",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config("ablate", format!("unknown ablation `{s}` (bpst, local, global)")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config {
            key: e.span().map(|s| key_at(text, s.start)).unwrap_or_else(|| "config".into()),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpus.downsample_rate != self.stage1.downsample_rate {
            return Err(Error::config(
                "corpus.downsample_rate",
                format!(
                    "{} differs from stage1.downsample_rate {}",
                    self.corpus.downsample_rate, self.stage1.downsample_rate
                ),
            ));
        }
        self.stage1.validate()?;
        self.stage2.validate()
    }

    pub fn with_ablation(mut self, a: Ablation) -> Self {
        match a {
            Ablation::Bpst => self.stage1.ablate_bpst = true,
            Ablation::Local => self.stage2.ablate_local = true,
            Ablation::Global => self.stage2.ablate_global = true,
        }
        self
    }

    pub fn out_dir(&self) -> &Path {
        &self.paths.out_dir
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.paths.out_dir.join("corpus")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.corpus_dir().join("manifest.jsonl")
    }

    pub fn stage1_path(&self) -> PathBuf {
        self.paths.out_dir.join("stage1.ckpt.json")
    }

    pub fn stage2_path(&self) -> PathBuf {
        self.paths.out_dir.join("stage2.ckpt.json")
    }

    pub fn stage1_curve_path(&self) -> PathBuf {
        self.paths.out_dir.join("stage1_loss.csv")
    }

    pub fn stage2_curve_path(&self) -> PathBuf {
        self.paths.out_dir.join("stage2_loss.csv")
    }

    pub fn eval_path(&self) -> PathBuf {
        self.paths.out_dir.join("eval.json")
    }
}

/// Dotted key of the assignment at byte `pos`, e.g. `stage2.max_codes`.
fn key_at(text: &str, pos: usize) -> String {
    let before = &text[..pos.min(text.len())];
    let line_start = before.rfind('\n').map_or(0, |i| i + 1);
    let line = text[line_start..].lines().next().unwrap_or("");
    let key = line.split('=').next().unwrap_or("").trim();
    if let Some(header) = key.strip_prefix('[').and_then(|k| k.strip_suffix(']')) {
        return header.trim().to_string();
    }
    let section = before[..line_start]
        .lines()
        .rev()
        .find_map(|l| l.trim().strip_prefix('[').and_then(|l| l.strip_suffix(']')));
    match (section, key.is_empty()) {
        (Some(sec), false) => format!("{sec}.{key}"),
        (Some(sec), true) => sec.to_string(),
        (None, false) => key.to_string(),
        (None, true) => "config".to_string(),
    }
}
