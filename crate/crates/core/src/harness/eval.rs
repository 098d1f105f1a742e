use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{frame_velocity, CorpusSample, FILLER_WORDS, MOTION_CLASSES};
use crate::text::split_words;
use crate::vq::codebook_perplexity;

use super::data::{split_indices, CentroidClassifier};
use super::stage1::Stage1Model;
use super::stage2::Stage2Model;

pub const EVAL_VERSION: &str = "attmotion-eval-v1";

/// Minimum number of generations scored for conditioning and saliency.
pub const EVAL_GENERATIONS: usize = 50;

/// Ablated minus full-model values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationDelta {
    pub recon_l1: f64,
    pub stage2_loss: f64,
    pub toy_conditioning_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: String,
    pub held_out: usize,
    pub generations: usize,
    pub recon_l1: f64,
    pub vel_l1: f64,
    pub commit_error: f64,
    pub codebook_perplexity: f64,
    pub codebook_usage_fraction: f64,
    pub stage2_loss: f64,
    pub toy_conditioning_accuracy: f64,
    /// Mean cross-attention weight on class key words, `None` without local attention.
    pub key_word_attention: Option<f64>,
    pub filler_word_attention: Option<f64>,
    #[serde(default)]
    pub ablation_deltas: BTreeMap<String, AblationDelta>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            context: path.display().to_string(),
            message: e.to_string(),
        })?;
        if r.version != EVAL_VERSION {
            return Err(Error::Format(format!("unsupported eval report version `{}`", r.version)));
        }
        Ok(r)
    }

    pub fn delta_from(&self, full: &EvalReport) -> AblationDelta {
        AblationDelta {
            recon_l1: self.recon_l1 - full.recon_l1,
            stage2_loss: self.stage2_loss - full.stage2_loss,
            toy_conditioning_accuracy: self.toy_conditioning_accuracy - full.toy_conditioning_accuracy,
        }
    }

    fn check_finite(&self) -> Result<()> {
        let vals = [
            self.recon_l1,
            self.vel_l1,
            self.commit_error,
            self.codebook_perplexity,
            self.codebook_usage_fraction,
            self.stage2_loss,
            self.toy_conditioning_accuracy,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("eval produced a non-finite metric".into()));
        }
        Ok(())
    }
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Metrics over the hash-held-out split. Generation `i` uses its own stream of `seed`.
pub fn evaluate(stage1: &Stage1Model, stage2: &Stage2Model, samples: &[CorpusSample], seed: u64) -> Result<EvalReport> {
    let (train, held) = split_indices(samples.len());
    if held.is_empty() {
        return Err(Error::config("corpus", "held-out split is empty"));
    }
    let k = stage1.book.k();
    let mut hist = vec![0u64; k];
    let (mut rec, mut vel, mut com) = (0.0, 0.0, 0.0);
    let (mut s2_loss, mut s2_count) = (0.0, 0usize);
    for &i in &held {
        let frames = samples[i].motion.frames();
        let q = stage1.quantize(frames)?;
        for &c in &q.codes.codes {
            hist[c] += 1;
        }
        com += q.sq_distances.iter().sum::<f64>() / (q.sq_distances.len() * stage1.book.dim()) as f64;
        let recon = stage1.decode(&q.codes.codes)?;
        rec += mean_abs_diff(recon.data(), frames.data());
        vel += mean_abs_diff(frame_velocity(&recon)?.data(), frame_velocity(frames)?.data());
        if q.codes.len() <= stage2.gla.cfg.max_codes {
            s2_loss += stage2.loss(&stage2.tokenize(&samples[i].text.sentence)?, &q.codes)?;
            s2_count += 1;
        }
    }
    let n = held.len() as f64;

    let n_classes = samples.iter().map(|s| s.class + 1).max().unwrap_or(0);
    let train_refs: Vec<&CorpusSample> = train.iter().map(|&i| &samples[i]).collect();
    let classifier = CentroidClassifier::fit(&train_refs, n_classes)?;
    let generations = EVAL_GENERATIONS.max(held.len());
    let mut correct = 0usize;
    let (mut key_sum, mut key_n, mut fill_sum, mut fill_n) = (0.0, 0usize, 0.0, 0usize);
    for g in 0..generations {
        let s = &samples[held[g % held.len()]];
        let gen = stage2.generate(&s.text.sentence, seed, g as u64)?;
        if gen.degenerate {
            continue;
        }
        let motion = stage1.decode(&gen.codes.codes)?;
        if classifier.predict(&motion) == s.class {
            correct += 1;
        }
        if let Some(w) = gen.attention.last_layer_mean() {
            let keys = MOTION_CLASSES.get(s.class).map_or(&[][..], |c| c.key_words);
            for (j, word) in split_words(&s.text.sentence).iter().enumerate() {
                let mass = (0..w.rows()).map(|r| w.row(r)[j]).sum::<f64>() / w.rows() as f64;
                if keys.contains(&word.as_str()) {
                    key_sum += mass;
                    key_n += 1;
                } else if FILLER_WORDS.contains(&word.as_str()) {
                    fill_sum += mass;
                    fill_n += 1;
                }
            }
        }
    }

    let report = EvalReport {
        version: EVAL_VERSION.to_string(),
        held_out: held.len(),
        generations,
        recon_l1: rec / n,
        vel_l1: vel / n,
        commit_error: com / n,
        codebook_perplexity: codebook_perplexity(&hist)?,
        codebook_usage_fraction: hist.iter().filter(|&&c| c > 0).count() as f64 / k as f64,
        stage2_loss: if s2_count > 0 { s2_loss / s2_count as f64 } else { f64::NAN },
        toy_conditioning_accuracy: correct as f64 / generations as f64,
        key_word_attention: (key_n > 0).then(|| key_sum / key_n as f64),
        filler_word_attention: (fill_n > 0).then(|| fill_sum / fill_n as f64),
        ablation_deltas: BTreeMap::new(),
    };
    report.check_finite()?;
    Ok(report)
}
