use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor on cluster sizes when dividing the EMA sums.
const EMA_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqConfig {
    pub codes: usize,
    pub code_dim: usize,
    pub decay: f64,
    pub reset_threshold: f64,
    /// Update codes by moving averages instead of gradients.
    pub ema: bool,
    pub reset: bool,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            codes: 32,
            code_dim: 16,
            decay: 0.99,
            reset_threshold: 1.0,
            ema: true,
            reset: true,
        }
    }
}

impl VqConfig {
    /// Full-size codebook; not exercised at toy scale.
    pub fn reference_scale() -> Self {
        Self {
            codes: 512,
            code_dim: 512,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.codes < 2 {
            return Err(Error::config("stage1.codes", "need at least 2 codes"));
        }
        if self.code_dim == 0 {
            return Err(Error::config("stage1.code_dim", "must be positive"));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::config("stage1.decay", format!("{} is not in (0, 1)", self.decay)));
        }
        if !(self.reset_threshold >= 0.0) {
            return Err(Error::config("stage1.reset_threshold", "must be non-negative"));
        }
        Ok(())
    }
}

/// Code indices in `[0, K)`; the END sentinel `K` is only added for training targets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSequence {
    pub codes: Vec<usize>,
}

impl CodeSequence {
    pub fn new(codes: Vec<usize>, k: usize) -> Result<Self> {
        if let Some(&bad) = codes.iter().find(|&&c| c >= k) {
            return Err(Error::Index { index: bad, bound: k });
        }
        Ok(Self { codes })
    }

    /// Accepts a sequence that may end with the END sentinel `k` and strips it.
    pub fn from_tokens(tokens: &[usize], k: usize) -> Result<Self> {
        let body = match tokens.split_last() {
            Some((&last, body)) if last == k => body,
            _ => tokens,
        };
        if let Some(&bad) = body.iter().find(|&&c| c >= k) {
            return Err(Error::Index { index: bad, bound: k });
        }
        Ok(Self { codes: body.to_vec() })
    }

    /// Codes followed by END.
    pub fn with_end(&self, k: usize) -> Vec<usize> {
        let mut v = self.codes.clone();
        v.push(k);
        v
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Quantization {
    pub codes: CodeSequence,
    /// Rows are exact copies of the chosen code vectors.
    pub quantized: Tensor,
    /// Squared Euclidean distance of each row to its code.
    pub sq_distances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    vectors: Tensor,
    ema_cluster_size: Vec<f64>,
    ema_sum: Tensor,
    pub decay: f64,
    pub reset_threshold: f64,
    usage_count: Vec<u64>,
}

impl Codebook {
    /// Starts every code with cluster size 1 and sum equal to itself, so an
    /// unassigned code keeps its vector under EMA.
    pub fn new(vectors: Tensor, decay: f64, reset_threshold: f64) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.rows() < 2 {
            return Err(Error::config("stage1.codes", "codebook needs a K×D matrix with K ≥ 2"));
        }
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::config("stage1.decay", format!("{decay} is not in (0, 1)")));
        }
        if !(reset_threshold >= 0.0) {
            return Err(Error::config("stage1.reset_threshold", "must be non-negative"));
        }
        let k = vectors.rows();
        Ok(Self {
            ema_sum: vectors.clone(),
            vectors,
            ema_cluster_size: vec![1.0; k],
            decay,
            reset_threshold,
            usage_count: vec![0; k],
        })
    }

    pub fn random<R: Rng + ?Sized>(cfg: &VqConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let vectors = Tensor::randn(&[cfg.codes, cfg.code_dim], 1.0, rng);
        Self::new(vectors, cfg.decay, cfg.reset_threshold)
    }

    pub fn k(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    /// Only for gradient-trained codebooks.
    pub fn set_vectors(&mut self, vectors: Tensor) -> Result<()> {
        if vectors.shape() != self.vectors.shape() {
            return Err(Error::shape("set_vectors", vectors.shape(), self.vectors.shape()));
        }
        self.vectors = vectors;
        Ok(())
    }

    pub fn ema_cluster_size(&self) -> &[f64] {
        &self.ema_cluster_size
    }

    pub fn ema_sum(&self) -> &Tensor {
        &self.ema_sum
    }

    pub fn usage_count(&self) -> &[u64] {
        &self.usage_count
    }

    pub fn code(&self, k: usize) -> &[f64] {
        self.vectors.row(k)
    }

    /// Nearest code per row; ties go to the lowest index.
    pub fn quantize(&self, features: &Tensor) -> Result<Quantization> {
        if features.cols() != self.dim() {
            return Err(Error::shape("quantize", features.shape(), self.vectors.shape()));
        }
        let m = features.rows();
        let mut codes = Vec::with_capacity(m);
        let mut dists = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * self.dim());
        for r in 0..m {
            let f = features.row(r);
            let mut best = (0, f64::INFINITY);
            for k in 0..self.k() {
                let d = sq_distance(f, self.code(k));
                if d < best.1 {
                    best = (k, d);
                }
            }
            codes.push(best.0);
            dists.push(best.1);
            out.extend_from_slice(self.code(best.0));
        }
        Ok(Quantization {
            codes: CodeSequence { codes },
            quantized: Tensor::new(vec![m, self.dim()], out)?,
            sq_distances: dists,
        })
    }

    /// Rows of the codebook for `codes`.
    pub fn lookup(&self, codes: &[usize]) -> Result<Tensor> {
        let mut out = Vec::with_capacity(codes.len() * self.dim());
        for &c in codes {
            if c >= self.k() {
                return Err(Error::Index { index: c, bound: self.k() });
            }
            out.extend_from_slice(self.code(c));
        }
        Tensor::new(vec![codes.len(), self.dim()], out)
    }

    /// Moving-average re-estimate of each code from the rows assigned to it.
    pub fn ema_update(&mut self, features: &Tensor, assignments: &[usize]) -> Result<()> {
        if features.rows() != assignments.len() || features.cols() != self.dim() {
            return Err(Error::shape("ema_update", features.shape(), &[assignments.len(), self.dim()]));
        }
        let (k, d, lambda) = (self.k(), self.dim(), self.decay);
        let mut counts = vec![0u64; k];
        let mut sums = vec![0.0; k * d];
        for (r, &a) in assignments.iter().enumerate() {
            if a >= k {
                return Err(Error::Index { index: a, bound: k });
            }
            counts[a] += 1;
            for (s, &f) in sums[a * d..(a + 1) * d].iter_mut().zip(features.row(r)) {
                *s += f;
            }
        }
        for c in 0..k {
            self.ema_cluster_size[c] = lambda * self.ema_cluster_size[c] + (1.0 - lambda) * counts[c] as f64;
            let denom = self.ema_cluster_size[c].max(EMA_EPS);
            let s = self.ema_sum.row_mut(c);
            for (sv, &bv) in s.iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                *sv = lambda * *sv + (1.0 - lambda) * bv;
            }
            let s = self.ema_sum.row(c).to_vec();
            for (v, sv) in self.vectors.row_mut(c).iter_mut().zip(s) {
                *v = sv / denom;
            }
            self.usage_count[c] += counts[c];
        }
        Ok(())
    }

    /// Counts assignments without touching the codes.
    pub fn record_usage(&mut self, assignments: &[usize]) {
        for &a in assignments {
            if a < self.k() {
                self.usage_count[a] += 1;
            }
        }
    }

    pub fn clear_usage(&mut self) {
        self.usage_count.iter_mut().for_each(|c| *c = 0);
    }

    /// Moves every code whose cluster size fell below the threshold onto a random
    /// row of `features`. Returns how many codes moved.
    pub fn reset_dead<R: Rng + ?Sized>(&mut self, features: &Tensor, rng: &mut R) -> Result<usize> {
        if features.rows() == 0 || features.cols() != self.dim() {
            return Err(Error::shape("codebook_reset", features.shape(), self.vectors.shape()));
        }
        let mut moved = 0;
        for c in 0..self.k() {
            if self.ema_cluster_size[c] < self.reset_threshold {
                let row = features.row(rng.gen_range(0..features.rows())).to_vec();
                self.vectors.row_mut(c).copy_from_slice(&row);
                self.ema_sum.row_mut(c).copy_from_slice(&row);
                self.ema_cluster_size[c] = 1.0;
                moved += 1;
            }
        }
        Ok(moved)
    }

    /// Stores vectors, EMA statistics and usage under `vq.*`.
    pub fn to_params(&self) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("vq.codebook", self.vectors.clone());
        p.insert("vq.ema_cluster_size", Tensor::vector(self.ema_cluster_size.clone()));
        p.insert("vq.ema_sum", self.ema_sum.clone());
        p.insert(
            "vq.usage_count",
            Tensor::vector(self.usage_count.iter().map(|&c| c as f64).collect()),
        );
        p.insert("vq.decay", Tensor::scalar(self.decay));
        p.insert("vq.reset_threshold", Tensor::scalar(self.reset_threshold));
        p
    }

    pub fn from_params(p: &ParamStore) -> Result<Self> {
        let vectors = p.require("vq.codebook")?.clone();
        let mut book = Self::new(
            vectors,
            p.require("vq.decay")?.item(),
            p.require("vq.reset_threshold")?.item(),
        )?;
        let sizes = p.require("vq.ema_cluster_size")?;
        let sum = p.require("vq.ema_sum")?;
        let usage = p.require("vq.usage_count")?;
        if sizes.numel() != book.k() || sum.shape() != book.vectors.shape() || usage.numel() != book.k() {
            return Err(Error::Format("vq statistics do not match the codebook shape".into()));
        }
        book.ema_cluster_size = sizes.data().to_vec();
        book.ema_sum = sum.clone();
        book.usage_count = usage.data().iter().map(|&c| c as u64).collect();
        Ok(book)
    }
}

pub(crate) fn sq_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `exp(H)` of the empirical distribution in `histogram`.
pub fn codebook_perplexity(histogram: &[u64]) -> Result<f64> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("perplexity of an empty histogram".into()));
    }
    let entropy: f64 = histogram
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp())
}
