use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Adam, Checkpoint, Graph, ParamStore, Var};
use crate::bpst::Bpst;
use crate::error::{Error, Result};
use crate::motion::{BodyPartition, CorpusSample, Skeleton, TokenLayout};
use crate::tensor::Tensor;
use crate::vq::{stage1_loss, straight_through, Codebook, LossComponents, Quantization};

use super::config::Stage1Config;
use super::data::{epoch_batch, split_indices, stream_rng, STREAM_EPOCH_STAGE1, STREAM_INIT_STAGE1, STREAM_STAGE1};

/// Partition matching a skeleton's joint count.
pub fn partition_for(skeleton: &Skeleton) -> Result<BodyPartition> {
    match skeleton.joint_count() {
        9 => Ok(BodyPartition::toy()),
        22 => Ok(BodyPartition::humanml3d()),
        n => Err(Error::Layout(format!("no body partition preset for {n} joints"))),
    }
}

/// Smallest per-feature scale used by [`FeatureNorm::fit`].
pub const NORM_STD_FLOOR: f64 = 1e-2;

/// Per-feature standardization of frames. The encoder sees `(x − mean) / std`
/// and decoder outputs are mapped back with `x̂·std + mean`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNorm {
    pub mean: Tensor,
    pub std: Tensor,
}

impl FeatureNorm {
    pub fn identity(width: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[width]),
            std: Tensor::full(&[width], 1.0),
        }
    }

    /// Column statistics over every frame of `frames`, std floored at [`NORM_STD_FLOOR`].
    pub fn fit<'a>(frames: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for f in frames {
            if sum.is_empty() {
                sum = vec![0.0; f.cols()];
                sq = vec![0.0; f.cols()];
            }
            if f.cols() != sum.len() {
                return Err(Error::shape("feature_norm", f.shape(), &[sum.len()]));
            }
            for r in 0..f.rows() {
                for (c, v) in f.row(r).iter().enumerate() {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            n += f.rows();
        }
        if n == 0 {
            return Err(Error::InvalidArgument("feature statistics of no frames".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(NORM_STD_FLOOR))
            .collect();
        Ok(Self {
            mean: Tensor::vector(mean),
            std: Tensor::vector(std),
        })
    }

    pub fn width(&self) -> usize {
        self.mean.numel()
    }

    pub fn normalize(&self, frames: &Tensor) -> Result<Tensor> {
        if frames.cols() != self.width() {
            return Err(Error::shape("normalize", frames.shape(), &[self.width()]));
        }
        let mut out = frames.clone();
        let w = self.width();
        let (m, s) = (self.mean.data(), self.std.data());
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - m[k % w]) / s[k % w];
        }
        Ok(out)
    }

    pub fn denormalize(&self, frames: &Tensor) -> Result<Tensor> {
        if frames.cols() != self.width() {
            return Err(Error::shape("denormalize", frames.shape(), &[self.width()]));
        }
        let mut out = frames.clone();
        let w = self.width();
        let (m, s) = (self.mean.data(), self.std.data());
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * s[k % w] + m[k % w];
        }
        Ok(out)
    }

    /// Graph version of [`FeatureNorm::denormalize`].
    pub fn denormalize_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let t = g.shape(x)[0];
        let scale = Tensor::from_rows(&vec![self.std.data().to_vec(); t])?;
        let scale = g.constant(scale);
        let y = g.mul(x, scale)?;
        let mean = g.constant(self.mean.clone());
        g.add_row(y, mean)
    }
}

/// Encoder, codebook and decoder.
#[derive(Debug, Clone)]
pub struct Stage1Model {
    pub cfg: Stage1Config,
    pub bpst: Bpst,
    pub params: ParamStore,
    pub book: Codebook,
    pub norm: FeatureNorm,
}

impl Stage1Model {
    pub fn init(cfg: &Stage1Config, layout: TokenLayout, skeleton: &Skeleton, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let bpst = Bpst::new(cfg.bpst(), layout, &partition_for(skeleton)?, cfg.code_dim)?;
        let mut rng = stream_rng(seed, STREAM_INIT_STAGE1, 0);
        let mut params = bpst.init(&mut rng);
        let book = Codebook::random(&cfg.vq(), &mut rng)?;
        if !cfg.ema {
            params.insert("vq.codebook", book.vectors().clone());
        }
        let norm = FeatureNorm::identity(bpst.width());
        Ok(Self {
            cfg: cfg.clone(),
            bpst,
            params,
            book,
            norm,
        })
    }

    pub fn encode(&self, frames: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = self.bpst.encode(&mut g, &self.params, &self.norm.normalize(frames)?)?;
        Ok(g.value(f).clone())
    }

    pub fn quantize(&self, frames: &Tensor) -> Result<Quantization> {
        self.book.quantize(&self.encode(frames)?)
    }

    /// Frames for a code sequence, `m·rate × width`.
    pub fn decode(&self, codes: &[usize]) -> Result<Tensor> {
        if codes.is_empty() {
            return Err(Error::DegenerateGeneration);
        }
        let z = self.book.lookup(codes)?;
        let mut g = Graph::new();
        let z = g.constant(z);
        let x = self.bpst.temporal_decode(&mut g, &self.params, z)?;
        self.norm.denormalize(g.value(x))
    }

    pub fn reconstruct(&self, frames: &Tensor) -> Result<Tensor> {
        self.decode(&self.quantize(frames)?.codes.codes)
    }

    pub fn to_checkpoint(&self, adam: Option<&Adam>, step: usize) -> Checkpoint {
        let mut tensors: BTreeMap<String, Tensor> = self.params.clone().into_map();
        tensors.extend(self.book.to_params().into_map());
        tensors.insert("norm.mean".to_string(), self.norm.mean.clone());
        tensors.insert("norm.std".to_string(), self.norm.std.clone());
        if let Some(adam) = adam {
            tensors.extend(adam_tensors(adam));
        }
        Checkpoint::new(
            tensors,
            json!({
                "stage": "stage1",
                "step": step,
                "config": self.cfg,
                "layout": self.bpst.layout,
                "joints": self.bpst.joints,
            }),
        )
    }

    /// Model, optimizer state and completed steps.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, Adam, usize)> {
        if ckpt.meta.get("stage").and_then(|v| v.as_str()) != Some("stage1") {
            return Err(Error::Format("not a stage-1 checkpoint".into()));
        }
        let cfg: Stage1Config = meta_field(ckpt, "config")?;
        let layout: TokenLayout = meta_field(ckpt, "layout")?;
        let step: usize = meta_field(ckpt, "step")?;
        let skeleton = match meta_field::<usize>(ckpt, "joints")? {
            22 => Skeleton::humanml3d(),
            _ => Skeleton::toy(),
        };
        let bpst = Bpst::new(cfg.bpst(), layout, &partition_for(&skeleton)?, cfg.code_dim)?;
        let mut params = ParamStore::from_map(ckpt.with_prefix("bpst.").into_iter().map(|(k, v)| (format!("bpst.{k}"), v)).collect());
        let vq = ParamStore::from_map(ckpt.with_prefix("vq.").into_iter().map(|(k, v)| (format!("vq.{k}"), v)).collect());
        let book = Codebook::from_params(&vq)?;
        if !cfg.ema {
            params.insert("vq.codebook", book.vectors().clone());
        }
        let norm = FeatureNorm {
            mean: ckpt.tensor("norm.mean")?.clone(),
            std: ckpt.tensor("norm.std")?.clone(),
        };
        if norm.width() != bpst.width() || norm.std.numel() != bpst.width() {
            return Err(Error::Format("feature statistics do not match the layout width".into()));
        }
        let adam = adam_from(ckpt, cfg.lr)?;
        Ok((
            Self {
                cfg,
                bpst,
                params,
                book,
                norm,
            },
            adam,
            step,
        ))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_checkpoint(&Checkpoint::load(path)?)?.0)
    }
}

pub(crate) fn meta_field<T: serde::de::DeserializeOwned>(ckpt: &Checkpoint, key: &str) -> Result<T> {
    let v = ckpt
        .meta
        .get(key)
        .ok_or_else(|| Error::Format(format!("checkpoint meta lacks `{key}`")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Format(format!("checkpoint meta `{key}`: {e}")))
}

pub(crate) fn adam_tensors(adam: &Adam) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    for (k, v) in &adam.first_moment {
        out.insert(format!("adam.m.{k}"), v.clone());
    }
    for (k, v) in &adam.second_moment {
        out.insert(format!("adam.v.{k}"), v.clone());
    }
    out.insert("adam.step".to_string(), Tensor::scalar(adam.step as f64));
    out
}

pub(crate) fn adam_from(ckpt: &Checkpoint, lr: f64) -> Result<Adam> {
    let mut adam = Adam::new(lr);
    adam.first_moment = ckpt.with_prefix("adam.m.");
    adam.second_moment = ckpt.with_prefix("adam.v.");
    adam.step = ckpt.tensors.get("adam.step").map_or(0, |t| t.item() as u64);
    Ok(adam)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Record {
    pub step: usize,
    pub total: f64,
    pub rec: f64,
    pub vel: f64,
    pub emb: f64,
    pub com: f64,
    pub resets: usize,
}

/// Stage-1 optimization state; every step draws from its own RNG stream so a
/// resumed run repeats the uninterrupted one exactly.
#[derive(Debug, Clone)]
pub struct Stage1Trainer {
    pub model: Stage1Model,
    pub adam: Adam,
    pub step: usize,
    pub seed: u64,
    pub curve: Vec<Stage1Record>,
    train: Vec<usize>,
}

impl Stage1Trainer {
    /// Trains on the hash-split training part of `samples`.
    pub fn new(cfg: &Stage1Config, samples: &[CorpusSample], seed: u64) -> Result<Self> {
        let train = split_indices(samples.len()).0;
        Self::with_indices(cfg, samples, train, seed)
    }

    pub fn with_indices(cfg: &Stage1Config, samples: &[CorpusSample], train: Vec<usize>, seed: u64) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::config("corpus", "no samples to train on"))?;
        if train.is_empty() {
            return Err(Error::config("corpus", "training split is empty"));
        }
        let mut model = Stage1Model::init(cfg, first.motion.layout(), first.motion.skeleton(), seed)?;
        model.norm = FeatureNorm::fit(train.iter().map(|&i| samples[i].motion.frames()))?;
        Ok(Self {
            adam: Adam::new(cfg.lr),
            model,
            step: 0,
            seed,
            curve: Vec::new(),
            train,
        })
    }

    /// Continues from a checkpoint written by [`Stage1Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, samples: &[CorpusSample]) -> Result<Self> {
        let (model, adam, step) = Stage1Model::from_checkpoint(ckpt)?;
        let seed: u64 = meta_field(ckpt, "seed")?;
        let train = split_indices(samples.len()).0;
        Ok(Self {
            model,
            adam,
            step,
            seed,
            curve: Vec::new(),
            train,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.model.to_checkpoint(Some(&self.adam), self.step);
        ckpt.meta["seed"] = json!(self.seed);
        ckpt
    }

    pub fn train_until(&mut self, samples: &[CorpusSample], steps: usize) -> Result<()> {
        while self.step < steps {
            let rec = self.train_step(samples)?;
            if rec.step % 100 == 0 || rec.step == steps {
                log::info!(
                    "stage1 step {} total {:.4} rec {:.4} vel {:.4} com {:.4} resets {}",
                    rec.step,
                    rec.total,
                    rec.rec,
                    rec.vel,
                    rec.com,
                    rec.resets
                );
            }
        }
        Ok(())
    }

    pub fn train_step(&mut self, samples: &[CorpusSample]) -> Result<Stage1Record> {
        let cfg = &self.model.cfg;
        let mut rng = stream_rng(self.seed, STREAM_STAGE1, self.step as u64);
        let batch = epoch_batch(
            &self.train,
            self.seed,
            STREAM_EPOCH_STAGE1,
            self.step * cfg.batch_size,
            cfg.batch_size,
        );
        let scale = 1.0 / batch.len() as f64;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut comps = LossComponents::default();
        let mut feats: Vec<Vec<f64>> = Vec::new();
        let mut assign = Vec::new();
        let weights = cfg.weights();

        for &i in &batch {
            let frames = samples[i].motion.frames();
            let model = &self.model;
            let mut g = Graph::new();
            let f = model.bpst.encode(&mut g, &model.params, &model.norm.normalize(frames)?)?;
            let q = model.book.quantize(g.value(f))?;
            feats.extend(g.value(f).to_rows());
            assign.extend_from_slice(&q.codes.codes);
            let quantized = if cfg.ema {
                g.constant(q.quantized.clone())
            } else {
                let table = g.param(&model.params, "vq.codebook")?;
                g.gather(table, &q.codes.codes)?
            };
            let z = straight_through(&mut g, f, &q.quantized)?;
            let recon = model.bpst.temporal_decode(&mut g, &model.params, z)?;
            let recon = model.norm.denormalize_graph(&mut g, recon)?;
            let loss = stage1_loss(&mut g, frames, recon, f, quantized, weights)?;
            let c = loss.components(&g);
            comps.rec += c.rec * scale;
            comps.vel += c.vel * scale;
            comps.emb += c.emb * scale;
            comps.com += c.com * scale;
            let scaled = g.scale(loss.total, scale);
            for (name, gr) in g.backward(scaled)?.into_param_grads() {
                match grads.get_mut(&name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gr.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        grads.insert(name, gr);
                    }
                }
            }
        }

        let total = comps.total(weights);
        if !total.is_finite() {
            return Err(Error::NanLoss(self.step));
        }
        let feats = Tensor::from_rows(&feats)?;
        let ema = cfg.ema;
        let reset = cfg.reset;
        if ema {
            self.model.book.ema_update(&feats, &assign)?;
        } else {
            self.model.book.record_usage(&assign);
        }
        let resets = if reset { self.model.book.reset_dead(&feats, &mut rng)? } else { 0 };
        self.adam.lr = self.model.cfg.lr_at(self.step);
        self.adam.step(&mut self.model.params, &grads)?;
        if !ema {
            let v = self.model.params.require("vq.codebook")?.clone();
            self.model.book.set_vectors(v)?;
        }
        self.step += 1;
        let rec = Stage1Record {
            step: self.step,
            total,
            rec: comps.rec,
            vel: comps.vel,
            emb: comps.emb,
            com: comps.com,
            resets,
        };
        self.curve.push(rec);
        Ok(rec)
    }
}

pub fn write_curve<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}
