use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Adam, Checkpoint, Graph, ParamStore};
use crate::error::{Error, Result};
use crate::gla::{Generation, Gla, TextSource};
use crate::motion::CorpusSample;
use crate::tensor::Tensor;
use crate::text::{init_toy_encoder, Vocabulary};
use crate::vq::CodeSequence;

use super::config::Stage2Config;
use super::data::{split_indices, stream_rng, STREAM_GENERATE, STREAM_INIT_STAGE2, STREAM_STAGE2};
use super::stage1::{adam_from, adam_tensors, meta_field, Stage1Model};

/// One teacher-forcing pair: token ids and the frozen Stage-1 codes of its motion.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Example {
    pub sample: usize,
    pub class: usize,
    pub ids: Vec<usize>,
    pub codes: CodeSequence,
}

/// Quantizes each listed sample with the frozen Stage-1 model. Samples with
/// more than `max_codes` codes are skipped.
pub fn encode_examples(
    stage1: &Stage1Model,
    samples: &[CorpusSample],
    indices: &[usize],
    vocab: &Vocabulary,
    max_codes: usize,
) -> Result<Vec<Stage2Example>> {
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = &samples[i];
        let codes = stage1.quantize(s.motion.frames())?.codes;
        if codes.len() > max_codes {
            log::warn!("sample {i}: {} codes exceed max_codes {max_codes}, skipped", codes.len());
            continue;
        }
        out.push(Stage2Example {
            sample: i,
            class: s.class,
            ids: vocab.tokenize(&s.text.sentence)?,
            codes,
        });
    }
    Ok(out)
}

/// Generator, text encoder and vocabulary.
#[derive(Debug, Clone)]
pub struct Stage2Model {
    pub cfg: Stage2Config,
    pub gla: Gla,
    pub params: ParamStore,
    pub vocab: Vocabulary,
}

impl Stage2Model {
    pub fn init(cfg: &Stage2Config, codes: usize, vocab: Vocabulary, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let gla = Gla::new(cfg.gla(codes))?;
        let mut rng = stream_rng(seed, STREAM_INIT_STAGE2, 0);
        let mut params = gla.init(&mut rng);
        init_toy_encoder(&mut params, vocab.len(), cfg.d_text, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            gla,
            params,
            vocab,
        })
    }

    pub fn codes(&self) -> usize {
        self.gla.cfg.codes
    }

    pub fn tokenize(&self, sentence: &str) -> Result<Vec<usize>> {
        self.vocab.tokenize(sentence)
    }

    pub fn loss(&self, ids: &[usize], codes: &CodeSequence) -> Result<f64> {
        let mut g = Graph::new();
        let l = self.gla.next_code_loss(&mut g, &self.params, codes, TextSource::Toy(ids))?;
        Ok(g.value(l).item())
    }

    /// Generation `index` for a sentence, on its own RNG stream.
    pub fn generate(&self, sentence: &str, seed: u64, index: u64) -> Result<Generation> {
        let ids = self.tokenize(sentence)?;
        let mut rng = stream_rng(seed, STREAM_GENERATE, index);
        self.gla.generate_with(&self.params, TextSource::Toy(&ids), &mut rng)
    }

    pub fn to_checkpoint(&self, adam: Option<&Adam>, step: usize) -> Checkpoint {
        let mut tensors: BTreeMap<String, Tensor> = self.params.clone().into_map();
        if let Some(adam) = adam {
            tensors.extend(adam_tensors(adam));
        }
        Checkpoint::new(
            tensors,
            json!({
                "stage": "stage2",
                "step": step,
                "config": self.cfg,
                "codes": self.codes(),
                "vocab": self.vocab,
            }),
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, Adam, usize)> {
        if ckpt.meta.get("stage").and_then(|v| v.as_str()) != Some("stage2") {
            return Err(Error::Format("not a stage-2 checkpoint".into()));
        }
        let cfg: Stage2Config = meta_field(ckpt, "config")?;
        let codes: usize = meta_field(ckpt, "codes")?;
        let vocab: Vocabulary = meta_field(ckpt, "vocab")?;
        let step: usize = meta_field(ckpt, "step")?;
        let gla = Gla::new(cfg.gla(codes))?;
        let params = ParamStore::from_map(
            ckpt.tensors
                .iter()
                .filter(|(k, _)| k.starts_with("gla.") || k.starts_with("text."))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        );
        let adam = adam_from(ckpt, cfg.lr)?;
        Ok((
            Self {
                cfg,
                gla,
                params,
                vocab,
            },
            adam,
            step,
        ))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_checkpoint(&Checkpoint::load(path)?)?.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Record {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct Stage2Trainer {
    pub model: Stage2Model,
    pub adam: Adam,
    pub step: usize,
    pub seed: u64,
    pub curve: Vec<Stage2Record>,
    pub examples: Vec<Stage2Example>,
}

impl Stage2Trainer {
    /// Vocabulary and examples come from the training split of `samples`.
    pub fn new(cfg: &Stage2Config, stage1: &Stage1Model, samples: &[CorpusSample], seed: u64) -> Result<Self> {
        let train = split_indices(samples.len()).0;
        let vocab = Vocabulary::build(train.iter().map(|&i| samples[i].text.sentence.as_str()));
        let examples = encode_examples(stage1, samples, &train, &vocab, cfg.max_codes)?;
        Self::with_examples(cfg, stage1.book.k(), vocab, examples, seed)
    }

    pub fn with_examples(
        cfg: &Stage2Config,
        codes: usize,
        vocab: Vocabulary,
        examples: Vec<Stage2Example>,
        seed: u64,
    ) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::config("corpus", "no usable stage-2 training examples"));
        }
        let model = Stage2Model::init(cfg, codes, vocab, seed)?;
        Ok(Self {
            adam: Adam::new(cfg.lr),
            model,
            step: 0,
            seed,
            curve: Vec::new(),
            examples,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.model.to_checkpoint(Some(&self.adam), self.step)
    }

    pub fn train_until(&mut self, steps: usize) -> Result<()> {
        while self.step < steps {
            let rec = self.train_step()?;
            if rec.step % 100 == 0 || rec.step == steps {
                log::info!("stage2 step {} loss {:.4}", rec.step, rec.loss);
            }
        }
        Ok(())
    }

    pub fn train_step(&mut self) -> Result<Stage2Record> {
        let mut rng = stream_rng(self.seed, STREAM_STAGE2, self.step as u64);
        let n = self.examples.len();
        let batch: Vec<usize> = (0..self.model.cfg.batch_size).map(|_| rng.gen_range(0..n)).collect();
        let scale = 1.0 / batch.len() as f64;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut loss = 0.0;
        for &b in &batch {
            let ex = &self.examples[b];
            let mut g = Graph::new();
            let l = self
                .model
                .gla
                .next_code_loss(&mut g, &self.model.params, &ex.codes, TextSource::Toy(&ex.ids))?;
            loss += g.value(l).item() * scale;
            let scaled = g.scale(l, scale);
            for (name, gr) in g.backward(scaled)?.into_param_grads() {
                match grads.get_mut(&name) {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(gr.data()) {
                            *a += v;
                        }
                    }
                    None => {
                        grads.insert(name, gr);
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::NanLoss(self.step));
        }
        self.adam.step(&mut self.model.params, &grads)?;
        self.step += 1;
        let rec = Stage2Record { step: self.step, loss };
        self.curve.push(rec);
        Ok(rec)
    }
}
