use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AttnMask, AttnSpec, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{ffn, init_block, init_ffn, layer_norm, linear, self_attention_block, BlockIo};
use crate::tensor::Tensor;
use crate::text::{toy_encode_graph, TextEmbedding, TextVars};
use crate::vq::CodeSequence;

use super::config::GlaConfig;
use super::record::AttentionRecord;
use super::sample::sample_from_logits;

/// Where word and sentence embeddings come from.
#[derive(Debug, Clone, Copy)]
pub enum TextSource<'a> {
    /// Token ids through the jointly trained toy encoder (`text.*`).
    Toy(&'a [usize]),
    /// Fixed embeddings loaded from a file.
    External(&'a TextEmbedding),
}

impl TextSource<'_> {
    pub fn vars(&self, g: &mut Graph, p: &ParamStore) -> Result<TextVars> {
        match *self {
            TextSource::Toy(ids) => toy_encode_graph(g, p, ids),
            TextSource::External(e) => Ok(TextVars {
                words: g.constant(e.word_embs.clone()),
                sentence: g.constant(e.sentence_emb.clone()),
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GlaForward {
    /// `(m+1) × (K+1)`; row `t` scores the code that follows the first `t` codes.
    pub logits: Var,
    /// Attention nodes of the local layers, first to last.
    pub cross_attention: Option<Vec<Var>>,
    /// `C_ω`, `m × D`, when `m ≥ 1`.
    pub local: Option<Var>,
    /// States entering the head, `(m+1) × D`.
    pub states: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub codes: CodeSequence,
    /// END was chosen before any code.
    pub degenerate: bool,
    pub attention: AttentionRecord,
}

#[derive(Debug, Clone)]
pub struct Gla {
    pub cfg: GlaConfig,
}

impl Gla {
    pub fn new(cfg: GlaConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    /// Generator parameters under `gla.*`; the text encoder is initialized separately.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let c = &self.cfg;
        let d = c.d_model;
        let mut p = ParamStore::new();
        p.insert("gla.embed.codes", Tensor::randn(&[c.codes, d], 1.0, rng));
        p.insert("gla.embed.pos", Tensor::randn(&[c.max_codes + 1, d], 0.1, rng));
        p.init_linear("gla.cond_proj", c.d_text, d, rng);
        if !c.ablate_local {
            for l in 0..c.local_layers {
                let name = format!("gla.local.l{l}");
                p.init_layer_norm(&format!("{name}.ln1"), d);
                p.init_matrix(&format!("{name}.attn.wq"), d, d, rng);
                p.init_matrix(&format!("{name}.attn.wk"), c.d_text, d, rng);
                p.init_matrix(&format!("{name}.attn.wv"), c.d_text, d, rng);
                p.init_linear(&format!("{name}.attn.wo"), d, d, rng);
                p.init_layer_norm(&format!("{name}.ln2"), d);
                init_ffn(&mut p, &format!("{name}.ffn"), d, 2 * d, rng);
            }
        }
        if !c.ablate_global {
            for l in 0..c.global_layers {
                init_block(&mut p, &format!("gla.global.l{l}"), d, rng);
            }
        }
        p.init_layer_norm("gla.head.ln", d);
        // zero head: an untrained model predicts the uniform distribution
        p.insert("gla.head.out.w", Tensor::zeros(&[d, c.vocab()]));
        p.insert("gla.head.out.b", Tensor::zeros(&[c.vocab()]));
        p
    }

    /// Code embeddings plus positions `1..=m`.
    pub fn embed_codes(&self, g: &mut Graph, p: &ParamStore, codes: &[usize]) -> Result<Var> {
        if codes.len() > self.cfg.max_codes {
            return Err(Error::InvalidArgument(format!(
                "{} codes exceed max_codes {}",
                codes.len(),
                self.cfg.max_codes
            )));
        }
        let table = g.param(p, "gla.embed.codes")?;
        let e = g.gather(table, codes)?;
        let pos = g.param(p, "gla.embed.pos")?;
        let rows: Vec<usize> = (1..=codes.len()).collect();
        let pos = g.gather(pos, &rows)?;
        g.add(e, pos)
    }

    /// Projected sentence embedding plus position 0, `1 × D`.
    pub fn condition(&self, g: &mut Graph, p: &ParamStore, sentence: Var) -> Result<Var> {
        let c = linear(g, p, "gla.cond_proj", sentence)?;
        let pos = g.param(p, "gla.embed.pos")?;
        let pos = g.gather(pos, &[0])?;
        g.add(c, pos)
    }

    /// Codes query the words: `Q = LN(x)·W_q`, `K = e_ω·W_k`, `V = e_ω·W_v`.
    /// Returns `C_ω` and each layer's attention node.
    pub fn local_cross_attention(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        codes_emb: Var,
        words: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let mut x = codes_emb;
        let mut atts = Vec::with_capacity(self.cfg.local_layers);
        for l in 0..self.cfg.local_layers {
            let name = format!("gla.local.l{l}");
            let h = layer_norm(g, p, &format!("{name}.ln1"), x)?;
            let wq = g.param(p, &format!("{name}.attn.wq"))?;
            let wk = g.param(p, &format!("{name}.attn.wk"))?;
            let wv = g.param(p, &format!("{name}.attn.wv"))?;
            let q = g.matmul(h, wq)?;
            let k = g.matmul(words, wk)?;
            let v = g.matmul(words, wv)?;
            let att = g.attention(
                q,
                k,
                v,
                AttnSpec {
                    batch: 1,
                    heads: self.cfg.heads,
                    mask: AttnMask::None,
                },
            )?;
            atts.push(att);
            let o = linear(g, p, &format!("{name}.attn.wo"), att)?;
            let x1 = g.add(x, o)?;
            let h2 = layer_norm(g, p, &format!("{name}.ln2"), x1)?;
            let f = ffn(g, p, &format!("{name}.ffn"), h2)?;
            x = g.add(x1, f)?;
        }
        Ok((x, atts))
    }

    /// Causal self-attention over `[condition; C_ω]`, all `m+1` positions returned.
    pub fn global_conditional_self_attention(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        local: Option<Var>,
        cond: Var,
    ) -> Result<Var> {
        if self.cfg.ablate_global {
            return match local {
                None => Ok(cond),
                Some(c) => {
                    let m = g.shape(c)[0];
                    let spread = g.gather(cond, &vec![0; m])?;
                    let c = g.add(c, spread)?;
                    g.concat_rows(&[cond, c])
                }
            };
        }
        let mut x = match local {
            None => cond,
            Some(c) => g.concat_rows(&[cond, c])?,
        };
        for l in 0..self.cfg.global_layers {
            let io = BlockIo {
                name: &format!("gla.global.l{l}"),
                heads: self.cfg.heads,
                batch: 1,
                mask: AttnMask::Causal,
            };
            x = self_attention_block(g, p, io, x)?.0;
        }
        Ok(x)
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, codes: &[usize], text: TextSource<'_>) -> Result<GlaForward> {
        let t = text.vars(g, p)?;
        let words_width = g.shape(t.words)[1];
        if words_width != self.cfg.d_text {
            return Err(Error::shape("text embedding", &[words_width], &[self.cfg.d_text]));
        }
        let cond = self.condition(g, p, t.sentence)?;
        let (local, cross) = if codes.is_empty() {
            (None, None)
        } else {
            let e = self.embed_codes(g, p, codes)?;
            if self.cfg.ablate_local {
                (Some(e), None)
            } else {
                let (c, atts) = self.local_cross_attention(g, p, e, t.words)?;
                (Some(c), Some(atts))
            }
        };
        let states = self.global_conditional_self_attention(g, p, local, cond)?;
        let h = layer_norm(g, p, "gla.head.ln", states)?;
        let logits = linear(g, p, "gla.head.out", h)?;
        Ok(GlaForward {
            logits,
            cross_attention: cross,
            local,
            states,
        })
    }

    /// Mean cross-entropy of `[c_1..c_m, END]` under teacher forcing.
    pub fn next_code_loss(&self, g: &mut Graph, p: &ParamStore, codes: &CodeSequence, text: TextSource<'_>) -> Result<Var> {
        let out = self.forward(g, p, &codes.codes, text)?;
        g.cross_entropy(out.logits, &codes.with_end(self.cfg.codes))
    }

    /// Logits for the code after `prefix`.
    pub fn next_logits(&self, p: &ParamStore, prefix: &[usize], text: TextSource<'_>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, p, prefix, text)?;
        Ok(g.value(out.logits).row(prefix.len()).to_vec())
    }

    pub fn generate(&self, p: &ParamStore, text: TextSource<'_>, seed: u64) -> Result<Generation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.generate_with(p, text, &mut rng)
    }

    pub fn generate_with<R: Rng + ?Sized>(&self, p: &ParamStore, text: TextSource<'_>, rng: &mut R) -> Result<Generation> {
        let end = self.cfg.end_token();
        let mut codes = Vec::new();
        while codes.len() < self.cfg.max_codes {
            let logits = self.next_logits(p, &codes, text)?;
            let next = sample_from_logits(&logits, &self.cfg.sampling, rng);
            if next == end {
                break;
            }
            codes.push(next);
        }
        let attention = self.attention_record(p, &codes, text)?;
        Ok(Generation {
            degenerate: codes.is_empty(),
            codes: CodeSequence { codes },
            attention,
        })
    }

    /// Cross-attention weights of every local layer for a code sequence.
    pub fn attention_record(&self, p: &ParamStore, codes: &[usize], text: TextSource<'_>) -> Result<AttentionRecord> {
        if codes.is_empty() || self.cfg.ablate_local {
            return Ok(AttentionRecord::default());
        }
        let mut g = Graph::new();
        let out = self.forward(&mut g, p, codes, text)?;
        let mut layers = Vec::new();
        for att in out.cross_attention.unwrap_or_default() {
            let (probs, spec) = g.attention_probs(att).expect("attention node");
            let (m, heads) = (codes.len(), spec.heads);
            let n = probs.len() / (heads * m);
            let per_head = probs
                .chunks(m * n)
                .map(|c| Tensor::new(vec![m, n], c.to_vec()))
                .collect::<Result<Vec<_>>>()?;
            layers.push(per_head);
        }
        Ok(AttentionRecord { layers })
    }
}
