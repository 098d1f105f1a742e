use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TEXT_VERSION: &str = "attmotion-txt-v1";

/// Word-level (`N × D_text`) and sentence-level (`1 × D_text`) text features.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub tokens: Vec<String>,
    pub word_embs: Tensor,
    pub sentence_emb: Tensor,
}

impl TextEmbedding {
    pub fn new(tokens: Vec<String>, word_embs: Tensor, sentence_emb: Tensor) -> Result<Self> {
        if word_embs.shape().len() != 2 || word_embs.rows() == 0 {
            return Err(Error::Format("word embeddings must be a non-empty matrix".into()));
        }
        if sentence_emb.numel() != word_embs.cols() {
            return Err(Error::Format(format!(
                "sentence embedding width {} differs from word width {}",
                sentence_emb.numel(),
                word_embs.cols()
            )));
        }
        if tokens.len() != word_embs.rows() {
            return Err(Error::Format(format!(
                "{} tokens for {} word rows",
                tokens.len(),
                word_embs.rows()
            )));
        }
        if !word_embs.is_finite() || !sentence_emb.is_finite() {
            return Err(Error::Format("embeddings contain non-finite values".into()));
        }
        let sentence_emb = sentence_emb.reshape(&[1, word_embs.cols()])?;
        Ok(Self {
            tokens,
            word_embs,
            sentence_emb,
        })
    }

    pub fn width(&self) -> usize {
        self.word_embs.cols()
    }

    pub fn len(&self) -> usize {
        self.word_embs.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Serialize, Deserialize)]
struct TextFile {
    version: String,
    tokens: Vec<String>,
    word_embs: Vec<Vec<f64>>,
    sentence_emb: Vec<f64>,
}

pub fn save_external_embeddings(emb: &TextEmbedding, path: &Path) -> Result<()> {
    let file = TextFile {
        version: TEXT_VERSION.to_string(),
        tokens: emb.tokens.clone(),
        word_embs: emb.word_embs.to_rows(),
        sentence_emb: emb.sentence_emb.data().to_vec(),
    };
    let json = serde_json::to_string(&file).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Loads precomputed embeddings (e.g. from a CLIP text encoder). The width is taken from the file.
pub fn load_external_embeddings(path: &Path) -> Result<TextEmbedding> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: TextFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: format!("{} line {} column {}", path.display(), e.line(), e.column()),
        message: e.to_string(),
    })?;
    if file.version != TEXT_VERSION {
        return Err(Error::Format(format!("unsupported text embedding version `{}`", file.version)));
    }
    if file.word_embs.is_empty() {
        return Err(Error::Format("embedding file has no word rows".into()));
    }
    let width = file.sentence_emb.len();
    if let Some((i, row)) = file.word_embs.iter().enumerate().find(|(_, r)| r.len() != width) {
        return Err(Error::Format(format!(
            "word row {i} has width {} but the sentence embedding has width {width}",
            row.len()
        )));
    }
    let words = Tensor::from_rows(&file.word_embs)?;
    TextEmbedding::new(file.tokens, words, Tensor::vector(file.sentence_emb))
}

/// Parameters of the toy encoder: an embedding table and a sentence projection.
pub fn init_toy_encoder<R: Rng + ?Sized>(store: &mut ParamStore, vocab_size: usize, d_text: usize, rng: &mut R) {
    store.insert("text.word_emb", Tensor::randn(&[vocab_size, d_text], 1.0, rng));
    store.init_linear("text.sentence_proj", d_text, d_text, rng);
}

/// Graph nodes for word and sentence embeddings.
#[derive(Debug, Clone, Copy)]
pub struct TextVars {
    pub words: Var,
    pub sentence: Var,
}

/// Toy encoder on the tape: words are table rows, the sentence is a linear map of their mean.
pub fn toy_encode_graph(g: &mut Graph, params: &ParamStore, ids: &[usize]) -> Result<TextVars> {
    if ids.is_empty() {
        return Err(Error::EmptyText);
    }
    let table = g.param(params, "text.word_emb")?;
    let words = g.gather(table, ids)?;
    let mean = g.group_mean(words, ids.len())?;
    let w = g.param(params, "text.sentence_proj.w")?;
    let b = g.param(params, "text.sentence_proj.b")?;
    let proj = g.matmul(mean, w)?;
    let sentence = g.add_row(proj, b)?;
    Ok(TextVars { words, sentence })
}

/// Evaluates the toy encoder outside of training.
pub fn toy_encode(params: &ParamStore, ids: &[usize], tokens: Vec<String>) -> Result<TextEmbedding> {
    let mut g = Graph::new();
    let vars = toy_encode_graph(&mut g, params, ids)?;
    TextEmbedding::new(tokens, g.value(vars.words).clone(), g.value(vars.sentence).clone())
}
