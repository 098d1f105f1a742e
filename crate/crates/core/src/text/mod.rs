//! Tokenization and text features: a trainable toy encoder and an external-embedding loader.

mod embed;
mod vocab;

pub use embed::{
    init_toy_encoder, load_external_embeddings, save_external_embeddings, toy_encode, toy_encode_graph, TextEmbedding,
    TextVars, TEXT_VERSION,
};
pub use vocab::{split_words, Vocabulary, PAD_ID, UNK_ID};
