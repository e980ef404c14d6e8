//! Attributed text pairs, the synthetic corpus generator, dataset files,
//! vocabulary and batching.

mod batch;
mod corpus;
mod io;
mod oracle;
mod vocab;

pub use batch::{batch_iter, Batch};
pub use corpus::{generate_corpus, Corpus, CorpusSpec};
pub use io::{load_dataset, read_dataset, save_dataset, write_dataset, LoadedDataset};
pub use oracle::{oracle_predict, oracle_scores, OracleEvidence};
pub use vocab::{build_vocab, Vocab, CLS, PAD, RESERVED, SEP, UNK};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("line {line}: field `{field}`: {message}")]
    Parse { line: usize, field: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One typed attribute, e.g. an entity or a location.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attribute {
    pub attr_type: String,
    pub tokens: Vec<usize>,
}

/// A text plus its attributes; one side of a match pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct AttributedText {
    pub tokens: Vec<usize>,
    pub attributes: Vec<Attribute>,
}

impl AttributedText {
    pub fn new(tokens: Vec<usize>) -> Self {
        AttributedText { tokens, attributes: Vec::new() }
    }

    pub fn with_attribute(mut self, attr_type: impl Into<String>, tokens: Vec<usize>) -> Self {
        self.attributes.push(Attribute { attr_type: attr_type.into(), tokens });
        self
    }

    pub fn attribute_tokens(&self) -> usize {
        self.attributes.iter().map(|a| a.tokens.len()).sum()
    }
}

/// A labelled pair. The latent intent ids are generator metadata and never
/// reach the model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct MatchExample {
    pub x: AttributedText,
    pub y: AttributedText,
    pub label: u8,
    pub latent_x: Vec<usize>,
    pub latent_y: Vec<usize>,
}

impl MatchExample {
    pub fn latent_overlap(&self) -> usize {
        self.latent_x.iter().filter(|i| self.latent_y.contains(i)).count()
    }

    /// Copy with every attribute of the given type removed from both sides.
    pub fn without_attr_type(&self, attr_type: &str) -> MatchExample {
        let strip = |t: &AttributedText| AttributedText {
            tokens: t.tokens.clone(),
            attributes: t.attributes.iter().filter(|a| a.attr_type != attr_type).cloned().collect(),
        };
        MatchExample { x: strip(&self.x), y: strip(&self.y), ..self.clone() }
    }
}
