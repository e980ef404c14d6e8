use std::collections::HashMap;

use super::CorpusSpec;

pub const CLS: usize = 0;
pub const SEP: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["[CLS]", "[SEP]", "[PAD]", "[UNK]"];

/// Bidirectional token ↔ id map. Ids 0–3 are the reserved specials.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().filter(|w| !RESERVED.contains(&w.as_str())));
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or [`UNK`].
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Vocabulary of a synthetic corpus: specials, one block `i{k}_{t}` per
/// latent intent, then the shared noise pool `n{t}`.
pub fn build_vocab(spec: &CorpusSpec) -> Vocab {
    let blocks = (0..spec.num_latent_intents)
        .flat_map(|k| (0..spec.block_size).map(move |t| format!("i{k}_{t}")));
    let noise = (0..spec.noise_pool).map(|t| format!("n{t}"));
    Vocab::from_tokens(blocks.chain(noise))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_come_first() {
        let v = build_vocab(&CorpusSpec::default());
        for (i, s) in RESERVED.iter().enumerate() {
            assert_eq!(v.id(s), Some(i));
        }
        assert_eq!(v.len(), CorpusSpec::default().vocab_size());
        assert_eq!(v.id_or_unk("nope"), UNK);
        assert_eq!(v.token(v.id("i0_0").unwrap()), "i0_0");
    }
}
