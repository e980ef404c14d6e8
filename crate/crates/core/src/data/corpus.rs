//! Synthetic attributed-matching corpora with planted latent intents.
//!
//! Every latent intent owns a disjoint block of the vocabulary. A side
//! samples a set of intents, writes text tokens from their blocks (plus
//! shared noise) and emits one attribute per intent. A pair is positive iff
//! the two sides share at least `overlap_threshold` intents.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AttributedText, DataError, MatchExample, RESERVED};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    /// K, the number of latent intents.
    pub num_latent_intents: usize,
    /// Vocabulary tokens owned by each latent intent.
    pub block_size: usize,
    /// Shared tokens that carry no intent.
    pub noise_pool: usize,
    /// Inclusive range of intents sampled per side.
    pub intents_per_side: [usize; 2],
    /// Text tokens drawn from each sampled intent's block.
    pub tokens_per_intent: usize,
    /// Noise tokens added to each text.
    pub text_noise_tokens: usize,
    /// Tokens per attribute.
    pub attr_len: usize,
    /// Attribute types, assigned round-robin to a side's intents.
    pub attr_types: Vec<String>,
    /// Probability an attribute token is replaced by a random token.
    pub attribute_noise: f64,
    pub overlap_threshold: usize,
    pub num_train: usize,
    pub num_valid: usize,
    pub num_test: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            num_latent_intents: 8,
            block_size: 6,
            noise_pool: 8,
            intents_per_side: [3, 3],
            tokens_per_intent: 1,
            text_noise_tokens: 1,
            attr_len: 1,
            attr_types: vec!["entity".into(), "location".into(), "category".into()],
            attribute_noise: 0.15,
            overlap_threshold: 2,
            num_train: 5000,
            num_valid: 500,
            num_test: 1000,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn vocab_size(&self) -> usize {
        RESERVED.len() + self.num_latent_intents * self.block_size + self.noise_pool
    }

    /// First id of latent intent `k`'s token block.
    pub fn block_start(&self, k: usize) -> usize {
        RESERVED.len() + k * self.block_size
    }

    /// Latent intent owning token `id`, if any.
    pub fn intent_of(&self, id: usize) -> Option<usize> {
        let first = RESERVED.len();
        let end = first + self.num_latent_intents * self.block_size;
        (first..end).contains(&id).then(|| (id - first) / self.block_size)
    }

    fn noise_start(&self) -> usize {
        RESERVED.len() + self.num_latent_intents * self.block_size
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let [r_min, r_max] = self.intents_per_side;
        let fail = |m: String| Err(DataError::InvalidSpec(m));
        if r_min == 0 || r_min > r_max {
            return fail(format!("intents_per_side {:?} must satisfy 1 <= min <= max", self.intents_per_side));
        }
        if self.num_latent_intents < r_max {
            return fail(format!("{} latent intents cannot supply {r_max} per side", self.num_latent_intents));
        }
        if self.overlap_threshold > r_min {
            return fail(format!("overlap_threshold {} exceeds min intents per side {r_min}", self.overlap_threshold));
        }
        if self.block_size == 0 || self.tokens_per_intent == 0 || self.attr_len == 0 {
            return fail("block_size, tokens_per_intent and attr_len must be positive".into());
        }
        if self.text_noise_tokens > 0 && self.noise_pool == 0 {
            return fail("text noise requested with an empty noise pool".into());
        }
        if self.attr_types.is_empty() {
            return fail("attr_types must not be empty".into());
        }
        if !(0.0..=1.0).contains(&self.attribute_noise) {
            return fail(format!("attribute_noise {} outside [0,1]", self.attribute_noise));
        }
        Ok(())
    }

    /// Overlap counts that can realize `label` for side sizes `(rx, ry)`.
    fn overlap_range(&self, rx: usize, ry: usize, label: u8) -> Option<(usize, usize)> {
        let lo_feasible = (rx + ry).saturating_sub(self.num_latent_intents);
        let hi_feasible = rx.min(ry);
        let (lo, hi) = if label == 1 {
            (self.overlap_threshold.max(lo_feasible), hi_feasible)
        } else {
            (lo_feasible, self.overlap_threshold.checked_sub(1)?.min(hi_feasible))
        };
        (lo <= hi).then_some((lo, hi))
    }

    fn label_feasible(&self, label: u8) -> bool {
        let [r_min, r_max] = self.intents_per_side;
        (r_min..=r_max).any(|rx| (r_min..=r_max).any(|ry| self.overlap_range(rx, ry, label).is_some()))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub train: Vec<MatchExample>,
    pub valid: Vec<MatchExample>,
    pub test: Vec<MatchExample>,
}

impl Corpus {
    pub fn splits(&self) -> [(&'static str, &[MatchExample]); 3] {
        [("train", &self.train), ("valid", &self.valid), ("test", &self.test)]
    }
}

/// Generates train/valid/test splits. Deterministic in `spec.seed`; no
/// `(x, y)` token pair appears twice anywhere in the corpus.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let mut split = |n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<MatchExample>, DataError> {
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let wanted = if i % 2 == 0 { 1 } else { 0 };
            let label = if spec.label_feasible(wanted) { wanted } else { 1 - wanted };
            let mut attempts = 0;
            loop {
                let ex = sample_pair(spec, label, rng);
                if seen.insert((ex.x.clone(), ex.y.clone())) {
                    out.push(ex);
                    break;
                }
                attempts += 1;
                if attempts > 1000 {
                    return Err(DataError::InvalidSpec(format!(
                        "vocabulary too small to draw {n} distinct pairs"
                    )));
                }
            }
        }
        out.shuffle(rng);
        Ok(out)
    };
    let train = split(spec.num_train, &mut rng)?;
    let valid = split(spec.num_valid, &mut rng)?;
    let test = split(spec.num_test, &mut rng)?;
    Ok(Corpus { train, valid, test })
}

fn sample_pair(spec: &CorpusSpec, label: u8, rng: &mut ChaCha8Rng) -> MatchExample {
    let [r_min, r_max] = spec.intents_per_side;
    let (rx, ry, (lo, hi)) = loop {
        let rx = rng.random_range(r_min..=r_max);
        let ry = rng.random_range(r_min..=r_max);
        if let Some(range) = spec.overlap_range(rx, ry, label) {
            break (rx, ry, range);
        }
    };
    let overlap = rng.random_range(lo..=hi);
    let mut all: Vec<usize> = (0..spec.num_latent_intents).collect();
    all.shuffle(rng);
    let latent_x: Vec<usize> = all[..rx].to_vec();
    let mut latent_y: Vec<usize> = latent_x[..overlap].to_vec();
    latent_y.extend_from_slice(&all[rx..rx + (ry - overlap)]);
    latent_y.shuffle(rng);

    let x = render_side(spec, &latent_x, rng);
    let y = render_side(spec, &latent_y, rng);
    MatchExample { x, y, label, latent_x, latent_y }
}

fn render_side(spec: &CorpusSpec, intents: &[usize], rng: &mut ChaCha8Rng) -> AttributedText {
    let mut tokens = Vec::new();
    for &k in intents {
        for _ in 0..spec.tokens_per_intent {
            tokens.push(spec.block_start(k) + rng.random_range(0..spec.block_size));
        }
    }
    for _ in 0..spec.text_noise_tokens {
        tokens.push(spec.noise_start() + rng.random_range(0..spec.noise_pool));
    }
    tokens.shuffle(rng);

    let mut text = AttributedText::new(tokens);
    let word_ids: Vec<usize> = (RESERVED.len()..spec.vocab_size()).collect();
    for (i, &k) in intents.iter().enumerate() {
        let attr_tokens = (0..spec.attr_len)
            .map(|_| {
                if rng.random_bool(spec.attribute_noise) {
                    *word_ids.choose(rng).expect("vocabulary has words")
                } else {
                    spec.block_start(k) + rng.random_range(0..spec.block_size)
                }
            })
            .collect();
        text = text.with_attribute(spec.attr_types[i % spec.attr_types.len()].clone(), attr_tokens);
    }
    text
}
