//! Rule-based classifier that reads the planted intent structure directly
//! off the tokens. It bounds what a learned matcher can achieve on a corpus.

use std::collections::BTreeSet;

use super::{AttributedText, CorpusSpec, MatchExample};

/// Which tokens the oracle may look at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleEvidence {
    /// Attribute tokens only: each attribute votes for the intent owning
    /// most of its tokens.
    Attributes,
    /// Text and attribute tokens: an intent counts as present once its block
    /// supplies at least `tokens_per_intent + attr_len` minus one token.
    TextAndAttributes,
}

fn inferred_intents(spec: &CorpusSpec, side: &AttributedText, evidence: OracleEvidence) -> BTreeSet<usize> {
    match evidence {
        OracleEvidence::Attributes => side
            .attributes
            .iter()
            .filter_map(|a| {
                let mut counts = vec![0usize; spec.num_latent_intents];
                a.tokens.iter().filter_map(|&t| spec.intent_of(t)).for_each(|k| counts[k] += 1);
                let (best, &n) = counts.iter().enumerate().max_by_key(|&(k, &n)| (n, std::cmp::Reverse(k)))?;
                (n > 0).then_some(best)
            })
            .collect(),
        OracleEvidence::TextAndAttributes => {
            let mut counts = vec![0usize; spec.num_latent_intents];
            side.tokens
                .iter()
                .chain(side.attributes.iter().flat_map(|a| a.tokens.iter()))
                .filter_map(|&t| spec.intent_of(t))
                .for_each(|k| counts[k] += 1);
            let needed = (spec.tokens_per_intent + spec.attr_len).saturating_sub(1).max(1);
            counts.iter().enumerate().filter(|&(_, &n)| n >= needed).map(|(k, _)| k).collect()
        }
    }
}

/// Number of intents the two sides appear to share; a ranking score.
fn shared(spec: &CorpusSpec, e: &MatchExample, evidence: OracleEvidence) -> usize {
    let x = inferred_intents(spec, &e.x, evidence);
    let y = inferred_intents(spec, &e.y, evidence);
    x.intersection(&y).count()
}

pub fn oracle_predict(spec: &CorpusSpec, e: &MatchExample, evidence: OracleEvidence) -> u8 {
    u8::from(shared(spec, e, evidence) >= spec.overlap_threshold)
}

/// Graded oracle scores (inferred overlap count), usable for AUC.
pub fn oracle_scores(spec: &CorpusSpec, examples: &[MatchExample], evidence: OracleEvidence) -> Vec<f64> {
    examples.iter().map(|e| shared(spec, e, evidence) as f64).collect()
}
