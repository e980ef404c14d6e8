//! Multi-intent extraction and its two auxiliary losses.
//!
//! Each side pools its attribute states into `c` intents. Intent `r` is a
//! convex combination of the attributes, weighted by a softmax over the
//! attributes of `[h_text; h_attr_j]·W_A + b_A`. The distribution loss pulls
//! intents toward the text state and pushes them apart; the KL loss aligns
//! the intents of matched pairs and separates those of mismatched pairs.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, ParamSet, Real, Tensor, TensorError, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntentConfig {
    /// Intents per side.
    pub c: usize,
    /// Temperature of the distribution loss.
    pub tau: f64,
    /// Hinge margin of the KL loss on negative pairs.
    pub kl_margin: f64,
    /// Probability floor inside the KL logarithms.
    pub epsilon_dist: f64,
    /// Keep the `j = i` term in the distribution-loss denominator.
    pub include_self_pair: bool,
}

impl Default for IntentConfig {
    fn default() -> Self {
        IntentConfig { c: 3, tau: 0.5, kl_margin: 1.0, epsilon_dist: 1e-8, include_self_pair: false }
    }
}

impl IntentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c == 0 {
            return Err(Error::Config("intents: c must be at least 1".into()));
        }
        if !(self.tau > 0.0) || !(self.kl_margin > 0.0) || !(self.epsilon_dist > 0.0) {
            return Err(Error::Config("intents: tau, kl_margin and epsilon_dist must be positive".into()));
        }
        Ok(())
    }
}

/// `W_A` (`[2d × c]`, shared by both sides) and `b_A` (`[c]`).
pub fn init_intent_params<T: Real>(
    params: &mut ParamSet<T>,
    d: usize,
    c: usize,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let w: Vec<f64> = (0..2 * d * c).map(|_| dist.sample(rng)).collect();
    params.insert("intent.w", Tensor::from_f64(vec![2 * d, c], &w)?)?;
    params.insert("intent.b", Tensor::zeros(vec![c]))?;
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct IntentSet {
    /// `[c × d]`.
    pub intents: Var,
    /// `[n × c]`: column `r` holds intent `r`'s weights over the attributes.
    /// `None` for the no-attribute fallback.
    pub weights: Option<Var>,
    /// True when the side had no attributes and the intents are copies of
    /// the text state.
    pub degenerate: bool,
}

/// Pools `h_attrs` (`[n × d]`, or `None` for no attributes) into `c` intents
/// conditioned on `h_text` (`[d]`).
pub fn extract_intents<T: Real>(
    g: &mut Graph<T>,
    h_text: Var,
    h_attrs: Option<Var>,
    w_a: Var,
    b_a: Var,
) -> Result<IntentSet, TensorError> {
    let d = g.value(h_text).len();
    let c = g.value(b_a).len();
    let h = g.reshape(h_text, vec![1, d])?;
    let Some(attrs) = h_attrs else {
        let intents = g.gather_rows(h, &vec![0; c])?;
        return Ok(IntentSet { intents, weights: None, degenerate: true });
    };
    let n = g.shape(attrs)[0];
    let rep = g.gather_rows(h, &vec![0; n])?;
    let joint = g.concat(&[rep, attrs], 1)?;
    let logits = g.matmul(joint, w_a)?;
    let logits = g.add_bias(logits, b_a)?;
    let weights = g.softmax(logits, 0)?;
    let wt = g.transpose(weights)?;
    let intents = g.matmul(wt, attrs)?;
    Ok(IntentSet { intents, weights: Some(weights), degenerate: false })
}

/// Mean over intents `i` of `−[cos(I_i, h)/τ − log Σ_{j≠i} exp(cos(I_i, I_j)/τ)]`.
/// With one intent only the attraction term remains. Returns `None` for a
/// degenerate set.
pub fn distribution_loss<T: Real>(
    g: &mut Graph<T>,
    set: &IntentSet,
    h_text: Var,
    tau: f64,
    include_self_pair: bool,
) -> Result<Option<Var>, TensorError> {
    if set.degenerate {
        return Ok(None);
    }
    let (c, d) = (g.shape(set.intents)[0], g.shape(set.intents)[1]);
    let h = g.reshape(h_text, vec![1, d])?;
    let all = g.concat(&[set.intents, h], 0)?;
    let unit = g.normalize_rows(all)?;
    let unit_t = g.transpose(unit)?;
    let cos = g.matmul(unit, unit_t)?;
    let stride = c + 1;
    let attract = g.gather_elems(cos, &(0..c).map(|i| i * stride + c).collect::<Vec<_>>(), vec![c])?;
    if c == 1 && !include_self_pair {
        let loss = g.scale(attract, -1.0 / tau)?;
        return Ok(Some(g.mean(loss)?));
    }
    let idx: Vec<usize> =
        (0..c).flat_map(|i| (0..c).filter(move |&j| include_self_pair || j != i).map(move |j| i * stride + j)).collect();
    let per_row = idx.len() / c;
    let pairs = g.gather_elems(cos, &idx, vec![c, per_row])?;
    let pairs = g.scale(pairs, 1.0 / tau)?;
    let lse = g.log_sum_exp(pairs)?;
    let attract = g.scale(attract, 1.0 / tau)?;
    let terms = g.sub(lse, attract)?;
    Ok(Some(g.mean(terms)?))
}

/// Row-wise softmax over the hidden dimension.
pub fn intent_distribution<T: Real>(g: &mut Graph<T>, intents: Var) -> Result<Var, TensorError> {
    g.softmax(intents, 1)
}

/// Mean over rows of `KL(p_r ‖ q_r)` for a positive pair, or
/// `max(0, margin − KL)` for a negative one. Probabilities are floored at
/// `eps` inside the logarithms.
pub fn kl_loss<T: Real>(g: &mut Graph<T>, p: Var, q: Var, label: u8, margin: f64, eps: f64) -> Result<Var, TensorError> {
    if g.shape(p) != g.shape(q) {
        return Err(TensorError::Shape { op: "kl_loss", detail: format!("{:?} vs {:?}", g.shape(p), g.shape(q)) });
    }
    let rows = g.shape(p)[0];
    let pc = g.clamp(p, eps, f64::INFINITY)?;
    let qc = g.clamp(q, eps, f64::INFINITY)?;
    let lp = g.log(pc)?;
    let lq = g.log(qc)?;
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(p, diff)?;
    let total = g.sum(terms)?;
    let kl = g.scale(total, 1.0 / rows as f64)?;
    if label == 1 {
        Ok(kl)
    } else {
        let gap = g.affine(kl, -1.0, margin)?;
        g.relu(gap)
    }
}

/// Mean Euclidean distance over all intent pairs of a `[c × d]` matrix.
pub fn mean_pairwise_distance(intents: &[f64], c: usize) -> f64 {
    let d = intents.len() / c;
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..c {
        for j in i + 1..c {
            let (a, b) = (&intents[i * d..(i + 1) * d], &intents[j * d..(j + 1) * d]);
            total += a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
