//! Intent attention, the match head and the intent-mask task.
//!
//! The `2c` intents of both sides are weighted by `β = softmax(I·h_cls)`.
//! The head reads `[h_cls; β_1·I_1; …; β_2c·I_2c]` and outputs a logit.
//! The mask task zeroes one weighted slot at a time, measures how much the
//! match loss rises, and pulls `β` toward the softmax of those rises.

use crate::tensor::{Graph, Real, TensorError, Var};

/// Probability floor of the binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// `β = softmax(intents_all · h_cls)` over the `2c` rows of `intents_all`.
pub fn intent_attention<T: Real>(g: &mut Graph<T>, h_cls: Var, intents_all: Var) -> Result<Var, TensorError> {
    let d = g.value(h_cls).len();
    let n = g.shape(intents_all)[0];
    let h = g.reshape(h_cls, vec![d, 1])?;
    let dots = g.matmul(intents_all, h)?;
    let dots = g.reshape(dots, vec![n])?;
    g.softmax(dots, 0)
}

/// The head input `[1 × (2c+1)·d]`.
pub fn match_features<T: Real>(g: &mut Graph<T>, h_cls: Var, intents_all: Var, beta: Var) -> Result<Var, TensorError> {
    let (n, d) = (g.shape(intents_all)[0], g.shape(intents_all)[1]);
    let weighted = g.scale_rows(intents_all, beta)?;
    let flat = g.reshape(weighted, vec![1, n * d])?;
    let h = g.reshape(h_cls, vec![1, d])?;
    g.concat(&[h, flat], 1)
}

/// `σ(features·w + b)` for a `[batch × width]` feature matrix, as a `[batch]` vector.
pub fn match_probability<T: Real>(g: &mut Graph<T>, features: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let (rows, width) = (g.shape(features)[0], g.shape(features)[1]);
    if g.shape(w) != [width, 1] {
        return Err(TensorError::Contract {
            op: "match_probability",
            detail: format!("head expects width {}, features have {width}", g.shape(w)[0]),
        });
    }
    let z = g.matmul(features, w)?;
    let z = g.add_bias(z, b)?;
    let p = g.sigmoid(z)?;
    g.reshape(p, vec![rows])
}

/// Mean binary cross-entropy with `p` clamped to `[ε, 1−ε]`.
pub fn match_loss<T: Real>(g: &mut Graph<T>, p: Var, labels: &[u8]) -> Result<Var, TensorError> {
    let n = g.value(p).len();
    if labels.len() != n {
        return Err(TensorError::Shape { op: "match_loss", detail: format!("{n} probabilities, {} labels", labels.len()) });
    }
    let pc = g.clamp(p, BCE_EPS, 1.0 - BCE_EPS)?;
    let log_p = g.log(pc)?;
    let one_minus = g.affine(pc, -1.0, 1.0)?;
    let log_q = g.log(one_minus)?;
    let s = g.constant(vec![n], labels.iter().map(|&l| T::of(l as f64)).collect())?;
    let not_s = g.constant(vec![n], labels.iter().map(|&l| T::of(1.0 - l as f64)).collect())?;
    let a = g.mul(log_p, s)?;
    let b = g.mul(log_q, not_s)?;
    let ll = g.add(a, b)?;
    let mean = g.mean(ll)?;
    g.scale(mean, -1.0)
}

/// Scalar binary cross-entropy with the same clamp as [`match_loss`].
pub fn bce(p: f64, label: u8) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Loss increase `ΔL_j` from masking each intent slot, computed from plain
/// values (no gradient). `intents` is `[2c × d]` row-major, `head_w` covers
/// `[h_cls; slot_1; …]`. Masking zeroes `β_j·I_j`; with `renormalize` the
/// surviving weights are rescaled to sum to one.
pub fn mask_sweep(
    h_cls: &[f64],
    intents: &[f64],
    beta: &[f64],
    head_w: &[f64],
    head_b: f64,
    label: u8,
    renormalize: bool,
) -> Vec<f64> {
    let d = h_cls.len();
    let n = beta.len();
    assert_eq!(intents.len(), n * d, "intents must be [2c × d]");
    assert_eq!(head_w.len(), (n + 1) * d, "head width must be (2c+1)·d");
    let dot = |w: &[f64], x: &[f64]| w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    let base = head_b + dot(&head_w[..d], h_cls);
    let slot: Vec<f64> = (0..n).map(|j| dot(&head_w[(j + 1) * d..(j + 2) * d], &intents[j * d..(j + 1) * d])).collect();
    let z: f64 = base + slot.iter().zip(beta).map(|(s, b)| s * b).sum::<f64>();
    let l_match = bce(sigmoid(z), label);
    (0..n)
        .map(|j| {
            let zj = if renormalize {
                let keep = 1.0 - beta[j];
                let rest: f64 = (0..n).filter(|&t| t != j).map(|t| slot[t] * beta[t]).sum();
                if keep > 0.0 {
                    base + rest / keep
                } else {
                    base
                }
            } else {
                z - slot[j] * beta[j]
            };
            bce(sigmoid(zj), label) - l_match
        })
        .collect()
}

/// `‖β − softmax(ΔL)‖₂`; the target is a constant, so the gradient reaches `β` only.
pub fn mask_loss<T: Real>(g: &mut Graph<T>, delta_l: &[f64], beta: Var) -> Result<Var, TensorError> {
    let n = delta_l.len();
    if g.value(beta).len() != n {
        return Err(TensorError::Shape { op: "mask_loss", detail: format!("{n} deltas vs β {:?}", g.shape(beta)) });
    }
    let target = mask_target(delta_l);
    let t = g.constant(vec![n], target.into_iter().map(T::of).collect())?;
    let diff = g.sub(beta, t)?;
    g.l2_norm(diff)
}

/// Importance target `softmax(ΔL)`.
pub fn mask_target(delta_l: &[f64]) -> Vec<f64> {
    let m = delta_l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = delta_l.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Component values of one loss evaluation.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub match_loss: f64,
    pub dis: f64,
    pub kl: f64,
    pub mask: f64,
    pub total: f64,
    /// `β` of the first example of the batch.
    pub beta: Vec<f64>,
    /// `ΔL` of the first example of the batch.
    pub delta_l: Vec<f64>,
}

/// Per-component multipliers; all 1 by default.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    #[serde(rename = "match")]
    pub match_loss: f64,
    pub dis: f64,
    pub kl: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { match_loss: 1.0, dis: 1.0, kl: 1.0, mask: 1.0 }
    }
}

/// The four component graphs; an absent component is disabled.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub match_loss: Var,
    pub dis: Option<Var>,
    pub kl: Option<Var>,
    pub mask: Option<Var>,
}

/// `L = w_m·L_match + w_d·L_dis + w_k·L_KL + w_s·L_mask` over the present terms.
pub fn total_loss<T: Real>(g: &mut Graph<T>, terms: &LossTerms, w: &LossWeights) -> Result<(Var, LossBreakdown), TensorError> {
    let mut total = g.scale(terms.match_loss, w.match_loss)?;
    let value = |v: Option<Var>| v.map_or(0.0, |v| g.item(v).as_f64());
    let mut breakdown = LossBreakdown {
        match_loss: value(Some(terms.match_loss)),
        dis: value(terms.dis),
        kl: value(terms.kl),
        mask: value(terms.mask),
        ..Default::default()
    };
    for (term, weight) in [(terms.dis, w.dis), (terms.kl, w.kl), (terms.mask, w.mask)] {
        if let Some(t) = term {
            let s = g.scale(t, weight)?;
            total = g.add(total, s)?;
        }
    }
    breakdown.total = g.item(total).as_f64();
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{finite_diff_check, Tensor};

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn beta_of(h: &[f64], intents: &[f64]) -> Vec<f64> {
        let mut g = Graph::<f64>::new();
        let hv = g.constant(vec![h.len()], h.to_vec()).unwrap();
        let iv = g.constant(vec![intents.len() / h.len(), h.len()], intents.to_vec()).unwrap();
        let b = intent_attention(&mut g, hv, iv).unwrap();
        g.value(b).to_vec()
    }

    #[test]
    fn identical_intents_get_uniform_attention() {
        let b = beta_of(&[0.3, -0.2], &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(b.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn attention_worked_example() {
        let l3 = 3f64.ln();
        let b = beta_of(&[1.0, 0.0], &[0.0, 5.0, l3, -2.0]);
        assert!((b[0] - 0.25).abs() < 1e-12 && (b[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn attention_depends_only_on_the_dot_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (h, i) = (random(&mut rng, 4), random(&mut rng, 16));
        let dots: Vec<f64> = i.chunks(4).map(|r| r.iter().zip(&h).map(|(a, b)| a * b).sum()).collect();
        let m = dots.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = dots.iter().map(|v| (v - m).exp()).sum();
        let b = beta_of(&h, &i);
        for (got, dot) in b.iter().zip(&dots) {
            assert!((got - (dot - m).exp() / s).abs() < 1e-12);
        }
    }

    fn probability(h: &[f64], intents: &[f64], beta: &[f64], w: &[f64], b: f64) -> f64 {
        let mut g = Graph::<f64>::new();
        let hv = g.constant(vec![h.len()], h.to_vec()).unwrap();
        let iv = g.constant(vec![beta.len(), h.len()], intents.to_vec()).unwrap();
        let bv = g.constant(vec![beta.len()], beta.to_vec()).unwrap();
        let f = match_features(&mut g, hv, iv, bv).unwrap();
        let wv = g.constant(vec![w.len(), 1], w.to_vec()).unwrap();
        let bb = g.constant(vec![1], vec![b]).unwrap();
        let p = match_probability(&mut g, f, wv, bb).unwrap();
        g.item(p)
    }

    #[test]
    fn zero_head_gives_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (h, i) = (random(&mut rng, 3), random(&mut rng, 12));
        assert_eq!(probability(&h, &i, &beta_of(&h, &i), &[0.0; 15], 0.0), 0.5);
    }

    #[test]
    fn probability_is_inside_the_open_interval_and_bilinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (h, mut i, w) = (random(&mut rng, 3), random(&mut rng, 12), random(&mut rng, 15));
            let mut beta = beta_of(&h, &i);
            let p = probability(&h, &i, &beta, &w, 0.1);
            assert!(p > 0.0 && p < 1.0);
            i[3..6].iter_mut().for_each(|v| *v *= 2.0);
            beta[1] /= 2.0;
            assert!((probability(&h, &i, &beta, &w, 0.1) - p).abs() < 1e-12);
        }
    }

    #[test]
    fn head_width_is_checked() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(vec![1, 6], vec![0.0; 6]).unwrap();
        let w = g.constant(vec![4, 1], vec![0.0; 4]).unwrap();
        let b = g.constant(vec![1], vec![0.0]).unwrap();
        assert!(matches!(match_probability(&mut g, f, w, b), Err(TensorError::Contract { .. })));
    }

    fn loss_of(p: &[f64], labels: &[u8]) -> f64 {
        let mut g = Graph::<f64>::new();
        let pv = g.constant(vec![p.len()], p.to_vec()).unwrap();
        let l = match_loss(&mut g, pv, labels).unwrap();
        g.item(l)
    }

    #[test]
    fn cross_entropy_worked_examples() {
        assert!((loss_of(&[0.5], &[1]) - 2f64.ln()).abs() < 1e-15);
        assert!((loss_of(&[0.5], &[0]) - 2f64.ln()).abs() < 1e-15);
        assert!((loss_of(&[0.9], &[1]) - 0.10536).abs() < 1e-5);
        assert!((loss_of(&[0.9], &[1]) + 0.9f64.ln()).abs() < 1e-15);
        assert!(loss_of(&[1.0], &[0]).is_finite());
        assert!((loss_of(&[0.9, 0.9], &[1, 1]) - loss_of(&[0.9], &[1])).abs() < 1e-15);
    }

    #[test]
    fn dead_slots_have_zero_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (h, i) = (random(&mut rng, 3), random(&mut rng, 12));
        let mut w = vec![0.0; 15];
        w[..3].copy_from_slice(&random(&mut rng, 3));
        let dl = mask_sweep(&h, &i, &beta_of(&h, &i), &w, 0.2, 1, false);
        assert!(dl.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicate_intents_get_equal_deltas() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random(&mut rng, 3);
        let row = random(&mut rng, 3);
        let i = [row.clone(), random(&mut rng, 3), row].concat();
        let mut w = random(&mut rng, 12);
        let slot0 = w[3..6].to_vec();
        w[9..12].copy_from_slice(&slot0);
        let beta = beta_of(&h, &i);
        assert!((beta[0] - beta[2]).abs() < 1e-15);
        let dl = mask_sweep(&h, &i, &beta, &w, 0.0, 0, false);
        assert!((dl[0] - dl[2]).abs() < 1e-12);
    }

    #[test]
    fn decisive_intent_has_the_largest_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (h, i) = (random(&mut rng, 4), random(&mut rng, 16));
        let decisive = 2;
        let mut w = vec![0.0; 20];
        for k in 0..4 {
            w[(decisive + 1) * 4 + k] = 5.0 * i[decisive * 4 + k];
        }
        let beta = beta_of(&h, &i);
        let dl = mask_sweep(&h, &i, &beta, &w, 0.0, 1, false);
        let z: f64 = beta[decisive] * (0..4).map(|k| w[12 + k] * i[8 + k]).sum::<f64>();
        assert!((dl[decisive] - (bce(sigmoid(0.0), 1) - bce(sigmoid(z), 1))).abs() < 1e-12);
        for j in (0..4).filter(|&j| j != decisive) {
            assert!(dl[decisive] > dl[j]);
        }
    }

    #[test]
    fn renormalized_masking_rescales_survivors() {
        let h = [0.0, 0.0];
        let i = [1.0, 0.0, 0.0, 1.0];
        let beta = [0.25, 0.75];
        let w = [0.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let plain = mask_sweep(&h, &i, &beta, &w, 0.0, 1, false);
        let renorm = mask_sweep(&h, &i, &beta, &w, 0.0, 1, true);
        let l = bce(sigmoid(1.0), 1);
        assert!((plain[0] - (bce(sigmoid(0.75), 1) - l)).abs() < 1e-12);
        assert!((renorm[0] - (bce(sigmoid(1.0), 1) - l)).abs() < 1e-12);
    }

    fn mask_of(delta: &[f64], beta: &[f64]) -> f64 {
        let mut g = Graph::<f64>::new();
        let b = g.constant(vec![beta.len()], beta.to_vec()).unwrap();
        let l = mask_loss(&mut g, delta, b).unwrap();
        g.item(l)
    }

    #[test]
    fn mask_loss_worked_examples() {
        assert_eq!(mask_of(&[0.0; 4], &[0.25; 4]), 0.0);
        let t = mask_target(&[0.3, -0.1, 0.8]);
        assert!(mask_of(&[0.3, -0.1, 0.8], &t) < 1e-15);
        let v = mask_of(&[3f64.ln(), 0.0], &[0.5, 0.5]);
        assert!((v - 0.125f64.sqrt()).abs() < 1e-12);
        assert!((v - 0.35355).abs() < 1e-5);
        assert!(mask_of(&[0.3, -0.1, 0.8], &[0.2, 0.3, 0.5]) > 0.0);
    }

    #[test]
    fn mask_loss_gradient_reaches_beta_only() {
        let delta = [0.4, -0.2, 0.1];
        let beta = Tensor::from_f64(vec![3], &[0.2, 0.5, 0.3]).unwrap();
        let r = finite_diff_check(|g, b| mask_loss(g, &delta, b), &beta, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn total_is_the_plain_sum() {
        let mut g = Graph::<f64>::new();
        let [m, d, k, s] = [0.7, 0.1, 0.2, 0.05].map(|v| g.scalar(v).unwrap());
        let terms = LossTerms { match_loss: m, dis: Some(d), kl: Some(k), mask: Some(s) };
        let (t, b) = total_loss(&mut g, &terms, &LossWeights::default()).unwrap();
        assert!((g.item(t) - 1.05).abs() < 1e-15);
        assert_eq!(b.total, g.item(t));
        let (t, b) = total_loss(&mut g, &LossTerms { kl: None, ..terms }, &LossWeights::default()).unwrap();
        assert_eq!(b.kl, 0.0);
        assert!((g.item(t) - 0.85).abs() < 1e-15);
    }

    #[test]
    fn disabled_term_receives_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::from_f64(vec![2], &[0.3, 0.4]).unwrap().with_requires_grad(true)).unwrap();
        let y = g.leaf(&Tensor::from_f64(vec![2], &[0.1, 0.9]).unwrap().with_requires_grad(true)).unwrap();
        let m = g.sum(x).unwrap();
        let _kl = g.sum(y).unwrap();
        let (t, _) = total_loss(&mut g, &LossTerms { match_loss: m, dis: None, kl: None, mask: None }, &LossWeights::default()).unwrap();
        g.backward(t).unwrap();
        assert!(g.grad(y).is_none());
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn match_loss_gradient_matches_finite_differences() {
        let x = Tensor::from_f64(vec![3], &[0.2, 0.7, 0.45]).unwrap();
        let r = finite_diff_check(|g, p| match_loss(g, p, &[1, 0, 1]), &x, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
