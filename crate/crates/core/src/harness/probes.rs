//! Small optimization experiments on a single loss: the distribution loss
//! spreading collapsed intents apart, and the mask task moving intent
//! attention toward the decisive intent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::intents::{distribution_loss, extract_intents, mean_pairwise_distance, IntentSet};
use crate::matcher::{intent_attention, mask_loss, mask_sweep};
use crate::tensor::{AdamConfig, Graph, ParamSet, Tensor};
use crate::Result;

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpreadRun {
    pub seed: u64,
    pub distance_before: f64,
    pub distance_after: f64,
}

impl SpreadRun {
    pub fn spread(&self) -> bool {
        self.distance_after > self.distance_before
    }
}

/// What the distribution-loss probe optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpreadTarget {
    /// The `c` intent vectors themselves.
    Intents,
    /// The extraction projection `W_A`, with intents aggregated from fixed
    /// attribute states.
    Projection,
}

/// Starts from near-collapsed intents (all equal up to `jitter`) next to a
/// fixed random text state and takes `steps` Adam steps (lr 0.05) on the
/// distribution loss alone. For [`SpreadTarget::Projection`] the `c`
/// columns of `W_A` start equal and the intents are aggregated from `n`
/// fixed attribute states.
///
/// Exactly equal intents receive equal gradients and never separate; the
/// jitter breaks the tie.
pub fn dis_spread_run(target: SpreadTarget, seed: u64, d: usize, n: usize, c: usize, steps: usize, jitter: f64, tau: f64) -> Result<SpreadRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h_text = uniform(&mut rng, d);
    let attrs = uniform(&mut rng, n * d);
    let mut params = ParamSet::<f64>::new();
    match target {
        SpreadTarget::Intents => {
            let row = uniform(&mut rng, d);
            let v: Vec<f64> = (0..c * d).map(|i| row[i % d] + jitter * rng.random_range(-1.0..1.0)).collect();
            params.insert("intents", Tensor::new(vec![c, d], v)?)?;
        }
        SpreadTarget::Projection => {
            let column = uniform(&mut rng, 2 * d);
            let w: Vec<f64> = (0..2 * d * c).map(|i| column[i / c] + jitter * rng.random_range(-1.0..1.0)).collect();
            params.insert("intent.w", Tensor::new(vec![2 * d, c], w)?)?;
            params.insert("intent.b", Tensor::zeros(vec![c]))?;
        }
    }
    let adam = AdamConfig { lr: 0.05, ..AdamConfig::default() };

    let intents_of = |params: &ParamSet<f64>, train: bool| -> Result<(Vec<f64>, Option<ParamSet<f64>>)> {
        let mut g = Graph::new();
        let h = g.constant(vec![d], h_text.clone())?;
        let set = match target {
            SpreadTarget::Intents => {
                let intents = g.param_by_name(params, "intents")?;
                IntentSet { intents, weights: None, degenerate: false }
            }
            SpreadTarget::Projection => {
                let a = g.constant(vec![n, d], attrs.clone())?;
                let w_a = g.param_by_name(params, "intent.w")?;
                let b_a = g.param_by_name(params, "intent.b")?;
                extract_intents(&mut g, h, Some(a), w_a, b_a)?
            }
        };
        let values = g.value(set.intents).to_vec();
        if !train {
            return Ok((values, None));
        }
        let loss = distribution_loss(&mut g, &set, h, tau, false)?.expect("non-degenerate set");
        g.backward(loss)?;
        let mut p = params.clone();
        p.zero_grads();
        g.accumulate_param_grads(&mut p);
        Ok((values, Some(p)))
    };
    let before = mean_pairwise_distance(&intents_of(&params, false)?.0, c);
    for _ in 0..steps {
        let (_, Some(mut with_grads)) = intents_of(&params, true)? else { unreachable!() };
        with_grads.adam_step(&adam);
        params = with_grads;
    }
    let after = mean_pairwise_distance(&intents_of(&params, false)?.0, c);
    Ok(SpreadRun { seed, distance_before: before, distance_after: after })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskRun {
    pub seed: u64,
    /// Intent attention on the decisive slot after each step, starting with the initial value.
    pub decisive_beta: Vec<f64>,
}

impl MaskRun {
    pub fn monotone(&self) -> bool {
        self.decisive_beta.windows(2).all(|w| w[1] > w[0])
    }
}

/// One decisive intent: the head reads only slot `j*` (weights
/// `κ·I_j*/‖I_j*‖`, bias `-offset`, label 1), so masking it is the only mask
/// that raises the match loss. With the offset, masking flips the prediction
/// and the importance target on `j*` is close to 1. `h_cls` and the `2c` intents are free variables updated by
/// gradient descent on the mask loss alone.
pub fn mask_direction_run(seed: u64, d: usize, c: usize, steps: usize, lr: f64, kappa: f64, offset: f64) -> Result<MaskRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots = 2 * c;
    let mut h_cls = uniform(&mut rng, d);
    let mut intents = uniform(&mut rng, slots * d);
    let decisive = rng.random_range(0..slots);
    let mut head_w = vec![0.0; (slots + 1) * d];
    let row = &intents[decisive * d..(decisive + 1) * d];
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    for (k, v) in row.iter().enumerate() {
        head_w[(decisive + 1) * d + k] = kappa * v / norm;
    }

    let mut trace = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut g = Graph::<f64>::new();
        let h = g.leaf(&Tensor::new(vec![d], h_cls.clone())?.with_requires_grad(true))?;
        let all = g.leaf(&Tensor::new(vec![slots, d], intents.clone())?.with_requires_grad(true))?;
        let beta = intent_attention(&mut g, h, all)?;
        let beta_values = g.value(beta).to_vec();
        trace.push(beta_values[decisive]);
        if step == steps {
            break;
        }
        let delta = mask_sweep(&h_cls, &intents, &beta_values, &head_w, -offset, 1, false);
        let loss = mask_loss(&mut g, &delta, beta)?;
        g.backward(loss)?;
        let gh = g.grad(h).map(<[f64]>::to_vec).unwrap_or_default();
        let gi = g.grad(all).map(<[f64]>::to_vec).unwrap_or_default();
        h_cls.iter_mut().zip(&gh).for_each(|(v, gv)| *v -= lr * gv);
        intents.iter_mut().zip(&gi).for_each(|(v, gv)| *v -= lr * gv);
    }
    Ok(MaskRun { seed, decisive_beta: trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distribution_loss_spreads_a_single_run() {
        let run = dis_spread_run(SpreadTarget::Intents, 1, 8, 4, 3, 50, 1e-3, 0.5).unwrap();
        assert!(run.distance_before < 0.05, "{run:?}");
        assert!(run.spread(), "{run:?}");
    }

    #[test]
    fn exactly_collapsed_intents_stay_put() {
        for target in [SpreadTarget::Intents, SpreadTarget::Projection] {
            let run = dis_spread_run(target, 2, 8, 4, 3, 5, 0.0, 0.5).unwrap();
            assert!(run.distance_before < 1e-12 && run.distance_after < 1e-9, "{run:?}");
        }
    }

    #[test]
    fn mask_task_raises_the_decisive_weight() {
        let run = mask_direction_run(3, 8, 2, 50, 0.05, 20.0, 6.0).unwrap();
        assert!(run.monotone(), "{:?}", run.decisive_beta);
        assert!(run.decisive_beta[50] > run.decisive_beta[0] + 0.05);
    }
}
