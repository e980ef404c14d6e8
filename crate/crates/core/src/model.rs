//! The full matcher: encoder, intents of both sides, intent attention, the
//! match head and all four losses, with switches that remove each mechanism.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::MatchExample;
use crate::encoder::{encode_batch, init_encoder_params, EncoderConfig, EncoderInput, GateMode, Side};
use crate::intents::{distribution_loss, extract_intents, init_intent_params, intent_distribution, kl_loss, IntentConfig};
use crate::matcher::{
    intent_attention, mask_loss, mask_sweep, match_features, match_loss, match_probability, total_loss, LossBreakdown,
    LossTerms, LossWeights,
};
use crate::tensor::{Graph, ParamSet, Real, Tensor, Var};
use crate::{Error, Result};

/// Each flag removes one mechanism.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Gates pinned to 1; no gate parameters.
    pub no_gate: bool,
    pub no_kl: bool,
    pub no_dis: bool,
    /// No intents: the head reads `h_cls` alone. Also drops the KL, distribution and mask losses.
    pub no_multi_intent: bool,
    pub no_mask: bool,
}

impl AblationFlags {
    pub const NAMES: [&'static str; 5] = ["no_gate", "no_kl", "no_dis", "no_multi_intent", "no_mask"];

    /// The flag set with only `name` switched on.
    pub fn only(name: &str) -> Result<Self> {
        let mut f = AblationFlags::default();
        match name {
            "no_gate" => f.no_gate = true,
            "no_kl" => f.no_kl = true,
            "no_dis" => f.no_dis = true,
            "no_multi_intent" => f.no_multi_intent = true,
            "no_mask" => f.no_mask = true,
            other => {
                return Err(Error::Config(format!("unknown ablation `{other}`; expected one of {:?}", Self::NAMES)))
            }
        }
        Ok(f)
    }

    /// Row label: `full` or the names of the active flags joined by `+`.
    pub fn label(&self) -> String {
        let on = [self.no_gate, self.no_kl, self.no_dis, self.no_multi_intent, self.no_mask];
        let names: Vec<&str> = Self::NAMES.iter().zip(on).filter(|(_, b)| *b).map(|(n, _)| *n).collect();
        if names.is_empty() {
            "full".into()
        } else {
            names.join("+")
        }
    }

    fn uses_intents(&self) -> bool {
        !self.no_multi_intent
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MimConfig {
    pub encoder: EncoderConfig,
    pub intents: IntentConfig,
    pub ablation: AblationFlags,
    pub weights: LossWeights,
    /// Renormalize the surviving intent weights when masking a slot.
    pub mask_renormalize: bool,
}

impl MimConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.intents.validate()
    }

    /// Input width of the match head.
    pub fn head_width(&self) -> usize {
        if self.ablation.uses_intents() {
            (2 * self.intents.c + 1) * self.encoder.d
        } else {
            self.encoder.d
        }
    }
}

/// Fresh parameters for `cfg`, deterministic in `seed`.
pub fn init_params<T: Real>(cfg: &MimConfig, seed: u64) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    init_encoder_params(&mut params, &cfg.encoder, !cfg.ablation.no_gate, &mut rng)?;
    if cfg.ablation.uses_intents() {
        init_intent_params(&mut params, cfg.encoder.d, cfg.intents.c, cfg.encoder.init_std, &mut rng)?;
    }
    let dist = Normal::new(0.0, cfg.encoder.init_std).expect("finite std");
    let w: Vec<f64> = (0..cfg.head_width()).map(|_| dist.sample(&mut rng)).collect();
    params.insert("head.w", Tensor::from_f64(vec![cfg.head_width(), 1], &w)?)?;
    params.insert("head.b", Tensor::zeros(vec![1]))?;
    Ok(params)
}

/// Graph handles and values of one batch forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Weighted total loss.
    pub loss: Var,
    pub terms: LossTerms,
    pub breakdown: LossBreakdown,
    /// Match probability per example.
    pub probs: Vec<f64>,
    /// `β` per example (empty without intents).
    pub betas: Vec<Var>,
    /// Mask-task loss increases per example (empty when the mask task is off).
    pub delta_l: Vec<Vec<f64>>,
}

fn mean_of<T: Real>(g: &mut Graph<T>, parts: &[Var], n: usize) -> Result<Option<Var>> {
    if parts.is_empty() {
        return Ok(None);
    }
    let all = g.concat(parts, 0)?;
    let s = g.sum(all)?;
    Ok(Some(g.scale(s, 1.0 / n as f64)?))
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

/// Runs the model on a batch and assembles every active loss. A generator
/// enables dropout (training); `None` is evaluation mode.
pub fn forward_batch<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    cfg: &MimConfig,
    examples: &[&MatchExample],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardOutput> {
    forward_batch_with_targets(g, params, cfg, examples, dropout_rng, None)
}

/// [`forward_batch`] with the mask-task `ΔL` of every example supplied
/// instead of measured. The mask target carries no gradient, so finite
/// differences of the mask loss only agree with the graph when it is held
/// fixed.
pub fn forward_batch_with_targets<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    cfg: &MimConfig,
    examples: &[&MatchExample],
    dropout_rng: Option<&mut ChaCha8Rng>,
    mask_targets: Option<&[Vec<f64>]>,
) -> Result<ForwardOutput> {
    if let Some(t) = mask_targets {
        if t.len() != examples.len() {
            return Err(Error::Config(format!("{} mask targets for {} examples", t.len(), examples.len())));
        }
    }
    let input = EncoderInput::from_examples(examples, cfg.encoder.max_len)?;
    let gates = if cfg.ablation.no_gate { GateMode::Pinned } else { GateMode::Learned };
    let enc = encode_batch(g, params, &cfg.encoder, &input, gates, dropout_rng)?;
    let batch = examples.len();
    let d = cfg.encoder.d;
    let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
    let cls_rows: Vec<usize> = (0..batch).map(|b| input.cls_row(b)).collect();
    let cls = g.gather_rows(enc.states, &cls_rows)?;
    let head_w = g.param_by_name(params, "head.w")?;
    let head_b = g.param_by_name(params, "head.b")?;

    if !cfg.ablation.uses_intents() {
        let p = match_probability(g, cls, head_w, head_b)?;
        let lm = match_loss(g, p, &labels)?;
        let terms = LossTerms { match_loss: lm, dis: None, kl: None, mask: None };
        let (loss, breakdown) = total_loss(g, &terms, &cfg.weights)?;
        let probs = to_f64(g.value(p));
        return Ok(ForwardOutput { loss, terms, breakdown, probs, betas: Vec::new(), delta_l: Vec::new() });
    }

    let ic = &cfg.intents;
    let w_a = g.param_by_name(params, "intent.w")?;
    let b_a = g.param_by_name(params, "intent.b")?;
    let text_rows: Vec<usize> = (0..batch).flat_map(|b| [input.x_sep_row(b), input.y_sep_row(b)]).collect();
    let texts = g.gather_rows(enc.states, &text_rows)?;
    let attrs = if input.num_attributes() > 0 { Some(g.gather_rows(enc.states, &input.attr_sep_rows)?) } else { None };

    let mut features = Vec::with_capacity(batch);
    let mut dis_parts = Vec::new();
    let mut kl_parts = Vec::new();
    let mut betas = Vec::with_capacity(batch);
    let mut slots = Vec::with_capacity(batch);
    for b in 0..batch {
        let h_cls = g.gather_rows(cls, &[b])?;
        let h_cls = g.reshape(h_cls, vec![d])?;
        let mut sets = Vec::with_capacity(2);
        for (k, side) in [Side::X, Side::Y].into_iter().enumerate() {
            let h_text = g.gather_rows(texts, &[2 * b + k])?;
            let h_text = g.reshape(h_text, vec![d])?;
            let idx = input.attr_indices(b, side);
            let h_attrs = match attrs {
                Some(a) if !idx.is_empty() => Some(g.gather_rows(a, &idx)?),
                _ => None,
            };
            let set = extract_intents(g, h_text, h_attrs, w_a, b_a)?;
            if !cfg.ablation.no_dis {
                if let Some(l) = distribution_loss(g, &set, h_text, ic.tau, ic.include_self_pair)? {
                    dis_parts.push(l);
                }
            }
            sets.push(set);
        }
        if !cfg.ablation.no_kl {
            let p = intent_distribution(g, sets[0].intents)?;
            let q = intent_distribution(g, sets[1].intents)?;
            kl_parts.push(kl_loss(g, p, q, labels[b], ic.kl_margin, ic.epsilon_dist)?);
        }
        let all = g.concat(&[sets[0].intents, sets[1].intents], 0)?;
        let beta = intent_attention(g, h_cls, all)?;
        features.push(match_features(g, h_cls, all, beta)?);
        betas.push(beta);
        slots.push((h_cls, all));
    }
    let features = g.concat(&features, 0)?;
    let p = match_probability(g, features, head_w, head_b)?;
    let lm = match_loss(g, p, &labels)?;
    let probs = to_f64(g.value(p));

    let mut deltas = Vec::new();
    let mask = if cfg.ablation.no_mask {
        None
    } else {
        let w = to_f64(g.value(head_w));
        let bias = g.value(head_b)[0].as_f64();
        let mut parts = Vec::with_capacity(batch);
        for (b, (&(h_cls, all), &beta)) in slots.iter().zip(&betas).enumerate() {
            let delta = match mask_targets {
                Some(t) => t[b].clone(),
                None => mask_sweep(
                    &to_f64(g.value(h_cls)),
                    &to_f64(g.value(all)),
                    &to_f64(g.value(beta)),
                    &w,
                    bias,
                    labels[b],
                    cfg.mask_renormalize,
                ),
            };
            parts.push(mask_loss(g, &delta, beta)?);
            deltas.push(delta);
        }
        mean_of(g, &parts, batch)?
    };
    let terms =
        LossTerms { match_loss: lm, dis: mean_of(g, &dis_parts, batch)?, kl: mean_of(g, &kl_parts, batch)?, mask };
    let (loss, mut breakdown) = total_loss(g, &terms, &cfg.weights)?;
    breakdown.beta = to_f64(g.value(betas[0]));
    breakdown.delta_l = deltas.first().cloned().unwrap_or_default();
    Ok(ForwardOutput { loss, terms, breakdown, probs, betas, delta_l: deltas })
}

/// Evaluation-mode probabilities and size-weighted mean loss components.
pub fn predict<T: Real>(
    params: &ParamSet<T>,
    cfg: &MimConfig,
    examples: &[MatchExample],
    batch_size: usize,
) -> Result<(Vec<f64>, LossBreakdown)> {
    let mut probs = Vec::with_capacity(examples.len());
    let mut mean = LossBreakdown::default();
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&MatchExample> = chunk.iter().collect();
        let mut g = Graph::new();
        let out = forward_batch(&mut g, params, cfg, &refs, None)?;
        probs.extend(out.probs);
        let w = chunk.len() as f64 / examples.len() as f64;
        let b = out.breakdown;
        mean.match_loss += w * b.match_loss;
        mean.dis += w * b.dis;
        mean.kl += w * b.kl;
        mean.mask += w * b.mask;
        mean.total += w * b.total;
    }
    Ok((probs, mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, CorpusSpec};

    fn small() -> MimConfig {
        MimConfig {
            encoder: EncoderConfig { d: 16, heads: 2, ffn_dim: 24, vocab_size: 60, ..Default::default() },
            intents: IntentConfig { c: 2, ..Default::default() },
            ..Default::default()
        }
    }

    fn examples(n: usize) -> Vec<MatchExample> {
        generate_corpus(&CorpusSpec { num_train: n, num_valid: 0, num_test: 0, ..Default::default() }).unwrap().train
    }

    #[test]
    fn ablations_remove_exactly_their_parameters() {
        let cfg = small();
        let (d, c, layers) = (cfg.encoder.d, cfg.intents.c, cfg.encoder.layers);
        let full = init_params::<f32>(&cfg, 1).unwrap().num_scalars();
        let with = |f: AblationFlags| init_params::<f32>(&MimConfig { ablation: f, ..cfg.clone() }, 1).unwrap().num_scalars();
        let no_mi = with(AblationFlags { no_multi_intent: true, ..Default::default() });
        assert_eq!(full - no_mi, (2 * d * c + c) + 2 * c * d);
        let no_gate = with(AblationFlags { no_gate: true, ..Default::default() });
        assert_eq!(full - no_gate, layers * (d + 1));
        for f in ["no_kl", "no_dis", "no_mask"] {
            assert_eq!(with(AblationFlags::only(f).unwrap()), full);
        }
    }

    #[test]
    fn disabled_losses_are_absent() {
        let cfg = small();
        let ex = examples(4);
        let refs: Vec<&MatchExample> = ex.iter().collect();
        let params = init_params::<f64>(&cfg, 2).unwrap();
        let mut g = Graph::new();
        let out = forward_batch(&mut g, &params, &cfg, &refs, None).unwrap();
        assert!(out.terms.dis.is_some() && out.terms.kl.is_some() && out.terms.mask.is_some());
        let b = &out.breakdown;
        assert!((b.total - (b.match_loss + b.dis + b.kl + b.mask)).abs() < 1e-12);
        assert!((b.beta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for name in ["no_kl", "no_dis", "no_mask"] {
            let cfg = MimConfig { ablation: AblationFlags::only(name).unwrap(), ..small() };
            let params = init_params::<f64>(&cfg, 2).unwrap();
            let mut g = Graph::new();
            let out = forward_batch(&mut g, &params, &cfg, &refs, None).unwrap();
            let dropped = match name {
                "no_kl" => out.terms.kl,
                "no_dis" => out.terms.dis,
                _ => out.terms.mask,
            };
            assert!(dropped.is_none(), "{name}");
        }
    }

    #[test]
    fn identical_examples_average_to_one_example() {
        let cfg = small();
        let ex = examples(1);
        let params = init_params::<f64>(&cfg, 3).unwrap();
        let one = {
            let mut g = Graph::new();
            forward_batch(&mut g, &params, &cfg, &[&ex[0]], None).unwrap().breakdown
        };
        let mut g = Graph::new();
        let four = forward_batch(&mut g, &params, &cfg, &[&ex[0]; 4], None).unwrap().breakdown;
        assert!((one.total - four.total).abs() < 1e-12);
    }

    #[test]
    fn total_gradient_is_the_sum_of_component_gradients() {
        let cfg = small();
        let ex = examples(3);
        let refs: Vec<&MatchExample> = ex.iter().collect();
        let params = init_params::<f64>(&cfg, 4).unwrap();
        let grads_of = |pick: &dyn Fn(&ForwardOutput) -> Var| {
            let mut p = params.clone();
            p.zero_grads();
            let mut g = Graph::new();
            let out = forward_batch(&mut g, &p, &cfg, &refs, None).unwrap();
            g.backward(pick(&out)).unwrap();
            g.accumulate_param_grads(&mut p);
            p.iter().flat_map(|(_, t)| t.grad().to_vec()).collect::<Vec<f64>>()
        };
        let total = grads_of(&|o| o.loss);
        let parts = [
            grads_of(&|o| o.terms.match_loss),
            grads_of(&|o| o.terms.dis.unwrap()),
            grads_of(&|o| o.terms.kl.unwrap()),
            grads_of(&|o| o.terms.mask.unwrap()),
        ];
        for (i, t) in total.iter().enumerate() {
            let s: f64 = parts.iter().map(|p| p[i]).sum();
            assert!((t - s).abs() <= 1e-6 * (1.0 + t.abs()), "{i}: {t} vs {s}");
        }
    }

    #[test]
    fn zero_attribute_pairs_still_train() {
        let cfg = small();
        let mut ex = examples(2);
        ex[0].x.attributes.clear();
        ex[1].x.attributes.clear();
        ex[1].y.attributes.clear();
        let refs: Vec<&MatchExample> = ex.iter().collect();
        let params = init_params::<f64>(&cfg, 5).unwrap();
        let mut g = Graph::new();
        let out = forward_batch(&mut g, &params, &cfg, &refs, None).unwrap();
        g.backward(out.loss).unwrap();
        assert!(out.breakdown.total.is_finite());
    }

    #[test]
    fn predictions_are_probabilities_in_order() {
        let cfg = small();
        let ex = examples(10);
        let params = init_params::<f32>(&cfg, 6).unwrap();
        let (p3, _) = predict(&params, &cfg, &ex, 3).unwrap();
        let (p10, _) = predict(&params, &cfg, &ex, 10).unwrap();
        assert_eq!(p3.len(), 10);
        assert!(p3.iter().all(|&p| p > 0.0 && p < 1.0));
        assert!(p3.iter().zip(&p10).all(|(a, b)| (a - b).abs() < 1e-5));
    }
}
