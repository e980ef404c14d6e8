//! Finite-difference audit of every loss component and of the graph ops
//! they are built from.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{generate_corpus, CorpusSpec, MatchExample};
use crate::encoder::{EncoderConfig, EncoderInput};
use crate::intents::IntentConfig;
use crate::model::{forward_batch, forward_batch_with_targets, init_params, ForwardOutput, MimConfig};
use crate::tensor::{
    finite_diff_check, param_grad_check, AttnLayout, GradCheckReport, Graph, ParamId, ParamSet, Tensor, TensorError, Var,
};
use crate::Result;

/// Tolerance for whole-loss checks.
pub const COMPONENT_TOLERANCE: f64 = 1e-3;
/// Tolerance for single-op checks.
pub const OP_TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedReport {
    pub name: String,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl NamedReport {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckSuite {
    pub components: Vec<NamedReport>,
    pub ops: Vec<NamedReport>,
}

impl GradCheckSuite {
    pub fn passed(&self) -> bool {
        self.components.iter().chain(&self.ops).all(NamedReport::passed)
    }

    /// One line per check: name, max relative error, coordinates, verdict.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (title, rows) in [("component", &self.components), ("op", &self.ops)] {
            for r in rows {
                s.push_str(&format!(
                    "{title:<9} {:<18} max_rel_error {:.3e} over {:>4} coords (< {:.0e}) {}\n",
                    r.name,
                    r.report.max_rel_error,
                    r.report.checked,
                    r.tolerance,
                    if r.passed() { "ok" } else { "FAIL" }
                ));
            }
        }
        s
    }
}

/// The model the suite differentiates: d = 16, c = 2, two layers.
pub fn grad_check_model(vocab_size: usize) -> MimConfig {
    MimConfig {
        encoder: EncoderConfig { d: 16, layers: 2, heads: 2, ffn_dim: 32, max_len: 32, vocab_size, init_std: 0.3, ..Default::default() },
        intents: IntentConfig { c: 2, ..Default::default() },
        ..Default::default()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Component {
    Match,
    Dis,
    Kl,
    Mask,
    Total,
}

impl Component {
    const ALL: [(Component, &'static str); 5] = [
        (Component::Match, "L_match"),
        (Component::Dis, "L_dis"),
        (Component::Kl, "L_KL"),
        (Component::Mask, "L_mask"),
        (Component::Total, "L_total"),
    ];

    fn pick(self, out: &ForwardOutput) -> Var {
        let t = &out.terms;
        match self {
            Component::Match => t.match_loss,
            Component::Dis => t.dis.expect("distribution loss enabled"),
            Component::Kl => t.kl.expect("KL loss enabled"),
            Component::Mask => t.mask.expect("mask loss enabled"),
            Component::Total => out.loss,
        }
    }

    /// Whether `name` can influence this component at all.
    fn reaches(self, name: &str) -> bool {
        !(name.starts_with("head.") && matches!(self, Component::Dis | Component::Kl))
    }
}

/// Coordinates whose gradient is nonzero by construction: token rows of
/// tokens in the batch, position rows inside the padded length, and only the
/// attribute half of the intent projection. The text half and the intent
/// bias shift every attribute logit equally and cancel in the softmax.
fn candidate_coords(params: &ParamSet<f64>, cfg: &MimConfig, examples: &[&MatchExample], seq: usize) -> Vec<(ParamId, Vec<usize>)> {
    let d = cfg.encoder.d;
    let mut tokens: Vec<usize> = examples
        .iter()
        .flat_map(|e| {
            [&e.x, &e.y].into_iter().flat_map(|s| s.tokens.iter().chain(s.attributes.iter().flat_map(|a| a.tokens.iter()))).copied()
        })
        .chain(0..2)
        .collect();
    tokens.sort_unstable();
    tokens.dedup();
    params
        .ids()
        .filter_map(|id| {
            let name = params.name(id);
            let n = params.tensor(id).numel();
            let idx: Vec<usize> = match name {
                "emb.token" => tokens.iter().flat_map(|&t| (0..d).map(move |j| t * d + j)).collect(),
                "emb.position" => (0..seq * d).collect(),
                "intent.w" => (d * cfg.intents.c..n).collect(),
                "intent.b" => return None,
                _ => (0..n).collect(),
            };
            Some((id, idx))
        })
        .collect()
}

fn components(seed: u64, per_param: usize) -> Result<Vec<NamedReport>> {
    let spec = CorpusSpec { num_train: 3, num_valid: 0, num_test: 0, seed, ..Default::default() };
    let mut examples = generate_corpus(&spec)?.train;
    // A zero-attribute side exercises the fallback path.
    examples[2].y.attributes.clear();
    let refs: Vec<&MatchExample> = examples.iter().collect();
    let cfg = grad_check_model(spec.vocab_size());
    let params = init_params::<f64>(&cfg, seed)?;
    let seq = EncoderInput::from_examples(&refs, cfg.encoder.max_len)?.seq;

    let mut g = Graph::new();
    let targets = forward_batch(&mut g, &params, &cfg, &refs, None)?.delta_l;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6C);
    let candidates = candidate_coords(&params, &cfg, &refs, seq);
    let mut out = Vec::new();
    for (component, name) in Component::ALL {
        let coords: Vec<(ParamId, usize)> = candidates
            .iter()
            .filter(|(id, _)| component.reaches(params.name(*id)))
            .flat_map(|(id, idx)| idx.choose_multiple(&mut rng, per_param).map(move |&i| (*id, i)).collect::<Vec<_>>())
            .collect();
        let f = |g: &mut Graph<f64>, p: &ParamSet<f64>| -> Result<Var, TensorError> {
            let out = forward_batch_with_targets(g, p, &cfg, &refs, None, Some(&targets)).map_err(|e| match e {
                crate::Error::Tensor(t) => t,
                other => TensorError::contract("grad_check", other.to_string()),
            })?;
            Ok(component.pick(&out))
        };
        let report = param_grad_check(&params, f, &coords, EPS)?;
        out.push(NamedReport { name: name.into(), report, tolerance: COMPONENT_TOLERANCE });
    }
    Ok(out)
}

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, v).expect("shape matches")
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>>;

/// Each op reduced to a scalar through fixed random weights, so that no
/// input coordinate has a vanishing gradient by symmetry.
fn ops(seed: u64) -> Result<Vec<NamedReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..64).map(|_| rng.random_range(0.5..1.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let other = random(&mut rng, vec![4, 3]);
    let gain = random(&mut rng, vec![3]);
    let weigh = move |g: &mut Graph<f64>, y: Var| -> Result<Var, TensorError> {
        let n: usize = g.shape(y).iter().product();
        let shape = g.shape(y).to_vec();
        let c = g.constant(shape, w[..n].to_vec())?;
        let p = g.mul(y, c)?;
        g.sum(p)
    };
    let other2 = other.clone();
    let list: Vec<(&str, Vec<usize>, OpFn)> = vec![
        ("matmul", vec![3, 4], Box::new(move |g, x| {
            let b = g.leaf(&other)?;
            g.matmul(x, b)
        })),
        ("softmax", vec![3, 4], Box::new(|g, x| g.softmax(x, 1))),
        ("log_sum_exp", vec![3, 4], Box::new(|g, x| g.log_sum_exp(x))),
        ("layer_norm", vec![4, 3], Box::new(move |g, x| {
            let gn = g.leaf(&gain)?;
            let b = g.constant(vec![3], vec![0.1, -0.2, 0.3])?;
            g.layer_norm(x, gn, b, 1e-5)
        })),
        ("gelu", vec![3, 4], Box::new(|g, x| g.gelu(x))),
        ("sigmoid", vec![3, 4], Box::new(|g, x| g.sigmoid(x))),
        ("tanh", vec![3, 4], Box::new(|g, x| g.tanh(x))),
        ("normalize_rows", vec![3, 4], Box::new(|g, x| g.normalize_rows(x))),
        ("cosine", vec![4, 3], Box::new(move |g, x| {
            let b = g.leaf(&other2.clone())?;
            let bt = g.transpose(b)?;
            let bt = g.reshape(bt, vec![3, 4])?;
            let xt = g.transpose(x)?;
            g.cosine(xt, bt)
        })),
        ("gated_attention", vec![4, 4], Box::new(|g, x| {
            let gates = g.constant(vec![2], vec![0.3, 0.8])?;
            let gate_map = [None, Some(0), Some(1), None];
            let expanded = g.expand_gates(gates, &gate_map)?;
            let layout = AttnLayout { batch: 1, seq: 4, heads: 2, scale: 0.7 };
            let xt = g.transpose(x)?;
            let v = g.tanh(xt)?;
            g.gated_attention(x, xt, v, expanded, &[true, true, true, false], layout)
        })),
        ("gate_sensitivity", vec![2], Box::new(|g, gates| {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let q = g.leaf(&random(&mut rng, vec![4, 4]))?;
            let k = g.leaf(&random(&mut rng, vec![4, 4]))?;
            let v = g.leaf(&random(&mut rng, vec![4, 4]))?;
            let s = g.sigmoid(gates)?;
            let expanded = g.expand_gates(s, &[None, Some(0), Some(1), None])?;
            let layout = AttnLayout { batch: 1, seq: 4, heads: 1, scale: 0.5 };
            g.gated_attention(q, k, v, expanded, &[true; 4], layout)
        })),
    ];
    let mut out = Vec::new();
    for (name, shape, f) in list {
        let x = random(&mut rng, shape);
        let weigh = weigh.clone();
        let report = finite_diff_check(
            |g, x| {
                let y = f(g, x)?;
                weigh(g, y)
            },
            &x,
            EPS,
        )?;
        out.push(NamedReport { name: name.into(), report, tolerance: OP_TOLERANCE });
    }
    Ok(out)
}

/// Runs every check. `per_param` caps the coordinates sampled per tensor.
pub fn grad_check_suite(seed: u64, per_param: usize) -> Result<GradCheckSuite> {
    Ok(GradCheckSuite { components: components(seed, per_param)?, ops: ops(seed)? })
}
