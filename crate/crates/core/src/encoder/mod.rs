//! The attribute-aware encoder.
//!
//! Both sides of a pair and all their attributes are laid out in one
//! sequence (see [`build_layout`]) and encoded jointly by a post-norm
//! transformer. Every attribute owns a `[SEP]` token; a sigmoid over a
//! projection of that token's state gives the attribute's importance gate,
//! which multiplies the attention logits toward all of the attribute's
//! words. Text and special tokens have gate 1.
//!
//! Batches are encoded as one padded `[batch·seq × d]` activation.

mod layout;

pub use layout::{build_layout, AttrSpan, LayoutPlan, Segment, Side};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{AttributedText, MatchExample, PAD};
use crate::tensor::{AttnLayout, Graph, ParamSet, Real, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    /// Rows of the token embedding table; 0 takes the vocabulary size.
    pub vocab_size: usize,
    pub dropout_rate: f64,
    /// Multiply `q·k` by `1/√head_dim` before gating.
    pub scale_logits: bool,
    /// Recompute gates from each layer's input; otherwise once from the
    /// embeddings with a single shared projection.
    pub per_layer_gates: bool,
    pub position_embeddings: bool,
    /// Normalize sublayer inputs instead of residual sums, with a final
    /// layer norm after the last layer.
    pub pre_norm: bool,
    pub init_std: f64,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            max_len: 128,
            vocab_size: 0,
            dropout_rate: 0.0,
            scale_logits: true,
            per_layer_gates: true,
            position_embeddings: true,
            pre_norm: false,
            init_std: 0.02,
            ln_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("encoder: {m}")));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return fail(format!("d = {} must be a positive multiple of heads = {}", self.d, self.heads));
        }
        if self.layers == 0 || self.ffn_dim == 0 {
            return fail("layers and ffn_dim must be positive".into());
        }
        if self.max_len < 5 {
            return fail(format!("max_len {} cannot hold a pair", self.max_len));
        }
        if self.vocab_size < crate::data::RESERVED.len() {
            return fail(format!("vocab_size {} is smaller than the reserved tokens", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0,1)", self.dropout_rate));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn attention_scale(&self) -> f64 {
        if self.scale_logits {
            1.0 / (self.head_dim() as f64).sqrt()
        } else {
            1.0
        }
    }

    fn gate_prefix(&self, layer: usize) -> String {
        if self.per_layer_gates {
            format!("layer{layer}.gate")
        } else {
            "gate".to_string()
        }
    }
}

/// Whether attribute gates come from the learned projection or are fixed at 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    Learned,
    Pinned,
}

fn normal_tensor<T: Real>(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_f64(shape, &values).expect("positive dims")
}

/// Adds the encoder's parameters to `params`: weights from `N(0, init_std)`,
/// zero biases, unit layer-norm gains. Gate projections exist only when `gated`.
pub fn init_encoder_params<T: Real>(
    params: &mut ParamSet<T>,
    cfg: &EncoderConfig,
    gated: bool,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    let (d, f, std) = (cfg.d, cfg.ffn_dim, cfg.init_std);
    params.insert("emb.token", normal_tensor(vec![cfg.vocab_size, d], std, rng))?;
    if cfg.position_embeddings {
        params.insert("emb.position", normal_tensor(vec![cfg.max_len, d], std, rng))?;
    }
    params.insert("emb.segment", normal_tensor(vec![Segment::COUNT, d], std, rng))?;
    params.insert("emb.ln.gain", Tensor::filled(vec![d], T::one()))?;
    params.insert("emb.ln.bias", Tensor::zeros(vec![d]))?;
    let gate = |params: &mut ParamSet<T>, prefix: &str, rng: &mut ChaCha8Rng| -> Result<()> {
        params.insert(format!("{prefix}.w"), normal_tensor(vec![d, 1], std, rng))?;
        params.insert(format!("{prefix}.b"), Tensor::zeros(vec![1]))?;
        Ok(())
    };
    if gated && !cfg.per_layer_gates {
        gate(params, "gate", rng)?;
    }
    for l in 0..cfg.layers {
        if gated && cfg.per_layer_gates {
            gate(params, &format!("layer{l}.gate"), rng)?;
        }
        for (name, rows, cols) in [("wq", d, d), ("wk", d, d), ("wv", d, d), ("wo", d, d)] {
            params.insert(format!("layer{l}.attn.{name}"), normal_tensor(vec![rows, cols], std, rng))?;
            params.insert(format!("layer{l}.attn.b{}", &name[1..]), Tensor::zeros(vec![cols]))?;
        }
        params.insert(format!("layer{l}.ffn.w1"), normal_tensor(vec![d, f], std, rng))?;
        params.insert(format!("layer{l}.ffn.b1"), Tensor::zeros(vec![f]))?;
        params.insert(format!("layer{l}.ffn.w2"), normal_tensor(vec![f, d], std, rng))?;
        params.insert(format!("layer{l}.ffn.b2"), Tensor::zeros(vec![d]))?;
        for ln in ["ln1", "ln2"] {
            params.insert(format!("layer{l}.{ln}.gain"), Tensor::filled(vec![d], T::one()))?;
            params.insert(format!("layer{l}.{ln}.bias"), Tensor::zeros(vec![d]))?;
        }
    }
    if cfg.pre_norm {
        params.insert("final.ln.gain", Tensor::filled(vec![d], T::one()))?;
        params.insert("final.ln.bias", Tensor::zeros(vec![d]))?;
    }
    Ok(())
}

/// A batch of layouts padded to a common length.
#[derive(Debug, Clone)]
pub struct EncoderInput {
    pub batch: usize,
    pub seq: usize,
    pub token_ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<usize>,
    /// False on padding.
    pub key_mask: Vec<bool>,
    /// Per row, the batch-global attribute whose words it holds.
    pub gate_map: Vec<Option<usize>>,
    /// Row of every attribute's `[SEP]`, in batch-global attribute order.
    pub attr_sep_rows: Vec<usize>,
    /// Batch-global index of each example's first attribute.
    pub attr_offsets: Vec<usize>,
    pub plans: Vec<LayoutPlan>,
}

impl EncoderInput {
    pub fn from_plans(plans: Vec<LayoutPlan>) -> Self {
        let batch = plans.len();
        let seq = plans.iter().map(LayoutPlan::len).max().unwrap_or(0);
        let n = batch * seq;
        let mut input = EncoderInput {
            batch,
            seq,
            token_ids: vec![PAD; n],
            positions: (0..n).map(|r| r % seq.max(1)).collect(),
            segments: vec![Segment::Sep.embedding_index(); n],
            key_mask: vec![false; n],
            gate_map: vec![None; n],
            attr_sep_rows: Vec::new(),
            attr_offsets: Vec::with_capacity(batch),
            plans: Vec::new(),
        };
        for (b, plan) in plans.iter().enumerate() {
            let base = b * seq;
            let offset = input.attr_sep_rows.len();
            input.attr_offsets.push(offset);
            for (i, (&t, s)) in plan.token_ids.iter().zip(&plan.segments).enumerate() {
                input.token_ids[base + i] = t;
                input.segments[base + i] = s.embedding_index();
                input.key_mask[base + i] = true;
            }
            for (i, k) in plan.attribute_of().into_iter().enumerate() {
                input.gate_map[base + i] = k.map(|k| offset + k);
            }
            input.attr_sep_rows.extend(plan.attr_spans.iter().map(|s| base + s.sep_position));
        }
        input.plans = plans;
        input
    }

    pub fn from_pairs<'a>(
        pairs: impl IntoIterator<Item = (&'a AttributedText, &'a AttributedText)>,
        max_len: usize,
    ) -> Result<Self> {
        let plans = pairs.into_iter().map(|(x, y)| build_layout(x, y, max_len)).collect::<Result<Vec<_>>>()?;
        if plans.is_empty() {
            return Err(Error::Layout("empty batch".into()));
        }
        Ok(Self::from_plans(plans))
    }

    pub fn from_examples(examples: &[&MatchExample], max_len: usize) -> Result<Self> {
        Self::from_pairs(examples.iter().map(|e| (&e.x, &e.y)), max_len)
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }

    pub fn num_attributes(&self) -> usize {
        self.attr_sep_rows.len()
    }

    pub fn cls_row(&self, b: usize) -> usize {
        b * self.seq
    }

    pub fn x_sep_row(&self, b: usize) -> usize {
        b * self.seq + self.plans[b].x_sep
    }

    pub fn y_sep_row(&self, b: usize) -> usize {
        b * self.seq + self.plans[b].y_sep
    }

    /// `[SEP]` rows of example `b`'s attributes on one side.
    pub fn attr_rows(&self, b: usize, side: Side) -> Vec<usize> {
        self.plans[b].spans(side).map(|s| b * self.seq + s.sep_position).collect()
    }

    /// Batch-global attribute indices of example `b` on one side.
    pub fn attr_indices(&self, b: usize, side: Side) -> Vec<usize> {
        let offset = self.attr_offsets[b];
        let plan = &self.plans[b];
        plan.attr_spans.iter().enumerate().filter(|(_, s)| s.side == side).map(|(k, _)| offset + k).collect()
    }
}

/// Graph handles produced by [`encode_batch`].
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    /// Last-layer states, `[batch·seq × d]`.
    pub states: Var,
    /// Gates used by the last layer, one per attribute; `None` when pinned
    /// or when the batch has no attributes.
    pub gates: Option<Var>,
    /// Attention node of every layer (see [`Graph::attention_probs`]).
    pub attention: Vec<Var>,
}

fn linear<T: Real>(g: &mut Graph<T>, params: &ParamSet<T>, x: Var, w: &str, b: &str) -> Result<Var> {
    let w = g.param_by_name(params, w)?;
    let b = g.param_by_name(params, b)?;
    let y = g.matmul(x, w)?;
    Ok(g.add_bias(y, b)?)
}

fn layer_norm<T: Real>(g: &mut Graph<T>, params: &ParamSet<T>, x: Var, prefix: &str, eps: f64) -> Result<Var> {
    let gain = g.param_by_name(params, &format!("{prefix}.gain"))?;
    let bias = g.param_by_name(params, &format!("{prefix}.bias"))?;
    Ok(g.layer_norm(x, gain, bias, eps)?)
}

/// `g_k = σ(w·h_k + b)` for each row of `sep_states` (`[n × d]`), as a `[n]` vector.
pub fn attribute_gates<T: Real>(g: &mut Graph<T>, params: &ParamSet<T>, sep_states: Var, prefix: &str) -> Result<Var> {
    let z = linear(g, params, sep_states, &format!("{prefix}.w"), &format!("{prefix}.b"))?;
    let s = g.sigmoid(z)?;
    let n = g.shape(s)[0];
    Ok(g.reshape(s, vec![n])?)
}

fn dropout<T: Real>(g: &mut Graph<T>, x: Var, rate: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
    match rng {
        Some(r) if rate > 0.0 => Ok(g.dropout(x, rate, &mut **r)?),
        _ => Ok(x),
    }
}

/// Encodes a padded batch. Passing a generator enables dropout.
pub fn encode_batch<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    cfg: &EncoderConfig,
    input: &EncoderInput,
    mode: GateMode,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<EncodedBatch> {
    let rows = input.rows();
    let d = cfg.d;
    if let Some(&t) = input.token_ids.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Layout(format!("token id {t} outside vocabulary of {}", cfg.vocab_size)));
    }
    if input.seq > cfg.max_len {
        return Err(Error::Layout(format!("sequence length {} exceeds max_len {}", input.seq, cfg.max_len)));
    }
    let table = g.param_by_name(params, "emb.token")?;
    let mut x = g.gather_rows(table, &input.token_ids)?;
    if cfg.position_embeddings {
        let table = g.param_by_name(params, "emb.position")?;
        let pos = g.gather_rows(table, &input.positions)?;
        x = g.add(x, pos)?;
    }
    let table = g.param_by_name(params, "emb.segment")?;
    let seg = g.gather_rows(table, &input.segments)?;
    x = g.add(x, seg)?;
    x = layer_norm(g, params, x, "emb.ln", cfg.ln_eps)?;
    x = dropout(g, x, cfg.dropout_rate, &mut dropout_rng)?;

    let has_attrs = input.num_attributes() > 0;
    let learned = mode == GateMode::Learned && has_attrs;
    if learned && params.id(&format!("{}.w", cfg.gate_prefix(0))).is_none() {
        return Err(Error::Config("learned gates requested but the model has no gate parameters".into()));
    }
    let ones = if learned { None } else { Some(g.constant(vec![rows], vec![T::one(); rows])?) };
    let mut shared_gates = None;
    if learned && !cfg.per_layer_gates {
        let seps = g.gather_rows(x, &input.attr_sep_rows)?;
        shared_gates = Some(attribute_gates(g, params, seps, "gate")?);
    }

    let layout = AttnLayout { batch: input.batch, seq: input.seq, heads: cfg.heads, scale: cfg.attention_scale() };
    let mut attention = Vec::with_capacity(cfg.layers);
    let mut last_gates = None;
    for l in 0..cfg.layers {
        let token_gates = match ones {
            Some(ones) => ones,
            None => {
                let gates = match shared_gates {
                    Some(s) => s,
                    None => {
                        let seps = g.gather_rows(x, &input.attr_sep_rows)?;
                        attribute_gates(g, params, seps, &cfg.gate_prefix(l))?
                    }
                };
                last_gates = Some(gates);
                g.expand_gates(gates, &input.gate_map)?
            }
        };
        let p = format!("layer{l}");
        let a_in = if cfg.pre_norm { layer_norm(g, params, x, &format!("{p}.ln1"), cfg.ln_eps)? } else { x };
        let q = linear(g, params, a_in, &format!("{p}.attn.wq"), &format!("{p}.attn.bq"))?;
        let k = linear(g, params, a_in, &format!("{p}.attn.wk"), &format!("{p}.attn.bk"))?;
        let v = linear(g, params, a_in, &format!("{p}.attn.wv"), &format!("{p}.attn.bv"))?;
        let a = g.gated_attention(q, k, v, token_gates, &input.key_mask, layout)?;
        attention.push(a);
        let o = linear(g, params, a, &format!("{p}.attn.wo"), &format!("{p}.attn.bo"))?;
        let o = dropout(g, o, cfg.dropout_rate, &mut dropout_rng)?;
        x = g.add(x, o)?;
        if !cfg.pre_norm {
            x = layer_norm(g, params, x, &format!("{p}.ln1"), cfg.ln_eps)?;
        }
        let f_in = if cfg.pre_norm { layer_norm(g, params, x, &format!("{p}.ln2"), cfg.ln_eps)? } else { x };
        let h = linear(g, params, f_in, &format!("{p}.ffn.w1"), &format!("{p}.ffn.b1"))?;
        let h = g.gelu(h)?;
        let f = linear(g, params, h, &format!("{p}.ffn.w2"), &format!("{p}.ffn.b2"))?;
        let f = dropout(g, f, cfg.dropout_rate, &mut dropout_rng)?;
        x = g.add(x, f)?;
        if !cfg.pre_norm {
            x = layer_norm(g, params, x, &format!("{p}.ln2"), cfg.ln_eps)?;
        }
    }
    if cfg.pre_norm {
        x = layer_norm(g, params, x, "final.ln", cfg.ln_eps)?;
    }
    debug_assert_eq!(g.shape(x), &[rows, d]);
    Ok(EncodedBatch { states: x, gates: last_gates, attention })
}

/// Plain values of one encoded pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair<T: Real = f32> {
    /// `[L × d]`, last layer.
    pub token_states: Tensor<T>,
    pub h_cls: Tensor<T>,
    /// State of the `[SEP]` before X-text.
    pub h_x: Tensor<T>,
    /// State of the `[SEP]` before Y-text.
    pub h_y: Tensor<T>,
    /// `[n_A × d]`; `None` without attributes.
    pub h_a: Option<Tensor<T>>,
    pub h_b: Option<Tensor<T>>,
    /// Last-layer gates, X attributes first.
    pub gates: Vec<T>,
    pub plan: LayoutPlan,
}

/// Encodes a single pair in evaluation mode.
pub fn encode<T: Real>(
    x: &AttributedText,
    y: &AttributedText,
    params: &ParamSet<T>,
    cfg: &EncoderConfig,
    mode: GateMode,
) -> Result<EncodedPair<T>> {
    let input = EncoderInput::from_pairs([(x, y)], cfg.max_len)?;
    let mut g = Graph::new();
    let enc = encode_batch(&mut g, params, cfg, &input, mode, None)?;
    let d = cfg.d;
    let states = g.value(enc.states);
    let row = |r: usize| Tensor::new(vec![d], states[r * d..(r + 1) * d].to_vec()).expect("d > 0");
    let rows = |rs: &[usize]| {
        (!rs.is_empty()).then(|| {
            let v = rs.iter().flat_map(|&r| states[r * d..(r + 1) * d].iter().copied()).collect();
            Tensor::new(vec![rs.len(), d], v).expect("non-empty")
        })
    };
    let plan = input.plans[0].clone();
    let len = plan.len();
    let gates = match enc.gates {
        Some(v) => g.value(v).to_vec(),
        None => vec![T::one(); plan.attr_spans.len()],
    };
    Ok(EncodedPair {
        token_states: Tensor::new(vec![len, d], states[..len * d].to_vec())?,
        h_cls: row(input.cls_row(0)),
        h_x: row(input.x_sep_row(0)),
        h_y: row(input.y_sep_row(0)),
        h_a: rows(&input.attr_rows(0, Side::X)),
        h_b: rows(&input.attr_rows(0, Side::Y)),
        gates,
        plan,
    })
}

/// Fresh encoder parameters from a seed.
pub fn seeded_encoder_params<T: Real>(cfg: &EncoderConfig, gated: bool, seed: u64) -> Result<ParamSet<T>> {
    let mut params = ParamSet::new();
    init_encoder_params(&mut params, cfg, gated, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(params)
}
