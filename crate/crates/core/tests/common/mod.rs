//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use mim::data::{generate_corpus, AttributedText, Corpus, CorpusSpec};
use mim::encoder::{build_layout, EncoderConfig};
use mim::harness::RunConfig;
use mim::tensor::ParamSet;

fn weights<'a>(p: &'a ParamSet<f64>, name: &str) -> &'a [f64] {
    p.get(name).unwrap_or_else(|| panic!("missing parameter {name}")).values()
}

fn layer_norm(x: &mut [f64], d: usize, gain: &[f64], bias: &[f64], eps: f64) {
    for row in x.chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            row[j] = (row[j] - mean) * inv * gain[j] + bias[j];
        }
    }
}

/// `x [n × i] · w [i × o] + b`
fn affine(x: &[f64], w: &[f64], b: &[f64], i: usize, o: usize) -> Vec<f64> {
    let n = x.len() / i;
    let mut y = vec![0.0; n * o];
    for r in 0..n {
        for c in 0..o {
            let mut s = b[c];
            for k in 0..i {
                s += x[r * i + k] * w[k * o + c];
            }
            y[r * o + c] = s;
        }
    }
    y
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// A textbook transformer encoder with no gates, written with plain loops
/// and reading the same named weights as the library encoder.
pub fn reference_encode(x: &AttributedText, y: &AttributedText, p: &ParamSet<f64>, cfg: &EncoderConfig) -> Vec<f64> {
    let plan = build_layout(x, y, cfg.max_len).unwrap();
    let (d, n, heads) = (cfg.d, plan.len(), cfg.heads);
    let dh = d / heads;
    let scale = if cfg.scale_logits { 1.0 / (dh as f64).sqrt() } else { 1.0 };
    let (tok, seg) = (weights(p, "emb.token"), weights(p, "emb.segment"));
    let mut h = vec![0.0; n * d];
    for i in 0..n {
        let s = plan.segments[i].embedding_index();
        for j in 0..d {
            h[i * d + j] = tok[plan.token_ids[i] * d + j] + seg[s * d + j];
            if cfg.position_embeddings {
                h[i * d + j] += weights(p, "emb.position")[i * d + j];
            }
        }
    }
    layer_norm(&mut h, d, weights(p, "emb.ln.gain"), weights(p, "emb.ln.bias"), cfg.ln_eps);
    for l in 0..cfg.layers {
        let w = |n: &str| weights(p, &format!("layer{l}.{n}"));
        let norm_in = |x: &[f64], ln: &str| {
            let mut x = x.to_vec();
            if cfg.pre_norm {
                layer_norm(&mut x, d, w(&format!("{ln}.gain")), w(&format!("{ln}.bias")), cfg.ln_eps);
            }
            x
        };
        let a_in = norm_in(&h, "ln1");
        let q = affine(&a_in, w("attn.wq"), w("attn.bq"), d, d);
        let k = affine(&a_in, w("attn.wk"), w("attn.bk"), d, d);
        let v = affine(&a_in, w("attn.wv"), w("attn.bv"), d, d);
        let mut a = vec![0.0; n * d];
        for hd in 0..heads {
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| (0..dh).map(|t| q[i * d + hd * dh + t] * k[j * d + hd * dh + t]).sum::<f64>() * scale)
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for t in 0..dh {
                    a[i * d + hd * dh + t] = (0..n).map(|j| e[j] / z * v[j * d + hd * dh + t]).sum();
                }
            }
        }
        let o = affine(&a, w("attn.wo"), w("attn.bo"), d, d);
        h.iter_mut().zip(&o).for_each(|(x, o)| *x += o);
        if !cfg.pre_norm {
            layer_norm(&mut h, d, w("ln1.gain"), w("ln1.bias"), cfg.ln_eps);
        }
        let f_in = norm_in(&h, "ln2");
        let mid: Vec<f64> = affine(&f_in, w("ffn.w1"), w("ffn.b1"), d, cfg.ffn_dim).into_iter().map(gelu).collect();
        let f = affine(&mid, w("ffn.w2"), w("ffn.b2"), cfg.ffn_dim, d);
        h.iter_mut().zip(&f).for_each(|(x, f)| *x += f);
        if !cfg.pre_norm {
            layer_norm(&mut h, d, w("ln2.gain"), w("ln2.bias"), cfg.ln_eps);
        }
    }
    if cfg.pre_norm {
        layer_norm(&mut h, d, weights(p, "final.ln.gain"), weights(p, "final.ln.bias"), cfg.ln_eps);
    }
    h
}

/// O(n²) AUC: concordant pairs plus half the ties over all positive/negative pairs.
pub fn brute_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0.0).then(|| num / pairs)
}

/// A small, quick configuration for pipeline tests.
pub fn tiny_config(epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.encoder = EncoderConfig { d: 16, heads: 2, ffn_dim: 32, max_len: 32, init_std: 0.15, ..Default::default() };
    cfg.intents.c = 2;
    cfg.corpus = CorpusSpec { num_train: 96, num_valid: 32, num_test: 32, ..Default::default() };
    cfg.train.epochs = epochs;
    cfg.train.batch_size = 16;
    cfg
}

pub fn tiny_corpus(cfg: &RunConfig) -> Corpus {
    generate_corpus(&cfg.corpus).unwrap()
}
