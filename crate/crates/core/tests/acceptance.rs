//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any failed.
//!
//! `MIM_ACCEPT=3,6` runs a subset.

mod common;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mim::data::{generate_corpus, oracle_scores, AttributedText, OracleEvidence};
use mim::encoder::{encode, seeded_encoder_params, EncoderConfig, GateMode};
use mim::harness::probes::{dis_spread_run, mask_direction_run, SpreadTarget};
use mim::harness::{
    ablate, accuracy, auc, evaluate, f1, grad_check_suite, run_seeds, sweep_intents, train, RunConfig,
};
use mim::intents::{distribution_loss, intent_distribution, kl_loss, IntentSet};
use mim::matcher::bce;
use mim::model::AblationFlags;
use mim::tensor::{load_checkpoint, Graph, ParamSet};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn repo_file(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

/// The laptop-scale benchmark configuration shipped with the repository.
fn desk_config() -> RunConfig {
    RunConfig::load(repo_file("configs/desk.toml")).expect("configs/desk.toml")
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn gradient_integrity() -> Verdict {
    let start = Instant::now();
    let suite = grad_check_suite(7, 8).expect("grad check runs");
    let elapsed = start.elapsed();
    let worst_component = suite.components.iter().map(|r| r.report.max_rel_error).fold(0.0, f64::max);
    let worst_op = suite.ops.iter().map(|r| r.report.max_rel_error).fold(0.0, f64::max);
    let pass = worst_component < 1e-3 && worst_op < 1e-4 && elapsed < Duration::from_secs(120);
    verdict(pass, format!("worst loss {worst_component:.2e} (<1e-3), worst op {worst_op:.2e} (<1e-4), {}", secs(elapsed)))
}

fn reduction_identity() -> Verdict {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for pre_norm in [false, true] {
        let corpus_cfg = common::tiny_config(0);
        let cfg = EncoderConfig { vocab_size: corpus_cfg.corpus.vocab_size(), d: 16, heads: 2, ffn_dim: 32, layers: 2, max_len: 32, init_std: 0.3, pre_norm, ..Default::default() };
        let corpus = common::tiny_corpus(&corpus_cfg);
        for seed in 0..4 {
            let params: ParamSet<f64> = seeded_encoder_params(&cfg, true, seed).unwrap();
            let mut pairs: Vec<(AttributedText, AttributedText)> =
                corpus.test.iter().take(4).map(|e| (e.x.clone(), e.y.clone())).collect();
            pairs.push((AttributedText::new(vec![5, 6, 7]), AttributedText::new(vec![8, 9])));
            for (x, y) in &pairs {
                let got = encode(x, y, &params, &cfg, GateMode::Pinned).unwrap();
                let want = common::reference_encode(x, y, &params, &cfg);
                let diff = got.token_states.values().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                worst = worst.max(diff);
                checked += 1;
            }
        }
    }
    verdict(worst < 1e-5, format!("max abs diff {worst:.2e} (<1e-5) over {checked} pairs"))
}

fn dis_value(intents: &[f64], h: &[f64], tau: f64) -> f64 {
    let mut g = Graph::<f64>::new();
    let d = h.len();
    let i = g.constant(vec![intents.len() / d, d], intents.to_vec()).unwrap();
    let hv = g.constant(vec![d], h.to_vec()).unwrap();
    let set = IntentSet { intents: i, weights: None, degenerate: false };
    let l = distribution_loss(&mut g, &set, hv, tau, false).unwrap().unwrap();
    g.value(l)[0]
}

fn distribution_loss_behavior() -> Verdict {
    let spread_count = |target| (0..20u64).filter(|&s| dis_spread_run(target, s, 16, 4, 3, 50, 1e-3, 0.5).unwrap().spread()).count();
    let spread = spread_count(SpreadTarget::Intents);
    let through_projection = spread_count(SpreadTarget::Projection);
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let orthogonal = dis_value(&[1.0, 0.0, 0.0, 1.0], &[r, r], 1.0);
    let collapsed = dis_value(&[r, r, r, r], &[r, r], 1.0);
    let oracle = -r;
    let pass = spread >= 19 && (orthogonal - oracle).abs() < 1e-5 && collapsed.abs() < 1e-9 && orthogonal < collapsed;
    verdict(pass, format!("{spread}/20 seeds spread (>=19) [through W_A: {through_projection}/20]; orthogonal {orthogonal:.5} vs collapsed {collapsed:.5}"))
}

fn kl_value(p: &[f64], q: &[f64], cols: usize, label: u8, margin: f64) -> f64 {
    let mut g = Graph::<f64>::new();
    let rows = p.len() / cols;
    let pv = g.constant(vec![rows, cols], p.to_vec()).unwrap();
    let qv = g.constant(vec![rows, cols], q.to_vec()).unwrap();
    let l = kl_loss(&mut g, pv, qv, label, margin, 1e-8).unwrap();
    g.value(l)[0]
}

fn kl_contract() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_zero = 0.0f64;
    let mut worst_hinge = 0.0f64;
    for _ in 0..50 {
        let logits: Vec<f64> = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec![3, 4], logits).unwrap();
        let p = intent_distribution(&mut g, x).unwrap();
        let p = g.value(p).to_vec();
        let margin = rng.random_range(0.1..5.0);
        worst_zero = worst_zero.max(kl_value(&p, &p, 4, 1, margin).abs());
        worst_hinge = worst_hinge.max((kl_value(&p, &p, 4, 0, margin) - margin).abs());
    }
    let oracle = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
    let worked = kl_value(&[0.9, 0.1], &[0.5, 0.5], 2, 1, 1.0);
    let pass = worst_zero < 1e-12 && worst_hinge < 1e-12 && (worked - 0.36806).abs() < 1e-4 && (worked - oracle).abs() < 1e-12;
    verdict(pass, format!("identical {worst_zero:.1e}, hinge gap {worst_hinge:.1e}, worked case {worked:.5} (0.36806)"))
}

fn mask_direction() -> Verdict {
    let monotone = (0..20u64).filter(|&s| mask_direction_run(s, 8, 2, 50, 0.05, 20.0, 6.0).unwrap().monotone()).count();
    verdict(monotone >= 19, format!("{monotone}/20 seeds monotone over 50 steps (>=19)"))
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(1..=n);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        if auc(&scores, &labels) != common::brute_auc(&scores, &labels) {
            mismatches += 1;
        }
    }
    let worked_auc = auc(&[0.9, 0.8, 0.3, 0.2], &[1, 0, 1, 0]);
    let chance = bce(0.5, 1);
    let worked_accuracy = accuracy(&[1.0, 0.0, 1.0, 0.0], &[1, 0, 0, 0], 0.5);
    let worked_f1 = f1(&[1.0, 1.0, 0.0], &[1, 0, 0], 0.5);
    let pass = mismatches == 0 && worked_auc == Some(0.75) && chance == std::f64::consts::LN_2 && bce(0.5, 0) == chance && worked_accuracy == 0.75 && worked_f1 == 2.0 / 3.0;
    verdict(pass, format!("{mismatches}/1000 AUC mismatches; AUC {worked_auc:?}, BCE(0.5) {chance}, accuracy {worked_accuracy}, F1 {worked_f1}"))
}

fn end_to_end() -> Verdict {
    let cfg = desk_config();
    let start = Instant::now();
    let corpus = generate_corpus(&cfg.corpus).unwrap();
    let ceiling = auc(&oracle_scores(&cfg.corpus, &corpus.test, OracleEvidence::TextAndAttributes), &corpus.test.iter().map(|e| e.label).collect::<Vec<_>>()).unwrap_or(f64::NAN);
    let seeds: Vec<u64> = (1..=5).collect();
    let full = run_seeds(&cfg, &corpus, &seeds).unwrap();
    let no_mi = run_seeds(&RunConfig { ablation: AblationFlags::only("no_multi_intent").unwrap(), ..cfg.clone() }, &corpus, &seeds).unwrap();
    let elapsed = start.elapsed();
    let per_seed = |r: &mim::harness::SeedRuns| r.reports.iter().map(|m| format!("{:.3}", m.auc_or_nan())).collect::<Vec<_>>().join(" ");
    let (f, n) = (full.mean_auc(), no_mi.mean_auc());
    let pass = f >= 0.90 && f > n && elapsed < Duration::from_secs(15 * 60);
    verdict(
        pass,
        format!(
            "full mean AUC {f:.4} (>=0.90) [{}] vs no_multi_intent {n:.4} [{}]; oracle ceiling {ceiling:.4}; {}",
            per_seed(&full),
            per_seed(&no_mi),
            secs(elapsed)
        ),
    )
}

fn ablation_and_sweep() -> Verdict {
    let tiny = common::tiny_config(1);
    let corpus = common::tiny_corpus(&tiny);
    let names: Vec<String> = AblationFlags::NAMES.iter().map(|s| s.to_string()).collect();
    let rows = ablate(&tiny, &names, &corpus, &[1]).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    let shape_ok = labels == ["full", "no_gate", "no_kl", "no_dis", "no_multi_intent", "no_mask"];

    let cfg = desk_config();
    let corpus = generate_corpus(&cfg.corpus).unwrap();
    let start = Instant::now();
    let sweep = sweep_intents(&cfg, &[1, 2, 3, 4, 5, 6], &corpus, &[1, 2, 3, 4, 5]).unwrap();
    let means: Vec<f64> = sweep.iter().map(|r| r.runs.mean_auc()).collect();
    let pass = shape_ok && means[2] > means[0];
    verdict(
        pass,
        format!(
            "ablation rows {labels:?}; sweep AUC c=1..6 [{}], c=3 > c=1 required; {}",
            means.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join(" "),
            secs(start.elapsed())
        ),
    )
}

fn determinism_and_persistence() -> Verdict {
    let cfg = common::tiny_config(2);
    let corpus = common::tiny_corpus(&cfg);
    let (a_dir, b_dir) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = train(&cfg, &corpus, Some(a_dir.path())).unwrap();
    let b = train(&cfg, &corpus, Some(b_dir.path())).unwrap();
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
    let identical = a.batch_losses == b.batch_losses
        && read(&a_dir, "metrics.csv") == read(&b_dir, "metrics.csv")
        && read(&a_dir, "best.ckpt") == read(&b_dir, "best.ckpt");
    let loaded: ParamSet<f32> = load_checkpoint(a_dir.path().join("best.ckpt")).unwrap();
    let model = cfg.model();
    let before = evaluate(&a.best, &model, &corpus.test, 0.5).unwrap();
    let after = evaluate(&loaded, &model, &corpus.test, 0.5).unwrap();
    let round_trip = before == after && before == a.test;
    verdict(identical && round_trip, format!("bit-identical reruns {identical}; checkpoint round-trip exact {round_trip}"))
}

fn main() {
    let criteria: [(usize, &str, fn() -> Verdict); 9] = [
        (1, "gradient integrity", gradient_integrity),
        (2, "reduction identity", reduction_identity),
        (3, "distribution loss", distribution_loss_behavior),
        (4, "KL contract", kl_contract),
        (5, "mask-task direction", mask_direction),
        (6, "metric oracles", metric_oracles),
        (7, "end-to-end benchmark", end_to_end),
        (8, "ablation and sweep", ablation_and_sweep),
        (9, "determinism and persistence", determinism_and_persistence),
    ];
    let only: Option<Vec<usize>> =
        std::env::var("MIM_ACCEPT").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let v = run();
        println!("criterion {id} {name}: {} - {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
