//! Ablation table and intent-count sweep.

use std::fmt::Write as _;

use serde::Serialize;

use super::metrics::MetricsReport;
use super::train::train;
use super::RunConfig;
use crate::data::Corpus;
use crate::model::AblationFlags;
use crate::Result;

/// One configuration trained once per seed and scored on the test split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedRuns {
    pub seeds: Vec<u64>,
    /// Test report per seed.
    pub reports: Vec<MetricsReport>,
    pub num_params: usize,
}

impl SeedRuns {
    pub fn mean(&self) -> MetricsReport {
        MetricsReport::average(&self.reports)
    }

    pub fn mean_auc(&self) -> f64 {
        self.mean().auc_or_nan()
    }
}

/// Trains `cfg` once per seed on a shared corpus.
pub fn run_seeds(cfg: &RunConfig, corpus: &Corpus, seeds: &[u64]) -> Result<SeedRuns> {
    let mut reports = Vec::with_capacity(seeds.len());
    let mut num_params = 0;
    for &seed in seeds {
        let outcome = train(&cfg.clone().with_seed(seed), corpus, None)?;
        num_params = outcome.num_params;
        reports.push(outcome.test);
    }
    Ok(SeedRuns { seeds: seeds.to_vec(), reports, num_params })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    /// `full` or the disabled mechanism.
    pub label: String,
    pub flags: AblationFlags,
    pub runs: SeedRuns,
}

/// The full model followed by one row per flag name, each removing exactly
/// that mechanism from `cfg`. All rows share the corpus and seeds.
pub fn ablate(cfg: &RunConfig, flags: &[String], corpus: &Corpus, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let mut variants = vec![AblationFlags::default()];
    for name in flags {
        variants.push(AblationFlags::only(name)?);
    }
    let mut rows = Vec::with_capacity(variants.len());
    for flags in variants {
        let run_cfg = RunConfig { ablation: flags, ..cfg.clone() };
        let runs = run_seeds(&run_cfg, corpus, seeds)?;
        rows.push(AblationRow { label: flags.label(), flags, runs });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("model,accuracy,auc,f1,params,seeds\n");
    for r in rows {
        let m = r.runs.mean();
        writeln!(s, "{},{:.6},{:.6},{:.6},{},{}", r.label, m.accuracy, m.auc_or_nan(), m.f1, r.runs.num_params, r.runs.seeds.len())
            .unwrap();
    }
    s
}

/// Fixed-width table with the full model on the first line.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<18} {:>9} {:>9} {:>9}\n", "model", "accuracy", "auc", "f1");
    for r in rows {
        let m = r.runs.mean();
        let label = if r.label == "full" { "MIM".to_string() } else { format!("w/o {}", r.label.trim_start_matches("no_")) };
        writeln!(s, "{label:<18} {:>9.4} {:>9.4} {:>9.4}", m.accuracy, m.auc_or_nan(), m.f1).unwrap();
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub c: usize,
    pub runs: SeedRuns,
}

/// Trains one model per intent count, all on the same corpus and seeds.
pub fn sweep_intents(cfg: &RunConfig, c_values: &[usize], corpus: &Corpus, seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if c_values.is_empty() {
        return Err(crate::Error::Config("sweep_intents: no intent counts given".into()));
    }
    let mut rows = Vec::with_capacity(c_values.len());
    for &c in c_values {
        let mut run_cfg = cfg.clone();
        run_cfg.intents.c = c;
        rows.push(SweepRow { c, runs: run_seeds(&run_cfg, corpus, seeds)? });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("c,accuracy,auc,f1\n");
    for r in rows {
        let m = r.runs.mean();
        writeln!(s, "{},{:.6},{:.6},{:.6}", r.c, m.accuracy, m.auc_or_nan(), m.f1).unwrap();
    }
    s
}
