//! Training loop, evaluation and run artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::metrics::MetricsReport;
use super::RunConfig;
use crate::data::{batch_iter, generate_corpus, load_dataset, save_dataset, Corpus, MatchExample};
use crate::matcher::LossBreakdown;
use crate::model::{forward_batch, init_params, predict, MimConfig};
use crate::tensor::{save_checkpoint, AdamConfig, Graph, ParamSet};
use crate::{Error, Result};

/// Train/valid/test splits from `cfg.data.dir` when set, else generated.
pub fn load_or_generate(cfg: &RunConfig) -> Result<Corpus> {
    match &cfg.data.dir {
        None => Ok(generate_corpus(&cfg.corpus)?),
        Some(dir) => {
            let vocab = cfg.vocab();
            let load = |name: &str| -> Result<Vec<MatchExample>> {
                Ok(load_dataset(dir.join(format!("{name}.jsonl")), &vocab)?.examples)
            };
            Ok(Corpus { train: load("train")?, valid: load("valid")?, test: load("test")? })
        }
    }
}

/// Writes the three splits as `<name>.jsonl` under `dir`.
pub fn write_corpus(cfg: &RunConfig, corpus: &Corpus, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let vocab = cfg.vocab();
    let mut paths = Vec::new();
    for (name, examples) in corpus.splits() {
        let path = dir.join(format!("{name}.jsonl"));
        save_dataset(&path, examples, &vocab)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Probabilities and metrics in evaluation mode.
pub fn evaluate(params: &ParamSet<f32>, model: &MimConfig, examples: &[MatchExample], threshold: f64) -> Result<MetricsReport> {
    if examples.is_empty() {
        return Err(Error::Config("evaluate: empty dataset".into()));
    }
    let (scores, losses) = predict(params, model, examples, 64)?;
    let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
    Ok(MetricsReport::from_scores(&scores, &labels, threshold, losses))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss components over the epoch's batches.
    pub train: LossBreakdown,
    pub valid: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (initialization when no epoch ran).
    pub best: ParamSet<f32>,
    pub best_epoch: Option<usize>,
    pub epochs: Vec<EpochLog>,
    /// Total loss of every training batch in order.
    pub batch_losses: Vec<f64>,
    /// Test metrics of the best checkpoint, averaged over the best `best_k`.
    pub test: MetricsReport,
    pub num_params: usize,
    pub checkpoint: Option<PathBuf>,
}

/// Event sink writing line-delimited JSON; silent without an output directory.
struct EventLog(Option<BufWriter<File>>);

impl EventLog {
    fn emit(&mut self, event: serde_json::Value) -> Result<()> {
        if let Some(w) = &mut self.0 {
            serde_json::to_writer(&mut *w, &event).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for b in items {
        m.match_loss += b.match_loss / n;
        m.dis += b.dis / n;
        m.kl += b.kl / n;
        m.mask += b.mask / n;
        m.total += b.total / n;
    }
    m
}

/// `model` with the auxiliary weights scaled by `min(1, progress / warmup)`.
fn warmed_up(model: &MimConfig, warmup: f64, progress: f64) -> MimConfig {
    let mut m = model.clone();
    if warmup > 0.0 && progress < warmup {
        let f = progress / warmup;
        m.weights.dis *= f;
        m.weights.kl *= f;
        m.weights.mask *= f;
    }
    m
}

fn nan_diagnostic(epoch: usize, batch: usize, examples: &[&MatchExample], b: &LossBreakdown) -> String {
    let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
    format!(
        "non-finite training state at epoch {epoch}, batch {batch}: match {} dis {} kl {} mask {} total {}; labels {labels:?}",
        b.match_loss, b.dis, b.kl, b.mask, b.total
    )
}

/// Trains with Adam on the total loss, evaluating on the validation split
/// after every epoch. With `out` set, writes `train_log.jsonl`,
/// `metrics.csv`, `summary.txt` and `best.ckpt`.
pub fn train(cfg: &RunConfig, corpus: &Corpus, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.train.is_empty() || corpus.valid.is_empty() || corpus.test.is_empty() {
        return Err(Error::Config("train: every split needs at least one example".into()));
    }
    let model = cfg.model();
    let tc = &cfg.train;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let mut log = EventLog(match out {
        Some(dir) => Some(BufWriter::new(File::create(dir.join("train_log.jsonl"))?)),
        None => None,
    });

    let mut params = init_params::<f32>(&model, tc.seed)?;
    let num_params = params.num_scalars();
    let adam = AdamConfig { lr: tc.lr, ..AdamConfig::default() };
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0xD0_D0);
    let use_dropout = model.encoder.dropout_rate > 0.0;
    log.emit(json!({"event": "start", "seed": tc.seed, "params": num_params, "ablation": model.ablation.label()}))?;

    // (valid AUC, epoch, parameters), best first.
    let mut ranked: Vec<(f64, usize, ParamSet<f32>)> = Vec::new();
    let mut epochs = Vec::with_capacity(tc.epochs);
    let mut batch_losses = Vec::new();
    for epoch in 0..tc.epochs {
        let shuffle = tc.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64);
        let mut parts = Vec::new();
        let batches = batch_iter(&corpus.train, tc.batch_size, Some(shuffle));
        let per_epoch = batches.len();
        for (bi, batch) in batches.into_iter().enumerate() {
            params.zero_grads();
            let mut g = Graph::new();
            let rng = if use_dropout { Some(&mut dropout_rng) } else { None };
            let step_model = warmed_up(&model, tc.aux_warmup_epochs, (epoch * per_epoch + bi + 1) as f64 / per_epoch as f64);
            let fwd = forward_batch(&mut g, &params, &step_model, &batch.examples, rng)?;
            if !fwd.breakdown.total.is_finite() {
                let msg = nan_diagnostic(epoch, bi, &batch.examples, &fwd.breakdown);
                log.emit(json!({"event": "abort", "reason": msg}))?;
                return Err(Error::Numerical(msg));
            }
            g.backward(fwd.loss)?;
            g.accumulate_param_grads(&mut params);
            if !params.grads_finite() {
                let msg = nan_diagnostic(epoch, bi, &batch.examples, &fwd.breakdown);
                log.emit(json!({"event": "abort", "reason": format!("gradients: {msg}")}))?;
                return Err(Error::Numerical(msg));
            }
            params.clip_gradients(tc.clip[0], tc.clip[1])?;
            params.adam_step(&adam);
            batch_losses.push(fwd.breakdown.total);
            parts.push(fwd.breakdown);
        }
        let train_loss = mean_breakdown(&parts);
        let valid = evaluate(&params, &model, &corpus.valid, tc.eval_threshold)?;
        log.emit(json!({"event": "epoch", "epoch": epoch, "train": train_loss, "valid": valid}))?;
        let score = valid.auc.unwrap_or(valid.accuracy);
        let pos = ranked.iter().position(|(s, _, _)| score > *s).unwrap_or(ranked.len());
        if pos < tc.best_k {
            ranked.insert(pos, (score, epoch, params.snapshot()));
            ranked.truncate(tc.best_k);
        }
        epochs.push(EpochLog { epoch, train: train_loss, valid });
    }

    let (best, best_epoch) = match ranked.first() {
        Some((_, e, p)) => (p.clone(), Some(*e)),
        None => (params.snapshot(), None),
    };
    let test = if ranked.len() > 1 {
        let reports = ranked
            .iter()
            .map(|(_, _, p)| evaluate(p, &model, &corpus.test, tc.eval_threshold))
            .collect::<Result<Vec<_>>>()?;
        MetricsReport::average(&reports)
    } else {
        evaluate(&best, &model, &corpus.test, tc.eval_threshold)?
    };
    log.emit(json!({"event": "done", "best_epoch": best_epoch, "test": test}))?;

    let mut checkpoint = None;
    if let Some(dir) = out {
        let path = dir.join("best.ckpt");
        save_checkpoint(&path, &best)?;
        checkpoint = Some(path);
        write_metrics_csv(&dir.join("metrics.csv"), &epochs, &test)?;
        fs::write(dir.join("summary.txt"), summary(&model, num_params, best_epoch, &test))?;
    }
    Ok(TrainOutcome { best, best_epoch, epochs, batch_losses, test, num_params, checkpoint })
}

fn write_metrics_csv(path: &Path, epochs: &[EpochLog], test: &MetricsReport) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch,split,{}", MetricsReport::CSV_HEADER)?;
    for e in epochs {
        writeln!(w, "{},valid,{}", e.epoch, e.valid.csv_row())?;
    }
    writeln!(w, "best,test,{}", test.csv_row())?;
    Ok(())
}

/// Human-readable description of a test report.
pub fn summary(model: &MimConfig, num_params: usize, best_epoch: Option<usize>, test: &MetricsReport) -> String {
    let auc = test.auc.map_or("undefined".into(), |a| format!("{a:.4}"));
    format!(
        "model      {}\nparams     {num_params}\nbest epoch {}\ntest n     {}\naccuracy   {:.4}\nauc        {auc}\nf1         {:.4}\n",
        model.ablation.label(),
        best_epoch.map_or("none".into(), |e| e.to_string()),
        test.n_examples,
        test.accuracy,
        test.f1,
    )
}
