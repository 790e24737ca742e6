//! SGD training loop with periodic retrieval evaluation.

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use crate::autodiff::{OptimizerState, Tape};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{
    cosine_pair_stats, embed_dataset, ensemble_distance_matrix_threaded, recall_from_distances, EmbeddingSet,
    MetricsRecord, PairKind,
};
use crate::losses::{total_loss, LossBreakdown, LossConfig};
use crate::model::EnsembleModel;
use crate::sampler::{LabeledDatasetView, PairBatch};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const CONFIG_FILE: &str = "config.cfg";
/// Images per forward pass when embedding a whole split.
pub const EMBED_BATCH: usize = 128;
const STATS_BINS: usize = 20;

const SAMPLER_STREAM: u64 = 1;
const PROBE_STREAM: u64 = 2;

/// Independent seed for one consumer of the run's randomness.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Fixed pair batch from the evaluated split on which logged loss terms are
/// measured.
pub fn probe_batch(cfg: &ExperimentConfig, split: &Dataset) -> Result<PairBatch> {
    LabeledDatasetView::new(split.labels(), stream_seed(cfg.seed, PROBE_STREAM))?.build_batch(split, cfg.batch_size)
}

/// Loss terms of a forward-only pass over `batch`.
pub fn probe_loss(model: &EnsembleModel, batch: &PairBatch, loss: &LossConfig) -> Result<LossBreakdown> {
    let mut tape = Tape::inference();
    let params = model.params().register_constant(&mut tape);
    let x = tape.constant(batch.images.clone());
    let all: Vec<usize> = (0..model.learners()).collect();
    let trace = model.trace(&mut tape, &params, x, &all)?;
    Ok(total_loss(&mut tape, &trace.embeddings, &batch.pairs, loss)?.1)
}

fn mean_std(e: &EmbeddingSet, kind: PairKind) -> Result<(f64, f64)> {
    let s = cosine_pair_stats(e, kind, STATS_BINS)?;
    Ok((s.mean, s.std))
}

/// Metrics snapshot of `model` on `split`.
pub fn evaluate(
    model: &EnsembleModel,
    split: &Dataset,
    probe: &PairBatch,
    loss: &LossConfig,
    ks: &[usize],
    iteration: usize,
    threads: usize,
) -> Result<MetricsRecord> {
    let e = embed_dataset(model, split, EMBED_BATCH)?;
    if !e.data().iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical(format!("iteration {iteration}: non-finite embeddings")));
    }
    let mut recall = std::collections::BTreeMap::new();
    let dist = ensemble_distance_matrix_threaded(&e, threads)?;
    recall.insert("ensemble".to_string(), recall_from_distances(&dist, e.labels(), ks)?);
    for m in 0..e.learners() {
        let single = e.learner(m)?;
        let dist = ensemble_distance_matrix_threaded(&single, threads)?;
        recall.insert(format!("learner_{m}"), recall_from_distances(&dist, e.labels(), ks)?);
    }
    let (cos_self_mean, cos_self_std) = if e.learners() > 1 {
        let (m, s) = mean_std(&e, PairKind::SelfPair)?;
        (Some(m), Some(s))
    } else {
        (None, None)
    };
    let (cos_pos_mean, cos_pos_std) = mean_std(&e, PairKind::Positive)?;
    let (cos_neg_mean, cos_neg_std) = mean_std(&e, PairKind::Negative)?;
    let br = probe_loss(model, probe, loss)?;
    Ok(MetricsRecord {
        iter: iteration,
        recall,
        loss_total: br.total,
        loss_metric: br.metric,
        loss_div: br.divergence,
        cos_self_mean,
        cos_self_std,
        cos_pos_mean,
        cos_pos_std,
        cos_neg_mean,
        cos_neg_std,
    })
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    /// Index into `records` of the best ensemble Recall@1 (earliest on ties).
    pub best: usize,
    pub model: EnsembleModel,
}

impl TrainOutcome {
    pub fn best_record(&self) -> &MetricsRecord {
        &self.records[self.best]
    }

    pub fn final_record(&self) -> &MetricsRecord {
        self.records.last().expect("at least one record")
    }
}

struct RunFiles<'a> {
    dir: &'a Path,
    metrics: File,
}

impl<'a> RunFiles<'a> {
    fn create(dir: &'a Path, cfg: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
        let metrics = File::create(dir.join(METRICS_FILE))?;
        Ok(RunFiles { dir, metrics })
    }

    fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        let mut line = serde_json::to_string(record).map_err(|e| Error::Internal(e.to_string()))?;
        line.push('\n');
        self.metrics.write_all(line.as_bytes())?;
        self.metrics.flush()?;
        Ok(())
    }
}

/// Run the configured experiment. When `out_dir` is given, writes
/// `config.cfg`, `metrics.jsonl` (one line per evaluation), `best.ckpt` and
/// `last.ckpt` there. `progress` sees each record as it is produced.
pub fn train(
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_split, test_split) = cfg.load_split()?;
    let max_k = test_split.len() - 1;
    if let Some(&k) = cfg.recall_ks.iter().find(|&&k| k > max_k) {
        return Err(Error::config(format!("recall K={k} exceeds the {max_k} retrievable test samples")));
    }
    let mut files = out_dir.map(|d| RunFiles::create(d, cfg)).transpose()?;
    let mut model = EnsembleModel::init(cfg.variant, cfg.backbone.clone(), cfg.seed)?;
    let mut opt = OptimizerState::new(model.params().tensors(), cfg.learning_rate, cfg.momentum)?;
    let mut sampler = LabeledDatasetView::new(train_split.labels(), stream_seed(cfg.seed, SAMPLER_STREAM))?;
    let probe = probe_batch(cfg, &test_split)?;
    let all: Vec<usize> = (0..model.learners()).collect();

    let mut records: Vec<MetricsRecord> = Vec::new();
    let mut best = 0;
    let mut snapshot = |it: usize,
                        model: &EnsembleModel,
                        opt: &OptimizerState,
                        records: &mut Vec<MetricsRecord>,
                        best: &mut usize|
     -> Result<()> {
        let record = evaluate(model, &test_split, &probe, &cfg.loss, &cfg.recall_ks, it, 1)?;
        let improved = records.is_empty() || record.ensemble_recall(1) > records[*best].ensemble_recall(1);
        if let Some(f) = files.as_mut() {
            f.append(&record)?;
            if improved {
                Checkpoint::capture(cfg, model, Some(opt), it).save(f.dir.join(BEST_CHECKPOINT))?;
            }
        }
        if improved {
            *best = records.len();
        }
        progress(&record);
        records.push(record);
        Ok(())
    };

    snapshot(0, &model, &opt, &mut records, &mut best)?;
    for it in 1..=cfg.iterations {
        let batch = sampler.build_batch(&train_split, cfg.batch_size)?;
        let mut tape = Tape::new();
        let vars = model.params().register(&mut tape);
        let x = tape.constant(batch.images);
        let trace = model.trace(&mut tape, &vars, x, &all)?;
        let (loss, br) = total_loss(&mut tape, &trace.embeddings, &batch.pairs, &cfg.loss)?;
        if !br.total.is_finite() {
            return Err(Error::Numerical(format!(
                "iteration {it}: non-finite loss (total {}, metric {:?}, divergence {})",
                br.total, br.metric, br.divergence
            )));
        }
        let mut grads = tape.backward(loss)?;
        model.params_mut().absorb_grads(&vars, &mut grads)?;
        opt.step(model.params_mut().tensors_mut())?;
        if it % cfg.eval_every == 0 || it == cfg.iterations {
            snapshot(it, &model, &opt, &mut records, &mut best)?;
        }
    }
    if let Some(f) = files.as_ref() {
        Checkpoint::capture(cfg, &model, Some(&opt), cfg.iterations).save(f.dir.join(LAST_CHECKPOINT))?;
    }
    Ok(TrainOutcome { records, best, model })
}

/// Parse a `metrics.jsonl` log.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Dataset(format!("metrics line {}: {e}", i + 1))))
        .collect()
}
