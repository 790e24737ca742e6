//! Subcommands of the `abe` binary. Each writes its report to `out` and
//! returns the produced artifact so callers can inspect it.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::checkpoint::Checkpoint;
use super::config::{DataSource, ExperimentConfig};
use super::train::{evaluate, probe_batch, train, TrainOutcome, EMBED_BATCH};
use crate::data::{generate, load_dataset, save_dataset, split_disjoint_classes, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::evaluation::{attention_summary, cosine_pair_stats, embed_dataset, CosineStats, MetricsRecord, PairKind};
use crate::model::{EnsembleModel, Variant};

/// Default bin count of exported cosine histograms.
pub const HISTOGRAM_BINS: usize = 40;
/// File name of the comparison table inside the output directory.
pub const COMPARE_FILE: &str = "compare.csv";

fn say(out: &mut dyn Write, text: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", text.as_ref())?;
    Ok(())
}

/// Generate a synthetic dataset from spec text and save it to `path`.
pub fn cmd_generate(spec_text: &str, seed: Option<u64>, path: &Path, out: &mut dyn Write) -> Result<Dataset> {
    let mut spec = SyntheticSpec::parse(spec_text)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let ds = generate(&spec)?;
    save_dataset(path, &ds)?;
    let [n, c, h, w] = ds.shape();
    say(out, format!("wrote {}: N={n} C={c} H={h} W={w}", path.display()))?;
    let census: Vec<String> = ds.census().iter().map(|(k, v)| format!("{k}:{v}")).collect();
    say(out, format!("census {}", census.join(" ")))?;
    Ok(ds)
}

fn record_line(r: &MetricsRecord) -> String {
    let mut s = format!("iter {:>6}", r.iter);
    if let Some(ens) = r.recall.get("ensemble") {
        for (k, v) in ens {
            let _ = write!(s, "  R@{k} {v:.4}");
        }
    }
    let _ = write!(s, "  loss {:.4} (div {:.4})", r.loss_total, r.loss_div);
    if let Some(c) = r.cos_self_mean {
        let _ = write!(s, "  cos_self {c:.3}");
    }
    s
}

/// Train per `cfg`, writing artifacts to `cfg.out_dir`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<TrainOutcome> {
    let mut io_err = None;
    let outcome = train(cfg, Some(&cfg.out_dir), &mut |r| {
        if let Err(e) = writeln!(out, "{}", record_line(r)) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let best = outcome.best_record();
    say(out, format!("best {}", record_line(best)))?;
    let json = serde_json::to_string(best).map_err(|e| Error::Internal(e.to_string()))?;
    say(out, json)?;
    Ok(outcome)
}

/// Model restored from a checkpoint plus the test split it is evaluated on.
pub struct Restored {
    pub config: ExperimentConfig,
    pub model: EnsembleModel,
    pub iteration: usize,
    pub test: Dataset,
}

/// Load `ckpt` and the test split of `dataset` (or of the data source named
/// in the checkpoint's config).
pub fn restore(ckpt: &Path, dataset: Option<&Path>) -> Result<Restored> {
    let ck = Checkpoint::load(ckpt)?;
    let (mut config, model) = ck.restore()?;
    let iteration = ck.iteration()?;
    let all = match dataset {
        Some(p) => {
            config.data = DataSource::File(p.to_path_buf());
            load_dataset(p)?
        }
        None => config.load_data()?,
    };
    let want = config.backbone.input_shape;
    if all.image_shape() != want {
        return Err(Error::config(format!(
            "dataset images are {:?} but the checkpoint model expects {want:?}",
            all.image_shape()
        )));
    }
    let (_, test) = split_disjoint_classes(&all, config.train_class_fraction)?;
    Ok(Restored {
        config,
        model,
        iteration,
        test,
    })
}

/// Evaluate a checkpoint on the test split. `ks` defaults to the config's
/// list; the record is written to `<export>/eval.json` when given.
pub fn cmd_eval(
    ckpt: &Path,
    dataset: Option<&Path>,
    ks: Option<&[usize]>,
    threads: usize,
    export: Option<&Path>,
    out: &mut dyn Write,
) -> Result<MetricsRecord> {
    let r = restore(ckpt, dataset)?;
    let ks = ks.unwrap_or(&r.config.recall_ks);
    let probe = probe_batch(&r.config, &r.test)?;
    let record = evaluate(&r.model, &r.test, &probe, &r.config.loss, ks, r.iteration, threads)?;
    for (scope, map) in &record.recall {
        let cells: Vec<String> = map.iter().map(|(k, v)| format!("R@{k} {v:.4}")).collect();
        say(out, format!("{scope:<12} {}", cells.join("  ")))?;
    }
    let json = serde_json::to_string(&record).map_err(|e| Error::Internal(e.to_string()))?;
    if let Some(dir) = export {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("eval.json"), format!("{json}\n"))?;
    }
    say(out, json)?;
    Ok(record)
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub variant: Variant,
    pub learners: usize,
    pub lambda_div: f64,
    pub ensemble: Vec<(usize, f64)>,
    /// Mean and population std of individual learner recall per K.
    pub individual: Vec<(usize, f64, f64)>,
    pub params: usize,
    pub flops: usize,
}

impl CompareRow {
    fn from_record(cfg: &ExperimentConfig, model: &EnsembleModel, r: &MetricsRecord) -> Self {
        let ensemble = r.recall.get("ensemble").map(|m| m.iter().map(|(&k, &v)| (k, v)).collect()).unwrap_or_default();
        let individual = cfg
            .recall_ks
            .iter()
            .map(|&k| {
                let v = r.learner_recalls(k);
                let n = v.len().max(1) as f64;
                let mean = v.iter().sum::<f64>() / n;
                let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                (k, mean, var.sqrt())
            })
            .collect();
        CompareRow {
            variant: cfg.variant,
            learners: cfg.backbone.learners,
            lambda_div: cfg.loss.lambda_div,
            ensemble,
            individual,
            params: model.param_count(),
            flops: model.flop_count(),
        }
    }
}

/// CSV with a header row and one row per entry of `rows`.
pub fn compare_csv(ks: &[usize], rows: &[CompareRow]) -> String {
    let mut s = String::from("variant,learners,lambda_div");
    for k in ks {
        let _ = write!(s, ",recall@{k},individual_mean@{k},individual_std@{k}");
    }
    s.push_str(",params,flops\n");
    for row in rows {
        let _ = write!(s, "{},{},{}", row.variant, row.learners, row.lambda_div);
        for &k in ks {
            let e = row.ensemble.iter().find(|p| p.0 == k).map_or(f64::NAN, |p| p.1);
            let (m, sd) = row.individual.iter().find(|p| p.0 == k).map_or((f64::NAN, f64::NAN), |p| (p.1, p.2));
            let _ = write!(s, ",{e},{m},{sd}");
        }
        let _ = writeln!(s, ",{},{}", row.params, row.flops);
    }
    s
}

/// Config used for `variant` in a comparison: `single` gets one learner,
/// and every variant except `abe` trains without divergence loss unless
/// `div_all`.
pub fn variant_config(base: &ExperimentConfig, variant: Variant, div_all: bool) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.variant = variant;
    if variant == Variant::Single {
        cfg.backbone.learners = 1;
    }
    if variant != Variant::Abe && !div_all {
        cfg.loss.lambda_div = 0.0;
    }
    cfg.out_dir = base.out_dir.join(variant.name());
    cfg
}

/// Train each variant in order and tabulate best-checkpoint results. A
/// failing variant is reported and skipped.
pub fn cmd_compare(
    base: &ExperimentConfig,
    variants: &[Variant],
    div_all: bool,
    out: &mut dyn Write,
) -> Result<Vec<CompareRow>> {
    let mut rows = Vec::new();
    for &v in variants {
        let cfg = variant_config(base, v, div_all);
        say(out, format!("== {v} (M={}, lambda_div={})", cfg.backbone.learners, cfg.loss.lambda_div))?;
        match train(&cfg, Some(&cfg.out_dir), &mut |_| {}) {
            Ok(o) => {
                let row = CompareRow::from_record(&cfg, &o.model, o.best_record());
                say(out, format!("   best {}", record_line(o.best_record())))?;
                rows.push(row);
            }
            Err(e) => say(out, format!("   {v} failed: {e}"))?,
        }
    }
    fs::create_dir_all(&base.out_dir)?;
    let csv = compare_csv(&base.recall_ks, &rows);
    fs::write(base.out_dir.join(COMPARE_FILE), &csv)?;
    say(out, "")?;
    say(out, format!("{:<12} {:>2} {:>8} {:>16} {:>10} {:>10}", "variant", "M", "R@1", "individual R@1", "params", "flops"))?;
    for row in &rows {
        let ens = row.ensemble.iter().find(|p| p.0 == 1).map_or(f64::NAN, |p| p.1);
        let (m, sd) = row.individual.iter().find(|p| p.0 == 1).map_or((f64::NAN, f64::NAN), |p| (p.1, p.2));
        say(
            out,
            format!(
                "{:<12} {:>2} {:>8.4} {:>9.4}±{:<6.4} {:>10} {:>10}",
                row.variant.name(),
                row.learners,
                ens,
                m,
                sd,
                row.params,
                row.flops
            ),
        )?;
    }
    Ok(rows)
}

/// Cosine statistics written by [`cmd_histogram`]; `self_pairs` is absent
/// for single-learner models.
pub struct HistogramReport {
    pub positive: CosineStats,
    pub negative: CosineStats,
    pub self_pairs: Option<CosineStats>,
    pub files: Vec<PathBuf>,
}

fn prefixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(suffix);
    prefix.with_file_name(name)
}

/// Write `{prefix}_pos.csv`, `{prefix}_neg.csv` and, for ensembles,
/// `{prefix}_self.csv`.
pub fn cmd_histogram(
    ckpt: &Path,
    dataset: Option<&Path>,
    prefix: &Path,
    bins: usize,
    out: &mut dyn Write,
) -> Result<HistogramReport> {
    let r = restore(ckpt, dataset)?;
    let e = embed_dataset(&r.model, &r.test, EMBED_BATCH)?;
    let positive = cosine_pair_stats(&e, PairKind::Positive, bins)?;
    let negative = cosine_pair_stats(&e, PairKind::Negative, bins)?;
    let self_pairs = if e.learners() > 1 {
        Some(cosine_pair_stats(&e, PairKind::SelfPair, bins)?)
    } else {
        say(out, "warning: single learner; self-pair histogram omitted")?;
        None
    };
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut files = Vec::new();
    for (suffix, stats) in [("_pos.csv", Some(&positive)), ("_neg.csv", Some(&negative)), ("_self.csv", self_pairs.as_ref())] {
        if let Some(s) = stats {
            let path = prefixed(prefix, suffix);
            fs::write(&path, s.histogram.to_csv())?;
            files.push(path);
        }
    }
    let mut line = format!("mean cosine: positive {:.4}  negative {:.4}", positive.mean, negative.mean);
    if let Some(s) = &self_pairs {
        let _ = write!(line, "  self {:.4}", s.mean);
    }
    say(out, line)?;
    Ok(HistogramReport {
        positive,
        negative,
        self_pairs,
        files,
    })
}

/// Binary greyscale PGM; values are clamped to `[0, 1]` and scaled by 255.
pub fn encode_pgm(h: usize, w: usize, values: &[f64]) -> Vec<u8> {
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
    bytes
}

/// Write `mask_s{id}_l{m}.pgm` (channel-mean mask of one sample) for each
/// requested sample and learner, plus `mean_l{m}.pgm` averaged over the
/// requested samples.
pub fn cmd_masks(
    ckpt: &Path,
    dataset: Option<&Path>,
    samples: &[usize],
    dir: &Path,
    out: &mut dyn Write,
) -> Result<Vec<PathBuf>> {
    let r = restore(ckpt, dataset)?;
    if !r.model.variant().has_attention() {
        return Err(Error::usage(format!("variant {} has no attention masks", r.model.variant())));
    }
    if samples.is_empty() {
        return Err(Error::usage("no sample ids given"));
    }
    if let Some(&bad) = samples.iter().find(|&&i| i >= r.test.len()) {
        return Err(Error::usage(format!("sample id {bad} out of range for {} test samples", r.test.len())));
    }
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut write = |name: String, h: usize, w: usize, v: &[f64]| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, encode_pgm(h, w, v))?;
        files.push(path);
        Ok(())
    };
    let m = r.model.learners();
    for &id in samples {
        let x = r.test.batch(&[id])?;
        let s = attention_summary(&r.model, &x)?;
        let (h, w) = (s.shape()[1], s.shape()[2]);
        for l in 0..m {
            write(format!("mask_s{id}_l{l}.pgm"), h, w, &s.data()[l * h * w..(l + 1) * h * w])?;
        }
    }
    let x = r.test.batch(samples)?;
    let s = attention_summary(&r.model, &x)?;
    let (h, w) = (s.shape()[1], s.shape()[2]);
    for l in 0..m {
        write(format!("mean_l{l}.pgm"), h, w, &s.data()[l * h * w..(l + 1) * h * w])?;
    }
    say(out, format!("wrote {} mask images ({h}x{w}) to {}", files.len(), dir.display()))?;
    Ok(files)
}
