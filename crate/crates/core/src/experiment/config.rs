//! Flat `key = value` experiment configuration.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::data::{generate, load_dataset, split_disjoint_classes, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::kv::{parse_grid, KeyValues};
use crate::losses::LossConfig;
use crate::model::{format_trunk, parse_trunk, BackboneConfig, EmbedPooling, Variant};

/// Where images come from: a dataset file or the synthetic generator.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    File(PathBuf),
    Synthetic(SyntheticSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Fraction of classes (lowest ids first) used for training.
    pub train_class_fraction: f64,
    pub variant: Variant,
    pub backbone: BackboneConfig,
    pub loss: LossConfig,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub iterations: usize,
    pub eval_every: usize,
    pub recall_ks: Vec<usize>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::Synthetic(SyntheticSpec::default()),
            train_class_fraction: 0.5,
            variant: Variant::Abe,
            backbone: BackboneConfig::default(),
            loss: LossConfig::default(),
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            iterations: 5000,
            eval_every: 200,
            recall_ks: vec![1, 2, 4, 8],
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

const SYNTH_PREFIX: &str = "synth.";

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_overrides(text, &[])
    }

    /// Parse `text`, then replace the given keys before interpretation.
    pub fn parse_with_overrides(text: &str, overrides: &[(&str, &str)]) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        for (k, v) in overrides {
            kv.set(k, v);
        }
        let cfg = Self::from_kv(&mut kv);
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_kv(kv: &mut KeyValues) -> Self {
        let d = ExperimentConfig::default();
        let db = &d.backbone;
        let dl = d.loss;
        let data = match kv.take_raw("dataset") {
            Some(path) => {
                if SyntheticSpec::mentioned(kv, SYNTH_PREFIX) {
                    kv.error("`dataset` and `synth.*` keys are mutually exclusive");
                }
                DataSource::File(PathBuf::from(path))
            }
            None => DataSource::Synthetic(SyntheticSpec::from_kv(kv, SYNTH_PREFIX)),
        };
        let variant = match kv.take_raw("variant") {
            None => d.variant,
            Some(raw) => raw.parse().unwrap_or_else(|e: Error| {
                kv.error(e.to_string());
                d.variant
            }),
        };
        let trunk = match kv.take_raw("trunk") {
            None => db.trunk.clone(),
            Some(raw) => parse_trunk(&raw).unwrap_or_else(|e| {
                kv.error(e.to_string());
                db.trunk.clone()
            }),
        };
        let pooling: EmbedPooling = match kv.take_raw("pooling") {
            None => db.pooling,
            Some(raw) => raw.parse().unwrap_or_else(|e: Error| {
                kv.error(e.to_string());
                db.pooling
            }),
        };
        let input_shape = match &data {
            DataSource::Synthetic(s) => [s.channels, s.height, s.width],
            DataSource::File(_) => {
                let c = kv.take_or("input_channels", db.input_shape[0]);
                let (h, w) = match kv.take_raw("input_grid") {
                    None => (db.input_shape[1], db.input_shape[2]),
                    Some(raw) => parse_grid(&raw).unwrap_or_else(|| {
                        kv.error(format!("cannot parse input_grid `{raw}`; expected HxW"));
                        (db.input_shape[1], db.input_shape[2])
                    }),
                };
                [c, h, w]
            }
        };
        let backbone = BackboneConfig {
            input_shape,
            trunk,
            branch_point: kv.take_or("branch_point", db.branch_point),
            attention_depth: kv.take_or("attention_depth", db.attention_depth),
            attention_kernel: kv.take_or("attention_kernel", db.attention_kernel),
            learners: kv.take_or("learners", db.learners),
            embedding_dim: kv.take_or("embedding_dim", db.embedding_dim),
            normalize: kv.take_or("normalize", db.normalize),
            pooling,
        };
        ExperimentConfig {
            data,
            train_class_fraction: kv.take_or("train_class_fraction", d.train_class_fraction),
            variant,
            backbone,
            loss: LossConfig {
                contrastive_margin: kv.take_or("margin_contrastive", dl.contrastive_margin),
                divergence_margin: kv.take_or("margin_div", dl.divergence_margin),
                lambda_div: kv.take_or("lambda_div", dl.lambda_div),
            },
            batch_size: kv.take_or("batch_size", d.batch_size),
            learning_rate: kv.take_or("learning_rate", d.learning_rate),
            momentum: kv.take_or("momentum", d.momentum),
            iterations: kv.take_or("iterations", d.iterations),
            eval_every: kv.take_or("eval_every", d.eval_every),
            recall_ks: kv.take_list("recall_ks").unwrap_or(d.recall_ks),
            seed: kv.take_or("seed", d.seed),
            out_dir: kv.take_raw("out_dir").map_or(d.out_dir, PathBuf::from),
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let DataSource::Synthetic(s) = &self.data {
            out.extend(s.violations());
        }
        out.extend(self.backbone.violations(self.variant));
        out.extend(self.loss.violations());
        if self.batch_size == 0 || self.batch_size % 4 != 0 {
            out.push(format!("batch_size {} must be a positive multiple of 4", self.batch_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            out.push(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.iterations > 0 && (self.eval_every == 0 || self.eval_every > self.iterations) {
            out.push(format!(
                "eval_every {} must lie in 1..={} (iterations)",
                self.eval_every, self.iterations
            ));
        }
        if !self.recall_ks.contains(&1) || self.recall_ks.contains(&0) {
            out.push("recall_ks must list positive integers including 1".into());
        }
        if !(self.train_class_fraction > 0.0 && self.train_class_fraction < 1.0) {
            out.push(format!("train_class_fraction must lie in (0, 1), got {}", self.train_class_fraction));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Canonical text; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let b = &self.backbone;
        let mut s = String::new();
        match &self.data {
            DataSource::File(p) => {
                let _ = writeln!(s, "dataset = {}", p.display());
                let _ = writeln!(s, "input_channels = {}", b.input_shape[0]);
                let _ = writeln!(s, "input_grid = {}x{}", b.input_shape[1], b.input_shape[2]);
            }
            DataSource::Synthetic(spec) => s.push_str(&spec.to_text(SYNTH_PREFIX)),
        }
        let ks: Vec<String> = self.recall_ks.iter().map(ToString::to_string).collect();
        let lines = [
            ("train_class_fraction", self.train_class_fraction.to_string()),
            ("variant", self.variant.to_string()),
            ("trunk", format_trunk(&b.trunk)),
            ("branch_point", b.branch_point.to_string()),
            ("attention_depth", b.attention_depth.to_string()),
            ("attention_kernel", b.attention_kernel.to_string()),
            ("learners", b.learners.to_string()),
            ("embedding_dim", b.embedding_dim.to_string()),
            ("normalize", b.normalize.to_string()),
            ("pooling", b.pooling.to_string()),
            ("margin_contrastive", self.loss.contrastive_margin.to_string()),
            ("margin_div", self.loss.divergence_margin.to_string()),
            ("lambda_div", self.loss.lambda_div.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("momentum", self.momentum.to_string()),
            ("iterations", self.iterations.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("recall_ks", ks.join(",")),
            ("seed", self.seed.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
        ];
        for (k, v) in lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Every image of the configured source.
    pub fn load_data(&self) -> Result<Dataset> {
        let ds = match &self.data {
            DataSource::File(p) => load_dataset(p).map_err(|e| match e {
                Error::Io(io) => Error::Dataset(format!("{}: {io}", p.display())),
                other => other,
            })?,
            DataSource::Synthetic(spec) => generate(spec)?,
        };
        if ds.image_shape() != self.backbone.input_shape {
            return Err(Error::config(format!(
                "dataset images are {:?} but the model expects {:?}",
                ds.image_shape(),
                self.backbone.input_shape
            )));
        }
        Ok(ds)
    }

    /// `(train, test)` with disjoint classes.
    pub fn load_split(&self) -> Result<(Dataset, Dataset)> {
        split_disjoint_classes(&self.load_data()?, self.train_class_fraction)
    }
}
