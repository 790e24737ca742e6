//! Ensemble embedding architectures over a small convolutional backbone.
//!
//! Every variant is assembled from the same pieces: a spatial extractor `S`
//! (trunk layers before the branch point), a global embedding network `G`
//! (the remaining trunk layers, pooling, and a linear projection), and for
//! attention variants a shared attention trunk `C` followed by one 1x1
//! convolution + sigmoid head per learner. Variants differ only in which of
//! these pieces are replicated per learner.

mod config;
mod params;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{format_trunk, parse_trunk, BackboneConfig, EmbedPooling, LayerSpec, Variant};
pub use params::{ParamId, ParamStore};

use crate::autodiff::{Tape, Var, L2_EPS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    relu: bool,
}

#[derive(Clone, Debug, PartialEq)]
enum Stage {
    Conv(Conv),
    Pool,
}

#[derive(Clone, Debug, PartialEq)]
struct Global {
    stages: Vec<Stage>,
    embed_weight: ParamId,
    embed_bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Attention {
    trunk: Vec<Conv>,
    heads: Vec<Conv>,
}

/// Soft attention mask with the shape of `S(x)`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub values: Tensor,
}

/// Output of one traced forward pass.
pub struct Trace {
    pub embeddings: Vec<Var>,
    pub masks: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleModel {
    variant: Variant,
    config: BackboneConfig,
    params: ParamStore,
    spatial: Vec<Vec<Stage>>,
    global: Vec<Global>,
    attention: Option<Attention>,
}

fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = glorot_bound(fan_in, fan_out);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Half-width of the Glorot-uniform interval.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

struct Builder<'a> {
    rng: ChaCha8Rng,
    store: &'a mut ParamStore,
}

impl Builder<'_> {
    fn conv(&mut self, prefix: &str, in_c: usize, out_c: usize, kernel: usize, relu: bool) -> Conv {
        let fan_in = in_c * kernel * kernel;
        let fan_out = out_c * kernel * kernel;
        let w = glorot(&mut self.rng, &[out_c, in_c, kernel, kernel], fan_in, fan_out);
        let weight = self.store.add(format!("{prefix}.weight"), w);
        let bias = self.store.add(format!("{prefix}.bias"), Tensor::zeros(&[out_c]));
        Conv { weight, bias, relu }
    }

    fn stages(&mut self, prefix: &str, cfg: &BackboneConfig, range: std::ops::Range<usize>) -> Vec<Stage> {
        let shapes = cfg.trunk_shapes();
        range
            .map(|i| match cfg.trunk[i] {
                LayerSpec::Conv { channels, kernel, relu } => {
                    Stage::Conv(self.conv(&format!("{prefix}.{i}"), shapes[i][0], channels, kernel, relu))
                }
                LayerSpec::MaxPool => Stage::Pool,
            })
            .collect()
    }

    fn global(&mut self, prefix: &str, cfg: &BackboneConfig) -> Global {
        let stages = self.stages(prefix, cfg, cfg.branch_point..cfg.trunk.len());
        let (fan_in, fan_out) = (cfg.embed_input_dim(), cfg.learner_dim());
        let w = glorot(&mut self.rng, &[fan_in, fan_out], fan_in, fan_out);
        let embed_weight = self.store.add(format!("{prefix}.embed.weight"), w);
        let embed_bias = self.store.add(format!("{prefix}.embed.bias"), Tensor::zeros(&[fan_out]));
        Global {
            stages,
            embed_weight,
            embed_bias,
        }
    }
}

impl EnsembleModel {
    /// Glorot-uniform weights, zero biases, deterministic in `seed`.
    pub fn init(variant: Variant, config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate(variant)?;
        let m = config.learners;
        let mut params = ParamStore::default();
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store: &mut params,
        };
        let spatial = if variant == Variant::MTails {
            (0..m).map(|k| b.stages(&format!("s{k}"), &config, 0..config.branch_point)).collect()
        } else {
            vec![b.stages("s", &config, 0..config.branch_point)]
        };
        let attention = variant.has_attention().then(|| {
            let c = config.spatial_shape()[0];
            let k = config.attention_kernel;
            let trunk = (0..config.attention_depth)
                .map(|i| b.conv(&format!("att.trunk.{i}"), c, c, k, true))
                .collect();
            let heads = (0..m).map(|h| b.conv(&format!("att.head{h}"), c, c, 1, false)).collect();
            Attention { trunk, heads }
        });
        let global = if matches!(variant, Variant::MHeads | Variant::MHeadsAtt) {
            (0..m).map(|k| b.global(&format!("g{k}"), &config)).collect()
        } else {
            vec![b.global("g", &config)]
        };
        Ok(EnsembleModel {
            variant,
            config,
            params,
            spatial,
            global,
            attention,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn learners(&self) -> usize {
        self.config.learners
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Parameter ids used by the spatial extractor of learner `m`.
    pub fn spatial_param_ids(&self, m: usize) -> Vec<ParamId> {
        let stages = &self.spatial[if self.spatial.len() == 1 { 0 } else { m }];
        stage_ids(stages)
    }

    /// Parameter ids used by the global embedding network of learner `m`.
    pub fn global_param_ids(&self, m: usize) -> Vec<ParamId> {
        let g = &self.global[if self.global.len() == 1 { 0 } else { m }];
        let mut ids = stage_ids(&g.stages);
        ids.extend([g.embed_weight, g.embed_bias]);
        ids
    }

    /// Parameter ids of the shared attention trunk.
    pub fn attention_trunk_ids(&self) -> Vec<ParamId> {
        self.attention
            .as_ref()
            .map(|a| a.trunk.iter().flat_map(|c| [c.weight, c.bias]).collect())
            .unwrap_or_default()
    }

    /// Parameter ids of learner `m`'s attention head.
    pub fn attention_head_ids(&self, m: usize) -> Vec<ParamId> {
        self.attention
            .as_ref()
            .and_then(|a| a.heads.get(m))
            .map(|c| vec![c.weight, c.bias])
            .unwrap_or_default()
    }

    /// Exact number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Multiply-accumulates per forward image.
    pub fn flop_count(&self) -> usize {
        flop_count(self.variant, &self.config)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        let want = self.config.input_shape;
        if s.len() != 4 || s[1..] != want {
            return Err(Error::dim(format!(
                "input shape {s:?} does not match [B, {}, {}, {}]",
                want[0], want[1], want[2]
            )));
        }
        Ok(())
    }

    fn check_learner(&self, m: usize) -> Result<()> {
        if m >= self.config.learners {
            return Err(Error::usage(format!(
                "learner index {m} out of range for {} learners",
                self.config.learners
            )));
        }
        Ok(())
    }

    fn run_conv(tape: &mut Tape, p: &[Var], conv: &Conv, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p[conv.weight.0], p[conv.bias.0])?;
        if conv.relu {
            tape.relu(y)
        } else {
            Ok(y)
        }
    }

    fn run_stages(tape: &mut Tape, p: &[Var], stages: &[Stage], mut x: Var) -> Result<Var> {
        for stage in stages {
            x = match stage {
                Stage::Conv(c) => Self::run_conv(tape, p, c, x)?,
                Stage::Pool => tape.max_pool2d(x)?,
            };
        }
        Ok(x)
    }

    fn run_global(&self, tape: &mut Tape, p: &[Var], g: &Global, x: Var) -> Result<Var> {
        let h = Self::run_stages(tape, p, &g.stages, x)?;
        let pooled = match self.config.pooling {
            EmbedPooling::Flatten => tape.flatten(h)?,
            EmbedPooling::Average => tape.global_avg_pool(h)?,
        };
        let e = tape.linear(pooled, p[g.embed_weight.0], p[g.embed_bias.0])?;
        if self.config.normalize {
            tape.l2_normalize(e, L2_EPS)
        } else {
            Ok(e)
        }
    }

    /// Record the forward pass of the requested learners on `tape`. `params`
    /// are the tape handles of this model's parameters (see
    /// [`ParamStore::register`]); `x` is an image batch `[B,C,H,W]`.
    /// `S(x)` and the attention trunk are evaluated once when shared.
    pub fn trace(&self, tape: &mut Tape, params: &[Var], x: Var, learners: &[usize]) -> Result<Trace> {
        if params.len() != self.params.len() {
            return Err(Error::usage("parameter handles do not belong to this model"));
        }
        self.check_input(tape.value(x))?;
        for &m in learners {
            self.check_learner(m)?;
        }
        let shared_s = if self.spatial.len() == 1 {
            Some(Self::run_stages(tape, params, &self.spatial[0], x)?)
        } else {
            None
        };
        let context = match (&self.attention, shared_s) {
            (Some(att), Some(s)) => {
                let mut c = s;
                for conv in &att.trunk {
                    c = Self::run_conv(tape, params, conv, c)?;
                }
                Some(c)
            }
            _ => None,
        };
        let mut embeddings = Vec::with_capacity(learners.len());
        let mut masks = Vec::new();
        for &m in learners {
            let s = match shared_s {
                Some(s) => s,
                None => Self::run_stages(tape, params, &self.spatial[m], x)?,
            };
            let attended = match (&self.attention, context) {
                (Some(att), Some(c)) => {
                    let logits = Self::run_conv(tape, params, &att.heads[m], c)?;
                    let mask = tape.sigmoid(logits)?;
                    masks.push(mask);
                    tape.mul(s, mask)?
                }
                _ => s,
            };
            let g = &self.global[if self.global.len() == 1 { 0 } else { m }];
            embeddings.push(self.run_global(tape, params, g, attended)?);
        }
        Ok(Trace { embeddings, masks })
    }

    fn infer(&self, x: &Tensor, learners: &[usize]) -> Result<(Tape, Trace)> {
        self.check_input(x)?;
        let mut tape = Tape::inference();
        let p = self.params.register_constant(&mut tape);
        let xv = tape.constant(x.clone());
        let trace = self.trace(&mut tape, &p, xv, learners)?;
        Ok((tape, trace))
    }

    /// Embedding `[B, D/M]` of learner `m` for an image batch `[B,C,H,W]`.
    pub fn forward_learner(&self, x: &Tensor, m: usize) -> Result<Tensor> {
        self.check_learner(m)?;
        let (tape, trace) = self.infer(x, &[m])?;
        Ok(tape.value(trace.embeddings[0]).clone())
    }

    /// Embeddings of every learner, sharing `S(x)` where the variant does.
    pub fn forward_all(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let all: Vec<usize> = (0..self.learners()).collect();
        let (tape, trace) = self.infer(x, &all)?;
        Ok(trace.embeddings.iter().map(|v| tape.value(*v).clone()).collect())
    }

    /// Per-learner attention masks `[B, C', H', W']` (attention variants only).
    pub fn attention_masks(&self, x: &Tensor) -> Result<Vec<AttentionMask>> {
        if !self.variant.has_attention() {
            return Err(Error::usage(format!("variant {} has no attention module", self.variant)));
        }
        let all: Vec<usize> = (0..self.learners()).collect();
        let (tape, trace) = self.infer(x, &all)?;
        Ok(trace
            .masks
            .iter()
            .map(|v| AttentionMask {
                values: tape.value(*v).clone(),
            })
            .collect())
    }
}

fn stage_ids(stages: &[Stage]) -> Vec<ParamId> {
    stages
        .iter()
        .filter_map(|s| match s {
            Stage::Conv(c) => Some([c.weight, c.bias]),
            Stage::Pool => None,
        })
        .flatten()
        .collect()
}

fn trunk_macs(cfg: &BackboneConfig, range: std::ops::Range<usize>) -> usize {
    let shapes = cfg.trunk_shapes();
    range
        .map(|i| match cfg.trunk[i] {
            LayerSpec::Conv { channels, kernel, .. } => {
                let [c, h, w] = shapes[i];
                channels * c * kernel * kernel * h * w
            }
            LayerSpec::MaxPool => 0,
        })
        .sum()
}

/// Multiply-accumulates of conv and linear layers per forward image.
/// The shared attention trunk is counted once; heads and any replicated
/// networks are counted per learner.
pub fn flop_count(variant: Variant, cfg: &BackboneConfig) -> usize {
    let m = cfg.learners;
    let s = trunk_macs(cfg, 0..cfg.branch_point);
    let g = trunk_macs(cfg, cfg.branch_point..cfg.trunk.len()) + cfg.embed_input_dim() * cfg.learner_dim();
    let [c, h, w] = cfg.spatial_shape();
    let k = cfg.attention_kernel;
    let att_trunk = cfg.attention_depth * c * c * k * k * h * w;
    let head = c * c * h * w;
    match variant {
        Variant::Single => s + g,
        Variant::MHeads => s + m * g,
        Variant::MTails => m * (s + g),
        Variant::MHeadsAtt | Variant::Abe => s + att_trunk + m * (head + g),
    }
}
