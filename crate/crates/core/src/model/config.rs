use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ensemble architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// One embedding network `G(S(x))`.
    Single,
    /// Shared lower network, one upper network per learner: `G_m(S(x))`.
    MHeads,
    /// One lower network per learner, shared upper network: `G(S_m(x))`.
    MTails,
    /// `G_m(S(x) * A_m(S(x)))`: separate upper networks plus attention.
    MHeadsAtt,
    /// Attention-based ensemble `G(S(x) * A_m(S(x)))`.
    Abe,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Single,
        Variant::MHeads,
        Variant::MTails,
        Variant::MHeadsAtt,
        Variant::Abe,
    ];

    pub fn has_attention(self) -> bool {
        matches!(self, Variant::Abe | Variant::MHeadsAtt)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Single => "single",
            Variant::MHeads => "m-heads",
            Variant::MTails => "m-tails",
            Variant::MHeadsAtt => "m-heads-att",
            Variant::Abe => "abe",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "single" | "1-head" => Ok(Variant::Single),
            "m-heads" | "heads" => Ok(Variant::MHeads),
            "m-tails" | "tails" => Ok(Variant::MTails),
            "m-heads-att" | "m-heads+att" | "heads-att" => Ok(Variant::MHeadsAtt),
            "abe" | "abe-m" => Ok(Variant::Abe),
            other => Err(Error::config(format!("unknown variant `{other}`"))),
        }
    }
}

/// One layer of the backbone trunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { channels: usize, kernel: usize, relu: bool },
    MaxPool,
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv { channels, kernel, relu } => {
                write!(f, "conv:{channels}:{kernel}:{}", if *relu { "relu" } else { "linear" })
            }
            LayerSpec::MaxPool => f.write_str("pool"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    /// `conv:<channels>:<kernel>[:relu|linear]` or `pool`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "pool" {
            return Ok(LayerSpec::MaxPool);
        }
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::config(format!("bad layer spec `{s}`; expected conv:<channels>:<kernel>[:relu|linear] or pool"));
        if parts.len() < 3 || parts.len() > 4 || parts[0] != "conv" {
            return Err(bad());
        }
        let channels = parts[1].parse().map_err(|_| bad())?;
        let kernel = parts[2].parse().map_err(|_| bad())?;
        let relu = match parts.get(3).copied() {
            None | Some("relu") => true,
            Some("linear") => false,
            Some(_) => return Err(bad()),
        };
        Ok(LayerSpec::Conv { channels, kernel, relu })
    }
}

/// How the upper network turns its final feature map into a vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbedPooling {
    Flatten,
    Average,
}

impl fmt::Display for EmbedPooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbedPooling::Flatten => "flatten",
            EmbedPooling::Average => "avg",
        })
    }
}

impl FromStr for EmbedPooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "flatten" => Ok(EmbedPooling::Flatten),
            "avg" | "gap" | "average" => Ok(EmbedPooling::Average),
            other => Err(Error::config(format!("unknown pooling `{other}`"))),
        }
    }
}

/// Toy backbone: a conv trunk split at `branch_point` into the spatial
/// extractor (layers before it) and the global embedding network (layers
/// from it on, then pooling and a linear projection).
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// `[C, H, W]`.
    pub input_shape: [usize; 3],
    pub trunk: Vec<LayerSpec>,
    pub branch_point: usize,
    /// Number of convolutions in the shared attention trunk.
    pub attention_depth: usize,
    pub attention_kernel: usize,
    pub learners: usize,
    /// Ensemble embedding size; each learner gets `embedding_dim / learners`.
    pub embedding_dim: usize,
    pub normalize: bool,
    pub pooling: EmbedPooling,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_shape: [1, 16, 16],
            trunk: vec![
                LayerSpec::Conv { channels: 8, kernel: 3, relu: true },
                LayerSpec::MaxPool,
                LayerSpec::Conv { channels: 8, kernel: 3, relu: true },
                LayerSpec::MaxPool,
            ],
            branch_point: 2,
            attention_depth: 1,
            attention_kernel: 3,
            learners: 2,
            embedding_dim: 64,
            normalize: true,
            pooling: EmbedPooling::Flatten,
        }
    }
}

pub fn format_trunk(trunk: &[LayerSpec]) -> String {
    trunk.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn parse_trunk(s: &str) -> Result<Vec<LayerSpec>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

impl BackboneConfig {
    pub fn learner_dim(&self) -> usize {
        self.embedding_dim / self.learners.max(1)
    }

    /// `[C, H, W]` after each trunk layer, starting with the input.
    pub fn trunk_shapes(&self) -> Vec<[usize; 3]> {
        let mut shapes = vec![self.input_shape];
        let mut cur = self.input_shape;
        for layer in &self.trunk {
            cur = match *layer {
                LayerSpec::Conv { channels, .. } => [channels, cur[1], cur[2]],
                LayerSpec::MaxPool => [cur[0], cur[1] / 2, cur[2] / 2],
            };
            shapes.push(cur);
        }
        shapes
    }

    /// Shape of `S(x)` for one image.
    pub fn spatial_shape(&self) -> [usize; 3] {
        self.trunk_shapes()[self.branch_point.min(self.trunk.len())]
    }

    /// Shape of the final feature map of `G` before pooling.
    pub fn global_shape(&self) -> [usize; 3] {
        *self.trunk_shapes().last().expect("non-empty")
    }

    pub fn embed_input_dim(&self) -> usize {
        let [c, h, w] = self.global_shape();
        match self.pooling {
            EmbedPooling::Flatten => c * h * w,
            EmbedPooling::Average => c,
        }
    }

    /// Every violated invariant, for the given variant.
    pub fn violations(&self, variant: Variant) -> Vec<String> {
        let mut out = Vec::new();
        if self.input_shape.contains(&0) {
            out.push(format!("input shape {:?} has a zero extent", self.input_shape));
        }
        if self.trunk.is_empty() {
            out.push("trunk has no layers".into());
        }
        if self.branch_point == 0 || self.branch_point >= self.trunk.len() {
            out.push(format!(
                "branch point {} must satisfy 0 < branch < {} (trunk length)",
                self.branch_point,
                self.trunk.len()
            ));
        }
        if self.learners == 0 {
            out.push("learners must be positive".into());
        } else if self.embedding_dim == 0 || self.embedding_dim % self.learners != 0 {
            out.push(format!(
                "embedding dim {} must be a positive multiple of learners {}",
                self.embedding_dim, self.learners
            ));
        }
        if variant == Variant::Single && self.learners != 1 {
            out.push(format!("variant single needs learners = 1, got {}", self.learners));
        }
        if self.attention_kernel % 2 == 0 {
            out.push(format!("attention kernel {} must be odd", self.attention_kernel));
        }
        let mut cur = self.input_shape;
        for (i, layer) in self.trunk.iter().enumerate() {
            match *layer {
                LayerSpec::Conv { channels, kernel, .. } => {
                    if channels == 0 {
                        out.push(format!("trunk layer {i}: zero channels"));
                    }
                    if kernel % 2 == 0 {
                        out.push(format!("trunk layer {i}: kernel {kernel} must be odd"));
                    }
                    cur[0] = channels;
                }
                LayerSpec::MaxPool => {
                    if cur[1] < 2 || cur[2] < 2 {
                        out.push(format!("trunk layer {i}: cannot pool a {}x{} map", cur[1], cur[2]));
                    }
                    cur = [cur[0], cur[1] / 2, cur[2] / 2];
                }
            }
        }
        out
    }

    pub fn validate(&self, variant: Variant) -> Result<()> {
        let v = self.violations(variant);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}
