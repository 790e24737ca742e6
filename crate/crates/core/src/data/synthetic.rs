use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::kv::{parse_grid, KeyValues};

/// Part-compositional image generator settings. Each class is a distinct
/// tuple of texture variants, one per part site.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub parts: usize,
    /// Texture variants available at every site.
    pub variants: usize,
    /// Side length of each square part window.
    pub site_size: usize,
    /// How far variants of one site depart from a shared base texture:
    /// 1 gives independent textures, 0 identical ones.
    pub contrast: f64,
    /// Each part is displaced by up to this many pixels on each axis.
    pub shift: usize,
    /// Background pixels outside the parts are `U(0, clutter)`.
    pub clutter: f64,
    /// Texture and clutter values are shifted to be zero-mean.
    pub center: bool,
    pub noise_sigma: f64,
    /// Global intensity jitter: each sample is scaled by `1 + U(-jitter, jitter)`.
    pub jitter: f64,
    pub flip_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 16,
            samples_per_class: 64,
            height: 16,
            width: 16,
            channels: 1,
            parts: 4,
            variants: 4,
            site_size: 6,
            contrast: 1.0,
            shift: 0,
            clutter: 0.0,
            center: false,
            noise_sigma: 0.05,
            jitter: 0.1,
            flip_prob: 0.5,
            seed: 0,
        }
    }
}

/// Square window `[top, top+size) x [left, left+size)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartSite {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

impl PartSite {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.top + self.size).contains(&y) && (self.left..self.left + self.size).contains(&x)
    }
}

const KEYS: [&str; 15] = [
    "classes",
    "samples_per_class",
    "grid",
    "channels",
    "parts",
    "variants",
    "site_size",
    "contrast",
    "shift",
    "clutter",
    "center",
    "noise_sigma",
    "jitter",
    "flip_prob",
    "seed",
];

impl SyntheticSpec {
    /// Read `<prefix>key` entries, defaulting absent ones.
    pub fn from_kv(kv: &mut KeyValues, prefix: &str) -> Self {
        let d = SyntheticSpec::default();
        let key = |k: &str| format!("{prefix}{k}");
        let (height, width) = match kv.take_raw(&key("grid")) {
            None => (d.height, d.width),
            Some(raw) => parse_grid(&raw).unwrap_or_else(|| {
                kv.error(format!("cannot parse grid `{raw}`; expected HxW"));
                (d.height, d.width)
            }),
        };
        SyntheticSpec {
            classes: kv.take_or(&key("classes"), d.classes),
            samples_per_class: kv.take_or(&key("samples_per_class"), d.samples_per_class),
            height,
            width,
            channels: kv.take_or(&key("channels"), d.channels),
            parts: kv.take_or(&key("parts"), d.parts),
            variants: kv.take_or(&key("variants"), d.variants),
            site_size: kv.take_or(&key("site_size"), d.site_size),
            contrast: kv.take_or(&key("contrast"), d.contrast),
            shift: kv.take_or(&key("shift"), d.shift),
            clutter: kv.take_or(&key("clutter"), d.clutter),
            center: kv.take_or(&key("center"), d.center),
            noise_sigma: kv.take_or(&key("noise_sigma"), d.noise_sigma),
            jitter: kv.take_or(&key("jitter"), d.jitter),
            flip_prob: kv.take_or(&key("flip_prob"), d.flip_prob),
            seed: kv.take_or(&key("seed"), d.seed),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let spec = Self::from_kv(&mut kv, "");
        kv.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    /// True when `kv` holds any key of this spec under `prefix`.
    pub fn mentioned(kv: &KeyValues, prefix: &str) -> bool {
        KEYS.iter().any(|k| kv.has(&format!("{prefix}{k}")))
    }

    pub fn to_text(&self, prefix: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{prefix}classes = {}", self.classes);
        let _ = writeln!(s, "{prefix}samples_per_class = {}", self.samples_per_class);
        let _ = writeln!(s, "{prefix}grid = {}x{}", self.height, self.width);
        let _ = writeln!(s, "{prefix}channels = {}", self.channels);
        let _ = writeln!(s, "{prefix}parts = {}", self.parts);
        let _ = writeln!(s, "{prefix}variants = {}", self.variants);
        let _ = writeln!(s, "{prefix}site_size = {}", self.site_size);
        let _ = writeln!(s, "{prefix}contrast = {}", self.contrast);
        let _ = writeln!(s, "{prefix}shift = {}", self.shift);
        let _ = writeln!(s, "{prefix}clutter = {}", self.clutter);
        let _ = writeln!(s, "{prefix}center = {}", self.center);
        let _ = writeln!(s, "{prefix}noise_sigma = {}", self.noise_sigma);
        let _ = writeln!(s, "{prefix}jitter = {}", self.jitter);
        let _ = writeln!(s, "{prefix}flip_prob = {}", self.flip_prob);
        let _ = writeln!(s, "{prefix}seed = {}", self.seed);
        s
    }

    fn layout(&self) -> (usize, usize) {
        let cols = (1..=self.parts).find(|c| c * c >= self.parts).unwrap_or(1);
        (self.parts.div_ceil(cols), cols)
    }

    /// Part windows: sites tile a near-square grid of cells, each window
    /// centred in its cell.
    pub fn part_sites(&self) -> Vec<PartSite> {
        let (rows, cols) = self.layout();
        let (ch, cw) = (self.height / rows, self.width / cols);
        (0..self.parts)
            .map(|k| {
                let (r, c) = (k / cols, k % cols);
                PartSite {
                    top: r * ch + ch.saturating_sub(self.site_size) / 2,
                    left: c * cw + cw.saturating_sub(self.site_size) / 2,
                    size: self.site_size,
                }
            })
            .collect()
    }

    fn tuple_count(&self) -> Option<usize> {
        let mut n: usize = 1;
        for _ in 0..self.parts {
            n = n.checked_mul(self.variants)?;
        }
        Some(n)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.classes < 4 {
            out.push(format!("classes must be >= 4, got {}", self.classes));
        }
        if self.samples_per_class < 4 {
            out.push(format!("samples_per_class must be >= 4, got {}", self.samples_per_class));
        }
        if self.parts < 2 {
            out.push(format!("parts must be >= 2, got {}", self.parts));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            out.push("grid and channels must be positive".into());
        }
        if self.variants == 0 {
            out.push("variants must be positive".into());
        }
        if self.site_size == 0 {
            out.push("site_size must be positive".into());
        }
        if self.parts >= 1 {
            let (rows, cols) = self.layout();
            if self.site_size > self.height / rows || self.site_size > self.width / cols {
                out.push(format!(
                    "{} sites of size {} do not fit a {}x{} grid as {rows}x{cols} cells",
                    self.parts, self.site_size, self.height, self.width
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.contrast) {
            out.push(format!("contrast must lie in [0,1], got {}", self.contrast));
        }
        if !(self.clutter >= 0.0) {
            out.push(format!("clutter must be >= 0, got {}", self.clutter));
        }
        if !(self.noise_sigma >= 0.0) {
            out.push(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            out.push(format!("jitter must lie in [0,1), got {}", self.jitter));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            out.push(format!("flip_prob must lie in [0,1], got {}", self.flip_prob));
        }
        if self.parts >= 1 && self.variants >= 1 && self.tuple_count().is_some_and(|n| self.classes > n) {
            out.push(format!(
                "{} classes exceed the {} distinct part tuples ({} variants ^ {} parts)",
                self.classes,
                self.tuple_count().unwrap_or(0),
                self.variants,
                self.parts
            ));
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
}

fn class_tuples(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let decode = |mut code: usize| {
        (0..spec.parts)
            .map(|_| {
                let v = code % spec.variants;
                code /= spec.variants;
                v
            })
            .collect::<Vec<_>>()
    };
    match spec.tuple_count() {
        Some(n) if n <= 1 << 16 => {
            let mut codes: Vec<usize> = (0..n).collect();
            codes.shuffle(rng);
            codes.into_iter().take(spec.classes).map(decode).collect()
        }
        _ => {
            let mut seen = HashSet::new();
            let mut out = Vec::with_capacity(spec.classes);
            while out.len() < spec.classes {
                let t: Vec<usize> = (0..spec.parts).map(|_| rng.random_range(0..spec.variants)).collect();
                if seen.insert(t.clone()) {
                    out.push(t);
                }
            }
            out
        }
    }
}

/// `at` moved by a uniform offset in `[-shift, shift]`, kept in `0..=max`.
fn displace(rng: &mut ChaCha8Rng, at: usize, shift: usize, max: usize) -> usize {
    if shift == 0 {
        return at;
    }
    let offset = rng.random_range(0..=2 * shift) as isize - shift as isize;
    (at as isize + offset).clamp(0, max as isize) as usize
}

/// Render the dataset described by `spec`. Samples are ordered by class.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let patch = spec.channels * spec.site_size * spec.site_size;
    // prototypes[site][variant] -> [C, s, s]
    let prototypes: Vec<Vec<Vec<f64>>> = (0..spec.parts)
        .map(|_| {
            let base: Vec<f64> = (0..patch).map(|_| rng.random_range(0.0..1.0)).collect();
            (0..spec.variants)
                .map(|_| {
                    base.iter()
                        .map(|&b| (1.0 - spec.contrast) * b + spec.contrast * rng.random_range(0.0..1.0))
                        .collect()
                })
                .collect()
        })
        .collect();
    let (tex_shift, clutter_shift) = if spec.center { (0.5, spec.clutter / 2.0) } else { (0.0, 0.0) };
    let tuples = class_tuples(spec, &mut rng);
    let sites = spec.part_sites();
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::config(format!("noise: {e}")))?;

    let (c, h, w, s) = (spec.channels, spec.height, spec.width, spec.site_size);
    let n = spec.classes * spec.samples_per_class;
    let mut images = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    let mut canvas = vec![0.0f64; c * h * w];
    for (class, tuple) in tuples.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let gain = if spec.jitter > 0.0 {
                1.0 + rng.random_range(-spec.jitter..spec.jitter)
            } else {
                1.0
            };
            let flip = spec.flip_prob > 0.0 && rng.random_bool(spec.flip_prob);
            if spec.clutter > 0.0 {
                canvas.iter_mut().for_each(|v| *v = rng.random_range(0.0..spec.clutter) - clutter_shift);
            } else {
                canvas.fill(0.0);
            }
            for (site, (&variant, proto)) in sites.iter().zip(tuple.iter().zip(&prototypes)) {
                let tex = &proto[variant];
                let (top, left) = (displace(&mut rng, site.top, spec.shift, h - s), displace(&mut rng, site.left, spec.shift, w - s));
                for ch in 0..c {
                    for dy in 0..s {
                        for dx in 0..s {
                            canvas[(ch * h + top + dy) * w + left + dx] = gain * (tex[(ch * s + dy) * s + dx] - tex_shift);
                        }
                    }
                }
            }
            if spec.noise_sigma > 0.0 {
                for v in canvas.iter_mut() {
                    *v += noise.sample(&mut rng);
                }
            }
            for ch in 0..c {
                for y in 0..h {
                    let row = &canvas[(ch * h + y) * w..(ch * h + y + 1) * w];
                    if flip {
                        images.extend(row.iter().rev().map(|&v| v as f32));
                    } else {
                        images.extend(row.iter().map(|&v| v as f32));
                    }
                }
            }
            labels.push(class as u32);
        }
    }
    Dataset::new([n, c, h, w], images, labels)
}
