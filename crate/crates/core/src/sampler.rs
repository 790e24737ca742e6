//! Pair minibatches: `B/2` anchors, the first half paired with a same-label
//! partner and the second half with a different-label partner.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Times an anchor is redrawn when its class cannot supply a positive partner.
pub const ANCHOR_RETRIES: usize = 100;

/// Two batch positions and whether their labels agree.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub anchor: usize,
    pub partner: usize,
    pub same_label: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    /// `[B, C, H, W]`: anchors first, then their partners in pair order.
    pub images: Tensor,
    pub labels: Vec<u32>,
    pub pairs: Vec<Pair>,
    /// Dataset index of each batch position.
    pub sources: Vec<usize>,
}

/// Per-class index lists over a dataset plus the sampling RNG.
#[derive(Clone, Debug)]
pub struct LabeledDatasetView {
    labels: Vec<u32>,
    classes: Vec<Vec<usize>>,
    class_of: Vec<usize>,
    rng: ChaCha8Rng,
}

impl LabeledDatasetView {
    pub fn new(labels: &[u32], seed: u64) -> Result<Self> {
        let mut distinct: Vec<u32> = labels.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < 2 {
            return Err(Error::Dataset(format!(
                "pair sampling needs at least 2 classes, found {}",
                distinct.len()
            )));
        }
        let mut classes = vec![Vec::new(); distinct.len()];
        let mut class_of = Vec::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            let c = distinct.binary_search(l).expect("label present");
            classes[c].push(i);
            class_of.push(c);
        }
        Ok(LabeledDatasetView {
            labels: labels.to_vec(),
            classes,
            class_of,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn class_lists(&self) -> &[Vec<usize>] {
        &self.classes
    }

    fn positive_partner(&mut self, anchor: usize) -> usize {
        let members = &self.classes[self.class_of[anchor]];
        let pos = members.binary_search(&anchor).expect("anchor in its class");
        let r = self.rng.random_range(0..members.len() - 1);
        members[if r >= pos { r + 1 } else { r }]
    }

    fn negative_partner(&mut self, anchor: usize) -> usize {
        let own = self.class_of[anchor];
        let others = self.labels.len() - self.classes[own].len();
        let mut r = self.rng.random_range(0..others);
        for (c, members) in self.classes.iter().enumerate() {
            if c == own {
                continue;
            }
            if r < members.len() {
                return members[r];
            }
            r -= members.len();
        }
        unreachable!("negative index within range")
    }

    /// Dataset indices of a batch (anchors then partners) and its pairs.
    pub fn sample_layout(&mut self, batch_size: usize) -> Result<(Vec<usize>, Vec<Pair>)> {
        if batch_size == 0 || batch_size % 4 != 0 {
            return Err(Error::usage(format!("batch size {batch_size} must be a positive multiple of 4")));
        }
        let half = batch_size / 2;
        let n = self.labels.len();
        if half > n {
            return Err(Error::Dataset(format!("{half} distinct anchors requested from {n} samples")));
        }
        let mut anchors = index::sample(&mut self.rng, n, half).into_vec();
        for slot in 0..batch_size / 4 {
            let mut retries = 0;
            while self.classes[self.class_of[anchors[slot]]].len() < 2 {
                if retries == ANCHOR_RETRIES {
                    return Err(Error::Dataset(format!(
                        "no anchor with a positive partner after {ANCHOR_RETRIES} redraws"
                    )));
                }
                retries += 1;
                let candidate = self.rng.random_range(0..n);
                match anchors.iter().position(|&a| a == candidate) {
                    None => anchors[slot] = candidate,
                    // Already a negative-pair anchor: trade places.
                    Some(p) if p >= batch_size / 4 => anchors.swap(slot, p),
                    Some(_) => {}
                }
            }
        }
        let mut sources = anchors.clone();
        let mut pairs = Vec::with_capacity(half);
        for (p, &a) in anchors.iter().enumerate() {
            let positive = p < batch_size / 4;
            let partner = if positive {
                self.positive_partner(a)
            } else {
                self.negative_partner(a)
            };
            sources.push(partner);
            pairs.push(Pair {
                anchor: p,
                partner: half + p,
                same_label: positive,
            });
        }
        Ok((sources, pairs))
    }

    /// Draw the next minibatch of `batch_size` images from `dataset`.
    pub fn build_batch(&mut self, dataset: &Dataset, batch_size: usize) -> Result<PairBatch> {
        if dataset.labels() != self.labels.as_slice() {
            return Err(Error::usage("dataset does not match this view"));
        }
        let (sources, pairs) = self.sample_layout(batch_size)?;
        let images = dataset.batch(&sources)?;
        let labels = sources.iter().map(|&i| self.labels[i]).collect();
        Ok(PairBatch {
            images,
            labels,
            pairs,
            sources,
        })
    }
}

/// `labels[i] == labels[j]` for every `(i, j)`.
pub fn label_indicator(labels: &[u32], pairs: &[(usize, usize)]) -> Vec<bool> {
    pairs.iter().map(|&(i, j)| labels[i] == labels[j]).collect()
}
