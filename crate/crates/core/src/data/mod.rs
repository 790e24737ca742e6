//! Labeled image datasets: synthetic generation, the binary file format,
//! and class-disjoint splitting.

mod io;
mod synthetic;

pub use io::{decode_dataset, encode_dataset, load_dataset, save_dataset, DATASET_MAGIC};
pub use synthetic::{generate, PartSite, SyntheticSpec};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images `[N, C, H, W]` stored as `f32` (the on-disk precision) with one
/// label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    shape: [usize; 4],
    images: Vec<f32>,
    labels: Vec<u32>,
    class_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(shape: [usize; 4], images: Vec<f32>, labels: Vec<u32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("dataset shape {shape:?} has a zero extent")));
        }
        if images.len() != shape.iter().product::<usize>() {
            return Err(Error::dim(format!(
                "dataset shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                images.len()
            )));
        }
        if labels.len() != shape[0] {
            return Err(Error::dim(format!("{} labels for {} images", labels.len(), shape[0])));
        }
        Ok(Dataset {
            shape,
            images,
            labels,
            class_names: None,
        })
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Self {
        self.class_names = Some(names);
        self
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn len(&self) -> usize {
        self.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.shape[0] == 0
    }

    /// `[N, C, H, W]`.
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    fn image_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Distinct labels in ascending order.
    pub fn classes(&self) -> Vec<u32> {
        self.census().into_keys().collect()
    }

    /// Samples per label.
    pub fn census(&self) -> BTreeMap<u32, usize> {
        let mut out = BTreeMap::new();
        for &l in &self.labels {
            *out.entry(l).or_insert(0) += 1;
        }
        out
    }

    /// Batch tensor `[k, C, H, W]` of the given samples.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::usage(format!("sample {i} outside dataset of {}", self.len())));
            }
            data.extend(self.image(i).iter().map(|&v| f64::from(v)));
        }
        let [_, c, h, w] = self.shape;
        Tensor::new(vec![indices.len(), c, h, w], data)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::usage(format!("sample {i} outside dataset of {}", self.len())));
            }
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let mut shape = self.shape;
        shape[0] = indices.len();
        let mut out = Dataset::new(shape, images, labels)?;
        out.class_names = self.class_names.clone();
        Ok(out)
    }
}

/// Split by class id: the first `floor(fraction * classes)` classes train,
/// the rest test. Each side needs at least two classes.
pub fn split_disjoint_classes(dataset: &Dataset, train_fraction: f64) -> Result<(Dataset, Dataset)> {
    let classes = dataset.classes();
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::config(format!("train fraction {train_fraction} outside [0,1]")));
    }
    let n_train = (train_fraction * classes.len() as f64).floor() as usize;
    let n_test = classes.len() - n_train;
    if n_train < 2 || n_test < 2 {
        return Err(Error::config(format!(
            "fraction {train_fraction} of {} classes leaves {n_train} train / {n_test} test classes; need at least 2 each",
            classes.len()
        )));
    }
    let boundary = classes[n_train];
    let (train, test): (Vec<usize>, Vec<usize>) = (0..dataset.len()).partition(|&i| dataset.labels()[i] < boundary);
    Ok((dataset.subset(&train)?, dataset.subset(&test)?))
}
