//! Retrieval scoring over ensemble embeddings: the averaged per-learner
//! distance, Recall@K, cosine statistics of positive, negative and self
//! pairs, and attention-mask summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PartSite};
use crate::error::{Error, Result};
use crate::model::EnsembleModel;
use crate::tensor::Tensor;

/// Embeddings `[N, M, D/M]` with one label per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    data: Vec<f64>,
    n: usize,
    m: usize,
    d: usize,
    labels: Vec<u32>,
}

impl EmbeddingSet {
    pub fn new(n: usize, m: usize, d: usize, data: Vec<f64>, labels: Vec<u32>) -> Result<Self> {
        if n == 0 || m == 0 || d == 0 {
            return Err(Error::dim(format!("embedding set [{n},{m},{d}] has a zero extent")));
        }
        if data.len() != n * m * d || labels.len() != n {
            return Err(Error::dim(format!(
                "embedding set [{n},{m},{d}] got {} values and {} labels",
                data.len(),
                labels.len()
            )));
        }
        Ok(EmbeddingSet { data, n, m, d, labels })
    }

    /// Interleave per-learner batches `[N, D/M]` into one set.
    pub fn from_learners(learners: &[Tensor], labels: Vec<u32>) -> Result<Self> {
        let first = learners.first().ok_or_else(|| Error::usage("no learner embeddings"))?;
        let &[n, d] = first.shape() else {
            return Err(Error::dim(format!("learner embeddings must be [N,d], got {:?}", first.shape())));
        };
        if learners.iter().any(|t| t.shape() != [n, d]) {
            return Err(Error::dim("learner embeddings differ in shape"));
        }
        let m = learners.len();
        let mut data = Vec::with_capacity(n * m * d);
        for i in 0..n {
            for t in learners {
                data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
            }
        }
        EmbeddingSet::new(n, m, d, data, labels)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn learners(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Learner `m`'s embedding of sample `i`.
    pub fn get(&self, i: usize, m: usize) -> &[f64] {
        let at = (i * self.m + m) * self.d;
        &self.data[at..at + self.d]
    }

    /// Concatenated embedding of sample `i` (length `M * D/M`).
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.m * self.d..(i + 1) * self.m * self.d]
    }

    /// The single-learner set of learner `m`.
    pub fn learner(&self, m: usize) -> Result<EmbeddingSet> {
        if m >= self.m {
            return Err(Error::usage(format!("learner {m} out of range for M={}", self.m)));
        }
        let data = (0..self.n).flat_map(|i| self.get(i, m).iter().copied()).collect();
        EmbeddingSet::new(self.n, 1, self.d, data, self.labels.clone())
    }
}

/// Embed every sample of `dataset` in chunks of `batch` images.
pub fn embed_dataset(model: &EnsembleModel, dataset: &Dataset, batch: usize) -> Result<EmbeddingSet> {
    let batch = batch.max(1);
    let mut per_learner: Vec<Vec<f64>> = vec![Vec::new(); model.learners()];
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(batch) {
        let x = dataset.batch(chunk)?;
        for (acc, e) in per_learner.iter_mut().zip(model.forward_all(&x)?) {
            acc.extend_from_slice(e.data());
        }
    }
    let d = model.config().learner_dim();
    let tensors = per_learner
        .into_iter()
        .map(|v| Tensor::new(vec![dataset.len(), d], v))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingSet::from_learners(&tensors, dataset.labels().to_vec())
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn ensemble_distance(e: &EmbeddingSet, i: usize, j: usize) -> f64 {
    if i == j {
        return 0.0;
    }
    let total: f64 = (0..e.m).map(|m| euclidean(e.get(i, m), e.get(j, m))).sum();
    total / e.m as f64
}

fn fill_rows(e: &EmbeddingSet, first_row: usize, out: &mut [f64]) {
    for (r, row) in out.chunks_mut(e.n).enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = ensemble_distance(e, first_row + r, j);
        }
    }
}

/// `[N, N]` matrix of mean per-learner Euclidean distances.
pub fn ensemble_distance_matrix(e: &EmbeddingSet) -> Result<Tensor> {
    ensemble_distance_matrix_threaded(e, 1)
}

/// As [`ensemble_distance_matrix`], split into contiguous row blocks over
/// `threads` workers. Every entry is computed identically, so the result
/// does not depend on the thread count.
pub fn ensemble_distance_matrix_threaded(e: &EmbeddingSet, threads: usize) -> Result<Tensor> {
    let n = e.n;
    if n < 2 {
        return Err(Error::usage("distance matrix needs at least 2 samples"));
    }
    let mut out = vec![0.0; n * n];
    let threads = threads.clamp(1, n);
    if threads == 1 {
        fill_rows(e, 0, &mut out);
    } else {
        let rows_per = n.div_ceil(threads);
        thread::scope(|s| {
            for (b, block) in out.chunks_mut(rows_per * n).enumerate() {
                s.spawn(move || fill_rows(e, b * rows_per, block));
            }
        });
    }
    Tensor::new(vec![n, n], out)
}

fn squared(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `[N, N]` matrix of per-learner squared distances averaged over learners.
pub fn mean_squared_distance_matrix(e: &EmbeddingSet) -> Result<Tensor> {
    let n = e.n;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let total: f64 = (0..e.m).map(|m| squared(e.get(i, m), e.get(j, m))).sum();
            out[i * n + j] = total / e.m as f64;
        }
    }
    Tensor::new(vec![n, n], out)
}

/// `[N, N]` matrix of squared distances between concatenated embeddings.
pub fn concatenated_squared_distance_matrix(e: &EmbeddingSet) -> Result<Tensor> {
    let n = e.n;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = squared(e.row(i), e.row(j));
        }
    }
    Tensor::new(vec![n, n], out)
}

fn check_ks(n: usize, ks: &[usize]) -> Result<()> {
    if ks.is_empty() {
        return Err(Error::usage("no recall K requested"));
    }
    for &k in ks {
        if k == 0 || k + 1 > n {
            return Err(Error::usage(format!("recall K={k} outside 1..={}", n.saturating_sub(1))));
        }
    }
    Ok(())
}

/// Recall@K from a precomputed `[N, N]` distance matrix. The query is
/// excluded from its own retrieval list and equal distances rank the lower
/// sample index first.
pub fn recall_from_distances(dist: &Tensor, labels: &[u32], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let n = labels.len();
    if dist.shape() != [n, n] {
        return Err(Error::dim(format!("distance matrix {:?} for {n} labels", dist.shape())));
    }
    check_ks(n, ks)?;
    // Retrieval position of the best same-label item for each query.
    let mut first_hit = Vec::with_capacity(n);
    for q in 0..n {
        let row = &dist.data()[q * n..(q + 1) * n];
        let best = (0..n)
            .filter(|&j| j != q && labels[j] == labels[q])
            .min_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        first_hit.push(best.map(|b| {
            (0..n)
                .filter(|&j| j != q && labels[j] != labels[q])
                .filter(|&j| row[j] < row[b] || (row[j] == row[b] && j < b))
                .count()
        }));
    }
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = first_hit.iter().filter(|p| p.is_some_and(|p| p < k)).count();
            (k, hits as f64 / n as f64)
        })
        .collect())
}

/// Fraction of queries whose `K` nearest other samples (ensemble distance)
/// include one with the query's label.
pub fn recall_at_k(e: &EmbeddingSet, ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    check_ks(e.n, ks)?;
    recall_from_distances(&ensemble_distance_matrix(e)?, &e.labels, ks)
}

/// Labels with fewer than two samples; their queries can never score a hit.
pub fn singleton_classes(labels: &[u32]) -> Vec<u32> {
    let mut census = BTreeMap::new();
    for &l in labels {
        *census.entry(l).or_insert(0usize) += 1;
    }
    census.into_iter().filter(|&(_, c)| c < 2).map(|(l, _)| l).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairKind {
    Positive,
    Negative,
    /// Two learners' embeddings of the same sample.
    SelfPair,
}

/// Normalized histogram over `[-1, 1]`: bin masses sum to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub densities: Vec<f64>,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.densities.len()
    }

    pub fn edges(&self, bin: usize) -> (f64, f64) {
        let w = 2.0 / self.bins() as f64;
        (-1.0 + w * bin as f64, -1.0 + w * (bin + 1) as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_left,bin_right,density\n");
        for (b, d) in self.densities.iter().enumerate() {
            let (l, r) = self.edges(b);
            writeln!(out, "{l},{r},{d}").expect("write to string");
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Histogram> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("bin_left,bin_right,density") {
            return Err(Error::Dataset("histogram csv: missing header".into()));
        }
        let densities = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.rsplit(',')
                    .next()
                    .and_then(|v| v.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::Dataset(format!("histogram csv: bad row `{l}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Histogram { densities })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CosineStats {
    pub histogram: Histogram,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Every cosine similarity of the requested kind. Positive and negative
/// pairs (`i < j`) compare concatenated embeddings; self pairs (`p < q`)
/// compare learner slices of one sample.
pub fn pair_cosines(e: &EmbeddingSet, kind: PairKind) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    match kind {
        PairKind::SelfPair => {
            if e.m < 2 {
                return Err(Error::usage("self pairs need at least 2 learners"));
            }
            for i in 0..e.n {
                for p in 0..e.m {
                    for q in p + 1..e.m {
                        out.push(cosine(e.get(i, p), e.get(i, q)));
                    }
                }
            }
        }
        PairKind::Positive | PairKind::Negative => {
            let same = kind == PairKind::Positive;
            for i in 0..e.n {
                for j in i + 1..e.n {
                    if (e.labels[i] == e.labels[j]) == same {
                        out.push(cosine(e.row(i), e.row(j)));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Histogram, mean and (population) standard deviation of pair cosines.
pub fn cosine_pair_stats(e: &EmbeddingSet, kind: PairKind, bins: usize) -> Result<CosineStats> {
    if bins == 0 {
        return Err(Error::usage("histogram needs at least one bin"));
    }
    let values = pair_cosines(e, kind)?;
    if values.is_empty() {
        return Err(Error::usage(format!("no {kind:?} pairs in embedding set")));
    }
    let count = values.len();
    let mean = values.iter().sum::<f64>() / count as f64;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64).sqrt();
    let mut counts = vec![0usize; bins];
    for v in &values {
        let b = (((v + 1.0) / 2.0) * bins as f64).floor() as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let densities = counts.iter().map(|&c| c as f64 / count as f64).collect();
    Ok(CosineStats {
        histogram: Histogram { densities },
        mean,
        std,
        count,
    })
}

/// One evaluation snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: usize,
    /// Scope (`ensemble`, `learner_0`, ...) to `K -> recall`.
    pub recall: BTreeMap<String, BTreeMap<usize, f64>>,
    pub loss_total: f64,
    pub loss_metric: Vec<f64>,
    pub loss_div: f64,
    pub cos_self_mean: Option<f64>,
    pub cos_self_std: Option<f64>,
    pub cos_pos_mean: f64,
    pub cos_pos_std: f64,
    pub cos_neg_mean: f64,
    pub cos_neg_std: f64,
}

impl MetricsRecord {
    pub fn ensemble_recall(&self, k: usize) -> Option<f64> {
        self.recall.get("ensemble")?.get(&k).copied()
    }

    /// Recall@K of each individual learner in order.
    pub fn learner_recalls(&self, k: usize) -> Vec<f64> {
        (0..)
            .map_while(|m| self.recall.get(&format!("learner_{m}")))
            .filter_map(|r| r.get(&k).copied())
            .collect()
    }
}

/// The record with the highest ensemble Recall@1, earliest on ties.
pub fn best_checkpoint_selection(records: &[MetricsRecord]) -> Result<&MetricsRecord> {
    let mut best: Option<&MetricsRecord> = None;
    for r in records {
        let score = r
            .ensemble_recall(1)
            .ok_or_else(|| Error::usage(format!("record at iteration {} lacks ensemble Recall@1", r.iter)))?;
        match best {
            Some(b) if b.ensemble_recall(1).expect("checked") >= score => {}
            _ => best = Some(r),
        }
    }
    best.ok_or_else(|| Error::usage("no metrics records"))
}

/// Mean attention mask of each learner over samples and channels,
/// `[M, H', W']`.
pub fn attention_summary(model: &EnsembleModel, x: &Tensor) -> Result<Tensor> {
    let masks = model.attention_masks(x)?;
    let &[b, c, h, w] = masks[0].values.shape() else {
        return Err(Error::Internal("attention mask is not 4-d".into()));
    };
    let mut out = Vec::with_capacity(masks.len() * h * w);
    for mask in &masks {
        let v = mask.values.data();
        for p in 0..h * w {
            let total: f64 = (0..b * c).map(|bc| v[bc * h * w + p]).sum();
            out.push(total / (b * c) as f64);
        }
    }
    Tensor::new(vec![masks.len(), h, w], out)
}

/// Index of the part site with the highest mean mask value. Mask cell
/// `(y, x)` of an `h x w` map covers image rows `y*H/h..` and is assigned to
/// a site when its center lies inside it.
pub fn dominant_site(mask: &[f64], h: usize, w: usize, image_hw: (usize, usize), sites: &[PartSite]) -> Option<usize> {
    let (ih, iw) = image_hw;
    let mut best: Option<(usize, f64)> = None;
    for (s, site) in sites.iter().enumerate() {
        let mut total = 0.0;
        let mut cells = 0usize;
        for y in 0..h {
            for x in 0..w {
                let cy = (2 * y + 1) * ih / (2 * h);
                let cx = (2 * x + 1) * iw / (2 * w);
                if site.contains(cy, cx) {
                    total += mask[y * w + x];
                    cells += 1;
                }
            }
        }
        if cells == 0 {
            continue;
        }
        let mean = total / cells as f64;
        if best.is_none_or(|(_, b)| mean > b) {
            best = Some((s, mean));
        }
    }
    best.map(|(s, _)| s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_1d(values: &[f64], labels: &[u32]) -> EmbeddingSet {
        EmbeddingSet::new(values.len(), 1, 1, values.to_vec(), labels.to_vec()).unwrap()
    }

    #[test]
    fn recall_small_example() {
        let e = set_1d(&[0.0, 0.1, 0.25, 5.0], &[0, 1, 0, 1]);
        let r = recall_at_k(&e, &[1, 3]).unwrap();
        assert_eq!(r[&1], 0.0);
        assert_eq!(r[&3], 1.0);
    }

    #[test]
    fn twins_give_perfect_recall() {
        let e = set_1d(&[0.0, 0.0, 3.0, 3.0, 7.0, 7.0], &[4, 4, 2, 2, 9, 9]);
        assert_eq!(recall_at_k(&e, &[1]).unwrap()[&1], 1.0);
    }

    #[test]
    fn full_retrieval_set_hits() {
        let e = set_1d(&[0.0, 9.0, 1.0, 5.0, 2.0], &[0, 0, 1, 1, 1]);
        assert_eq!(recall_at_k(&e, &[4]).unwrap()[&4], 1.0);
    }

    #[test]
    fn k_out_of_range() {
        let e = set_1d(&[0.0, 1.0, 2.0], &[0, 0, 1]);
        assert!(matches!(recall_at_k(&e, &[3]), Err(Error::Usage(_))));
        assert!(matches!(recall_at_k(&e, &[0]), Err(Error::Usage(_))));
    }

    #[test]
    fn ties_prefer_lower_index() {
        // query 1 is equidistant from 0 and 2; sample 0 is retrieved first
        let e = set_1d(&[0.0, 1.0, 2.0, 10.0], &[5, 6, 6, 5]);
        assert_eq!(recall_at_k(&e, &[1]).unwrap()[&1], 0.25);
        let e = set_1d(&[0.0, 1.0, 2.0, 10.0], &[6, 6, 5, 5]);
        assert_eq!(recall_at_k(&e, &[1]).unwrap()[&1], 0.75);
    }

    #[test]
    fn distance_is_mean_of_learners() {
        let data = vec![0.0, 0.0, 0.2, 0.4];
        let e = EmbeddingSet::new(2, 2, 1, data, vec![0, 1]).unwrap();
        let d = ensemble_distance_matrix(&e).unwrap();
        assert!((d.data()[1] - 0.3).abs() < 1e-15);
        assert_eq!(d.data()[0], 0.0);
    }

    #[test]
    fn threaded_matrix_matches() {
        let data: Vec<f64> = (0..7 * 2 * 3).map(|i| (i as f64 * 0.37).sin()).collect();
        let e = EmbeddingSet::new(7, 2, 3, data, vec![0; 7]).unwrap();
        let a = ensemble_distance_matrix(&e).unwrap();
        for t in [2, 3, 7, 16] {
            assert_eq!(ensemble_distance_matrix_threaded(&e, t).unwrap(), a);
        }
    }

    #[test]
    fn self_pairs() {
        let same = EmbeddingSet::new(2, 2, 2, vec![0.6, 0.8, 0.6, 0.8, 1.0, 0.0, 1.0, 0.0], vec![0, 1]).unwrap();
        let s = cosine_pair_stats(&same, PairKind::SelfPair, 10).unwrap();
        assert!((s.mean - 1.0).abs() < 1e-12);
        let orth = EmbeddingSet::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0]).unwrap();
        assert_eq!(cosine_pair_stats(&orth, PairKind::SelfPair, 4).unwrap().mean, 0.0);
        let single = set_1d(&[1.0, 2.0], &[0, 0]);
        assert!(matches!(cosine_pair_stats(&single, PairKind::SelfPair, 4), Err(Error::Usage(_))));
    }

    #[test]
    fn pair_counts_follow_census() {
        let e = set_1d(&[1.0, 2.0, -1.0, 3.0, 4.0], &[0, 0, 1, 1, 1]);
        assert_eq!(pair_cosines(&e, PairKind::Positive).unwrap().len(), 1 + 3);
        assert_eq!(pair_cosines(&e, PairKind::Negative).unwrap().len(), 6);
    }

    #[test]
    fn histogram_csv_round_trip() {
        let e = set_1d(&[1.0, 2.0, -1.0, 3.0, 4.0], &[0, 0, 1, 1, 1]);
        let s = cosine_pair_stats(&e, PairKind::Negative, 8).unwrap();
        let back = Histogram::parse_csv(&s.histogram.to_csv()).unwrap();
        assert_eq!(back, s.histogram);
        assert!((back.densities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // cosine 1 lands in the last bin
        assert_eq!(s.histogram.densities[7], 4.0 / 6.0);
        assert_eq!(s.histogram.densities[0], 2.0 / 6.0);
    }

    fn record(iter: usize, r1: f64) -> MetricsRecord {
        MetricsRecord {
            iter,
            recall: BTreeMap::from([("ensemble".to_string(), BTreeMap::from([(1, r1)]))]),
            loss_total: 0.0,
            loss_metric: vec![],
            loss_div: 0.0,
            cos_self_mean: None,
            cos_self_std: None,
            cos_pos_mean: 0.0,
            cos_pos_std: 0.0,
            cos_neg_mean: 0.0,
            cos_neg_std: 0.0,
        }
    }

    #[test]
    fn best_record_selection() {
        assert_eq!(best_checkpoint_selection(&[record(0, 0.4)]).unwrap().iter, 0);
        let rising = [record(0, 0.1), record(1, 0.2), record(2, 0.3)];
        assert_eq!(best_checkpoint_selection(&rising).unwrap().iter, 2);
        let tie = [record(1, 0.1), record(3, 0.5), record(5, 0.2), record(7, 0.5)];
        assert_eq!(best_checkpoint_selection(&tie).unwrap().iter, 3);
        assert!(matches!(best_checkpoint_selection(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn record_json_keys() {
        let json = serde_json::to_string(&record(4, 0.25)).unwrap();
        assert!(json.starts_with(r#"{"iter":4,"recall":{"ensemble":{"1":0.25}},"loss_total""#));
        let back: MetricsRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, record(4, 0.25));
    }

    #[test]
    fn dominant_site_picks_brightest() {
        let sites = [
            PartSite { top: 0, left: 0, size: 4 },
            PartSite { top: 4, left: 4, size: 4 },
        ];
        let mut mask = vec![0.1; 16];
        mask[15] = 0.9;
        assert_eq!(dominant_site(&mask, 4, 4, (8, 8), &sites), Some(1));
    }
}
