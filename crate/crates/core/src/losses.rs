//! Contrastive metric loss, divergence loss between learners, and their
//! weighted sum.

use serde::{Deserialize, Serialize};

use crate::autodiff::{contrastive_value, divergence_value, PairIndex, Tape, Var};
use crate::error::{Error, Result};
use crate::sampler::Pair;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Margin on squared distance for negative pairs.
    pub contrastive_margin: f64,
    /// Margin on squared distance between learners for the same input.
    pub divergence_margin: f64,
    pub lambda_div: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            contrastive_margin: 1.0,
            divergence_margin: 1.0,
            lambda_div: 1.0,
        }
    }
}

impl LossConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.contrastive_margin > 0.0) {
            out.push(format!("contrastive margin must be positive, got {}", self.contrastive_margin));
        }
        if !(self.divergence_margin > 0.0) {
            out.push(format!("divergence margin must be positive, got {}", self.divergence_margin));
        }
        if !(self.lambda_div >= 0.0) {
            out.push(format!("lambda_div must be nonnegative, got {}", self.lambda_div));
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

/// Per-term values of one loss evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Contrastive loss of each learner.
    pub metric: Vec<f64>,
    pub divergence: f64,
}

fn pair_indices(pairs: &[Pair]) -> Vec<PairIndex> {
    pairs.iter().map(|p| (p.anchor, p.partner, p.same_label)).collect()
}

/// Contrastive loss of one learner. `embeddings` is `[B, d]`; each pair
/// indexes two of its rows.
pub fn contrastive_loss(tape: &mut Tape, embeddings: Var, pairs: &[Pair], cfg: &LossConfig) -> Result<Var> {
    tape.contrastive(embeddings, &pair_indices(pairs), cfg.contrastive_margin)
}

/// Contrastive loss on pair-stacked embeddings `[P, 2, d]`.
pub fn contrastive_loss_stacked(tape: &mut Tape, pair_embeddings: Var, same_label: &[bool], cfg: &LossConfig) -> Result<Var> {
    let s = tape.value(pair_embeddings).shape().to_vec();
    if s.len() != 3 || s[1] != 2 {
        return Err(Error::dim(format!("expected [P,2,d] pair embeddings, got {s:?}")));
    }
    if s[0] != same_label.len() {
        return Err(Error::dim(format!("{} pairs but {} label flags", s[0], same_label.len())));
    }
    let rows = tape.reshape(pair_embeddings, vec![2 * s[0], s[2]])?;
    let pairs: Vec<PairIndex> = same_label.iter().enumerate().map(|(p, &y)| (2 * p, 2 * p + 1, y)).collect();
    tape.contrastive(rows, &pairs, cfg.contrastive_margin)
}

/// Divergence loss over learner embeddings, each `[B, d]`. A single learner
/// contributes exactly zero.
pub fn divergence_loss(tape: &mut Tape, learners: &[Var], cfg: &LossConfig) -> Result<Var> {
    tape.divergence(learners, cfg.divergence_margin)
}

/// Value of the contrastive loss on `[P, 2, d]` embeddings.
pub fn contrastive_value_stacked(pair_embeddings: &Tensor, same_label: &[bool], cfg: &LossConfig) -> Result<f64> {
    let s = pair_embeddings.shape();
    if s.len() != 3 || s[1] != 2 || s[0] != same_label.len() {
        return Err(Error::dim(format!(
            "expected [P,2,d] with P = {} flags, got {s:?}",
            same_label.len()
        )));
    }
    let pairs: Vec<PairIndex> = same_label.iter().enumerate().map(|(p, &y)| (2 * p, 2 * p + 1, y)).collect();
    Ok(contrastive_value(pair_embeddings.data(), s[2], &pairs, cfg.contrastive_margin))
}

/// Value of the divergence loss on `[B, M, d]` embeddings.
pub fn divergence_value_stacked(per_learner: &Tensor, cfg: &LossConfig) -> Result<f64> {
    let s = per_learner.shape();
    if s.len() != 3 {
        return Err(Error::dim(format!("expected [B,M,d] embeddings, got {s:?}")));
    }
    let (b, m, d) = (s[0], s[1], s[2]);
    let learners: Vec<Vec<f64>> = (0..m)
        .map(|k| {
            (0..b)
                .flat_map(|i| per_learner.data()[(i * m + k) * d..(i * m + k + 1) * d].iter().copied())
                .collect()
        })
        .collect();
    let slices: Vec<&[f64]> = learners.iter().map(Vec::as_slice).collect();
    Ok(divergence_value(&slices, d, cfg.divergence_margin))
}

/// `sum_m contrastive(m) + lambda_div * divergence`. The divergence term is
/// always evaluated for logging but only enters the objective when
/// `lambda_div > 0` and there are at least two learners.
pub fn total_loss(tape: &mut Tape, embeddings: &[Var], pairs: &[Pair], cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let first = *embeddings.first().ok_or_else(|| Error::usage("total loss of zero learners"))?;
    let mut metric = Vec::with_capacity(embeddings.len());
    let mut total = contrastive_loss(tape, first, pairs, cfg)?;
    metric.push(tape.value(total).data()[0]);
    for &e in &embeddings[1..] {
        let l = contrastive_loss(tape, e, pairs, cfg)?;
        metric.push(tape.value(l).data()[0]);
        total = tape.add(total, l)?;
    }
    let mut divergence = 0.0;
    if embeddings.len() > 1 {
        let div = divergence_loss(tape, embeddings, cfg)?;
        divergence = tape.value(div).data()[0];
        if cfg.lambda_div > 0.0 {
            let weighted = tape.scale(div, cfg.lambda_div)?;
            total = tape.add(total, weighted)?;
        }
    }
    let breakdown = LossBreakdown {
        total: tape.value(total).data()[0],
        metric,
        divergence,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(tape: &mut Tape, data: &[f64], d: usize) -> Var {
        tape.param(Tensor::new(vec![data.len() / d, d], data.to_vec()).unwrap())
    }

    fn pair(anchor: usize, partner: usize, same_label: bool) -> Pair {
        Pair {
            anchor,
            partner,
            same_label,
        }
    }

    #[test]
    fn identical_positive_pair_is_zero() {
        let mut t = Tape::new();
        let e = rows(&mut t, &[0.3, 0.4, 0.3, 0.4], 2);
        let l = contrastive_loss(&mut t, e, &[pair(0, 1, true)], &LossConfig::default()).unwrap();
        assert_eq!(t.value(l).data()[0], 0.0);
    }

    #[test]
    fn saturated_negative_pair_is_zero() {
        let mut t = Tape::new();
        let e = rows(&mut t, &[1.0, 0.0, 0.0, 1.0], 2);
        let l = contrastive_loss(&mut t, e, &[pair(0, 1, false)], &LossConfig::default()).unwrap();
        assert_eq!(t.value(l).data()[0], 0.0);
    }

    #[test]
    fn mixed_pairs_by_hand() {
        // D^2 = 0.25 for both pairs: positive contributes 0.25, negative 0.75
        let mut t = Tape::new();
        let e = rows(&mut t, &[0.0, 0.0, 0.5, 0.0, 1.0, 1.0, 1.0, 1.5], 2);
        let pairs = [pair(0, 1, true), pair(2, 3, false)];
        let l = contrastive_loss(&mut t, e, &pairs, &LossConfig::default()).unwrap();
        assert!((t.value(l).data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn stacked_layout_agrees() {
        let data = [0.0, 0.0, 0.5, 0.0, 1.0, 1.0, 1.0, 1.5];
        let stacked = Tensor::new(vec![2, 2, 2], data.to_vec()).unwrap();
        let v = contrastive_value_stacked(&stacked, &[true, false], &LossConfig::default()).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        let mut t = Tape::new();
        let s = t.param(stacked);
        let l = contrastive_loss_stacked(&mut t, s, &[true, false], &LossConfig::default()).unwrap();
        assert!((t.value(l).data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn no_pairs_is_usage_error() {
        let mut t = Tape::new();
        let e = rows(&mut t, &[0.0, 1.0], 2);
        assert!(matches!(contrastive_loss(&mut t, e, &[], &LossConfig::default()), Err(Error::Usage(_))));
    }

    #[test]
    fn divergence_examples() {
        let cfg = LossConfig::default();
        let cases: [(&[f64], &[f64], f64); 3] = [
            (&[0.6, 0.8], &[0.6, 0.8], 1.0),
            (&[1.0, 0.0], &[0.0, 1.0], 0.0),
            (&[0.6, 0.8], &[1.0, 0.0], 0.2),
        ];
        for (a, b, want) in cases {
            let mut t = Tape::new();
            let (va, vb) = (rows(&mut t, a, 2), rows(&mut t, b, 2));
            let l = divergence_loss(&mut t, &[va, vb], &cfg).unwrap();
            assert!((t.value(l).data()[0] - want).abs() < 1e-12, "{a:?} {b:?}");
        }
    }

    #[test]
    fn single_learner_divergence_is_zero() {
        let mut t = Tape::new();
        let e = rows(&mut t, &[0.6, 0.8], 2);
        let l = divergence_loss(&mut t, &[e], &LossConfig::default()).unwrap();
        assert_eq!(t.value(l).data()[0], 0.0);
    }

    #[test]
    fn total_composes_terms() {
        // learner 0: pairs give (0.25 + 0.75)/2 = 0.5
        // learner 1: positive D^2 = 0, negative D^2 = 2 -> 0
        // self pairs: sample 0 d^2 = 0 -> 1; others vary
        let l0: [f64; 8] = [0.0, 0.0, 0.5, 0.0, 1.0, 1.0, 1.0, 1.5];
        let l1: [f64; 8] = [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let pairs = [pair(0, 1, true), pair(2, 3, false)];
        let cfg = LossConfig {
            lambda_div: 0.5,
            ..LossConfig::default()
        };
        let mut div = 0.0;
        for i in 0..4 {
            let d2: f64 = (0..2).map(|k| (l0[2 * i + k] - l1[2 * i + k]).powi(2)).sum();
            div += (1.0 - d2).max(0.0);
        }
        let mut t = Tape::new();
        let (a, b) = (rows(&mut t, &l0, 2), rows(&mut t, &l1, 2));
        let (total, br) = total_loss(&mut t, &[a, b], &pairs, &cfg).unwrap();
        assert!((br.metric[0] - 0.5).abs() < 1e-15);
        assert_eq!(br.metric[1], 0.0);
        assert!((br.divergence - div).abs() < 1e-15);
        assert!((t.value(total).data()[0] - (0.5 + 0.5 * div)).abs() < 1e-15);
    }

    #[test]
    fn lambda_zero_is_sum_of_metric_terms() {
        let cfg = LossConfig {
            lambda_div: 0.0,
            ..LossConfig::default()
        };
        let mut t = Tape::new();
        let a = rows(&mut t, &[0.0, 0.0, 0.5, 0.0], 2);
        let b = rows(&mut t, &[0.0, 0.1, 0.2, 0.0], 2);
        let (total, br) = total_loss(&mut t, &[a, b], &[pair(0, 1, true)], &cfg).unwrap();
        assert!((t.value(total).data()[0] - (br.metric[0] + br.metric[1])).abs() < 1e-15);
        assert!(br.divergence > 0.0);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = LossConfig {
            contrastive_margin: 0.0,
            divergence_margin: -1.0,
            lambda_div: -0.1,
        };
        match cfg.validate() {
            Err(Error::Config(v)) => assert_eq!(v.len(), 3),
            other => panic!("{other:?}"),
        }
    }
}
