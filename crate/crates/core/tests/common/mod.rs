#![allow(dead_code)]

use abe_core::autodiff::{Tape, Var};
use abe_core::evaluation::EmbeddingSet;
use abe_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL: f64 = 1e-4;
pub const FD_ABS: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for kinks at the origin.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Pairwise distinct values at least 0.008 apart, for max-pool ties.
pub fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let data = order.iter().map(|&k| k as f64 * 0.01 - 0.5 + rng.random_range(0.0..0.001)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds a scalar loss on a fresh tape from leaves holding `inputs`.
pub type Builder<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn eval(inputs: &[Tensor], build: &Builder) -> f64 {
    let mut tape = Tape::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.value(out).data()[0]
}

/// Worst ratio of |analytic - numeric| to the allowed tolerance
/// `max(FD_REL * scale, FD_ABS)` over every input element; at most 1 passes.
pub fn grad_check(inputs: &[Tensor], build: &Builder) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    assert!(tape.value(out).is_scalar(), "loss must be scalar");
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus, build) - eval(&minus, build)) / (2.0 * FD_STEP);
            let a = analytic[i];
            let tol = (FD_REL * a.abs().max(numeric.abs())).max(FD_ABS);
            worst = worst.max((a - numeric).abs() / tol);
        }
    }
    worst
}

/// `sum(out * w)` for a fixed random `w`, turning any output into a scalar
/// whose gradient exercises every output element.
pub fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let w = uniform(&mut rng(seed), &shape, -1.0, 1.0);
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s
}

/// Double-loop contrastive loss over `rows` of width `d`.
pub fn naive_contrastive(rows: &[f64], d: usize, pairs: &[(usize, usize, bool)], margin: f64) -> f64 {
    let mut total = 0.0;
    for &(i, j, same) in pairs {
        let mut d2 = 0.0;
        for c in 0..d {
            let diff = rows[i * d + c] - rows[j * d + c];
            d2 += diff * diff;
        }
        total += if same {
            d2
        } else if margin > d2 {
            margin - d2
        } else {
            0.0
        };
    }
    total / pairs.len() as f64
}

/// Double-loop divergence loss: learners `[M][B*d]`.
pub fn naive_divergence(learners: &[Vec<f64>], d: usize, margin: f64) -> f64 {
    let b = learners[0].len() / d;
    let mut total = 0.0;
    for i in 0..b {
        for p in 0..learners.len() {
            for q in 0..learners.len() {
                if p < q {
                    let d2 = sq_dist(&learners[p][i * d..(i + 1) * d], &learners[q][i * d..(i + 1) * d]);
                    if margin > d2 {
                        total += margin - d2;
                    }
                }
            }
        }
    }
    total
}

/// Brute-force ensemble Recall@K: a candidate's rank counts strictly closer
/// samples plus equally close samples with a lower index.
pub fn brute_recall(e: &EmbeddingSet, k: usize) -> f64 {
    let n = e.len();
    let m = e.learners();
    let dist = |i: usize, j: usize| -> f64 {
        let mut s = 0.0;
        for l in 0..m {
            s += sq_dist(e.get(i, l), e.get(j, l)).sqrt();
        }
        s / m as f64
    };
    let mut hits = 0;
    for q in 0..n {
        let hit = (0..n).filter(|&j| j != q).any(|j| {
            if e.labels()[j] != e.labels()[q] {
                return false;
            }
            let dj = dist(q, j);
            let rank = (0..n)
                .filter(|&l| l != q && l != j)
                .filter(|&l| {
                    let dl = dist(q, l);
                    dl < dj || (dl == dj && l < j)
                })
                .count();
            rank < k
        });
        if hit {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

/// Random embedding set with `n` samples, `m` learners of width `d` and
/// labels drawn from `classes` classes.
pub fn random_set(rng: &mut ChaCha8Rng, n: usize, m: usize, d: usize, classes: u32, unit: bool) -> EmbeddingSet {
    let mut data: Vec<f64> = (0..n * m * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    if unit {
        for chunk in data.chunks_mut(d) {
            let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
            chunk.iter_mut().for_each(|v| *v /= norm);
        }
    }
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    EmbeddingSet::new(n, m, d, data, labels).unwrap()
}

pub type Boxed = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// A named gradient-check scenario: draws inputs and the loss builder.
pub struct GradCase {
    pub name: &'static str,
    pub make: fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Boxed),
}

fn pairs_away_from_margin(
    rng: &mut ChaCha8Rng,
    rows: usize,
    d: usize,
    count: usize,
    margin: f64,
) -> (Tensor, Vec<abe_core::sampler::Pair>) {
    loop {
        let x = uniform(rng, &[rows, d], -0.6, 0.6);
        let pairs: Vec<abe_core::sampler::Pair> = (0..count)
            .map(|k| {
                let anchor = rng.random_range(0..rows);
                let partner = (anchor + 1 + rng.random_range(0..rows - 1)) % rows;
                abe_core::sampler::Pair {
                    anchor,
                    partner,
                    same_label: k % 2 == 0,
                }
            })
            .collect();
        let ok = pairs.iter().all(|p| {
            let d2 = sq_dist(&x.data()[p.anchor * d..(p.anchor + 1) * d], &x.data()[p.partner * d..(p.partner + 1) * d]);
            (d2 - margin).abs() > 1e-3
        });
        if ok {
            return (x, pairs);
        }
    }
}

fn learners_away_from_margin(rng: &mut ChaCha8Rng, m: usize, b: usize, d: usize, margin: f64) -> Vec<Tensor> {
    loop {
        let ls: Vec<Tensor> = (0..m).map(|_| uniform(rng, &[b, d], -0.5, 0.5)).collect();
        let ok = (0..b).all(|i| {
            (0..m).all(|p| {
                (p + 1..m).all(|q| {
                    let d2 = sq_dist(&ls[p].data()[i * d..(i + 1) * d], &ls[q].data()[i * d..(i + 1) * d]);
                    (d2 - margin).abs() > 1e-3
                })
            })
        });
        if ok {
            return ls;
        }
    }
}

pub fn grad_cases() -> Vec<GradCase> {
    use abe_core::losses::{contrastive_loss, divergence_loss, total_loss, LossConfig};
    vec![
        GradCase {
            name: "linear",
            make: |r| {
                let ins = vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 5], -1.0, 1.0), uniform(r, &[5], -1.0, 1.0)];
                (ins, Box::new(|t, v| {
                    let o = t.linear(v[0], v[1], v[2])?;
                    weighted_sum(t, o, 1)
                }))
            },
        },
        GradCase {
            name: "conv2d 3x3",
            make: |r| {
                let ins = vec![uniform(r, &[2, 2, 5, 4], -1.0, 1.0), uniform(r, &[3, 2, 3, 3], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)];
                (ins, Box::new(|t, v| {
                    let o = t.conv2d(v[0], v[1], v[2])?;
                    weighted_sum(t, o, 2)
                }))
            },
        },
        GradCase {
            name: "conv2d 1x1",
            make: |r| {
                let ins = vec![uniform(r, &[2, 3, 3, 3], -1.0, 1.0), uniform(r, &[2, 3, 1, 1], -1.0, 1.0), uniform(r, &[2], -1.0, 1.0)];
                (ins, Box::new(|t, v| {
                    let o = t.conv2d(v[0], v[1], v[2])?;
                    weighted_sum(t, o, 3)
                }))
            },
        },
        GradCase {
            name: "relu",
            make: |r| {
                (vec![away_from_zero(r, &[3, 5])], Box::new(|t, v| {
                    let o = t.relu(v[0])?;
                    weighted_sum(t, o, 4)
                }))
            },
        },
        GradCase {
            name: "sigmoid",
            make: |r| {
                (vec![uniform(r, &[2, 3, 2], -4.0, 4.0)], Box::new(|t, v| {
                    let o = t.sigmoid(v[0])?;
                    weighted_sum(t, o, 5)
                }))
            },
        },
        GradCase {
            name: "elementwise_mul",
            make: |r| {
                (vec![uniform(r, &[2, 3, 2, 2], -1.0, 1.0), uniform(r, &[2, 3, 2, 2], 0.0, 1.0)], Box::new(|t, v| {
                    let o = t.mul(v[0], v[1])?;
                    weighted_sum(t, o, 6)
                }))
            },
        },
        GradCase {
            name: "add",
            make: |r| {
                (vec![uniform(r, &[4, 3], -1.0, 1.0), uniform(r, &[4, 3], -1.0, 1.0)], Box::new(|t, v| {
                    let o = t.add(v[0], v[1])?;
                    weighted_sum(t, o, 7)
                }))
            },
        },
        GradCase {
            name: "scale",
            make: |r| {
                (vec![uniform(r, &[6], -1.0, 1.0)], Box::new(|t, v| {
                    let o = t.scale(v[0], -2.5)?;
                    weighted_sum(t, o, 8)
                }))
            },
        },
        GradCase {
            name: "max_pool2d",
            make: |r| {
                (vec![distinct(r, &[2, 2, 4, 6])], Box::new(|t, v| {
                    let o = t.max_pool2d(v[0])?;
                    weighted_sum(t, o, 9)
                }))
            },
        },
        GradCase {
            name: "global_avg_pool",
            make: |r| {
                (vec![uniform(r, &[2, 3, 3, 2], -1.0, 1.0)], Box::new(|t, v| {
                    let o = t.global_avg_pool(v[0])?;
                    weighted_sum(t, o, 10)
                }))
            },
        },
        GradCase {
            name: "flatten/reshape",
            make: |r| {
                (vec![uniform(r, &[2, 2, 2, 3], -1.0, 1.0)], Box::new(|t, v| {
                    let f = t.flatten(v[0])?;
                    let o = t.reshape(f, vec![4, 6])?;
                    weighted_sum(t, o, 11)
                }))
            },
        },
        GradCase {
            name: "concat",
            make: |r| {
                (vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 2], -1.0, 1.0), uniform(r, &[1, 5], -1.0, 1.0)], Box::new(|t, v| {
                    let a = t.concat(&[v[0], v[1]], 1)?;
                    let o = t.concat(&[a, v[2]], 0)?;
                    weighted_sum(t, o, 12)
                }))
            },
        },
        GradCase {
            name: "l2_normalize",
            make: |r| {
                (vec![uniform(r, &[3, 4], -1.0, 1.0)], Box::new(|t, v| {
                    let o = t.l2_normalize(v[0], 1e-12)?;
                    weighted_sum(t, o, 13)
                }))
            },
        },
        GradCase {
            name: "sum",
            make: |r| (vec![uniform(r, &[3, 2], -1.0, 1.0)], Box::new(|t, v| t.sum(v[0]))),
        },
        GradCase {
            name: "contrastive loss",
            make: |r| {
                let (x, pairs) = pairs_away_from_margin(r, 6, 3, 5, 1.0);
                (vec![x], Box::new(move |t, v| contrastive_loss(t, v[0], &pairs, &LossConfig::default())))
            },
        },
        GradCase {
            name: "divergence loss",
            make: |r| {
                let ls = learners_away_from_margin(r, 3, 4, 3, 1.0);
                (ls, Box::new(|t, v| divergence_loss(t, v, &LossConfig::default())))
            },
        },
        GradCase {
            name: "total loss (normalized)",
            make: |r| {
                let (x, y, pairs) = normalized_case(r);
                (vec![x, y], Box::new(move |t, v| {
                    let a = t.l2_normalize(v[0], 1e-12)?;
                    let b = t.l2_normalize(v[1], 1e-12)?;
                    let cfg = LossConfig {
                        lambda_div: 0.7,
                        ..LossConfig::default()
                    };
                    Ok(total_loss(t, &[a, b], &pairs, &cfg)?.0)
                }))
            },
        },
    ]
}

fn unit_rows(t: &Tensor, d: usize) -> Vec<f64> {
    let mut v = t.data().to_vec();
    for row in v.chunks_mut(d) {
        let n = row.iter().map(|a| a * a).sum::<f64>().sqrt();
        row.iter_mut().for_each(|a| *a /= n);
    }
    v
}

/// Two learners' rows whose normalized pair and cross-learner distances
/// all avoid the unit margin.
fn normalized_case(r: &mut ChaCha8Rng) -> (Tensor, Tensor, Vec<abe_core::sampler::Pair>) {
    let (rows, d) = (6, 3);
    loop {
        let (x, pairs) = pairs_away_from_margin(r, rows, d, 4, f64::INFINITY);
        let y = uniform(r, &[rows, d], -0.6, 0.6);
        let (ux, uy) = (unit_rows(&x, d), unit_rows(&y, d));
        let away = |a: &[f64], i: usize, b: &[f64], j: usize| (sq_dist(&a[i * d..(i + 1) * d], &b[j * d..(j + 1) * d]) - 1.0).abs() > 1e-3;
        let ok = pairs.iter().all(|p| away(&ux, p.anchor, &ux, p.partner) && away(&uy, p.anchor, &uy, p.partner))
            && (0..rows).all(|i| away(&ux, i, &uy, i));
        if ok {
            return (x, y, pairs);
        }
    }
}

/// Parameter count from layer specs alone: conv `K*C*k*k + K`, linear
/// `I*O + O`.
pub fn closed_form_params(variant: abe_core::model::Variant, cfg: &abe_core::model::BackboneConfig) -> usize {
    use abe_core::model::{EmbedPooling, LayerSpec, Variant};
    let mut c = cfg.input_shape[0];
    let (mut h, mut w) = (cfg.input_shape[1], cfg.input_shape[2]);
    let (mut s, mut g) = (0, 0);
    let mut spatial_c = 0;
    for (i, layer) in cfg.trunk.iter().enumerate() {
        if i == cfg.branch_point {
            spatial_c = c;
        }
        let n = match *layer {
            LayerSpec::Conv { channels, kernel, .. } => {
                let n = channels * c * kernel * kernel + channels;
                c = channels;
                n
            }
            LayerSpec::MaxPool => {
                h /= 2;
                w /= 2;
                0
            }
        };
        if i < cfg.branch_point {
            s += n;
        } else {
            g += n;
        }
    }
    let flat = match cfg.pooling {
        EmbedPooling::Flatten => c * h * w,
        EmbedPooling::Average => c,
    };
    let d = cfg.embedding_dim / cfg.learners;
    g += flat * d + d;
    let k = cfg.attention_kernel;
    let att_trunk = cfg.attention_depth * (spatial_c * spatial_c * k * k + spatial_c);
    let head = spatial_c * spatial_c + spatial_c;
    let m = cfg.learners;
    match variant {
        Variant::Single => s + g,
        Variant::MHeads => s + m * g,
        Variant::MTails => m * s + g,
        Variant::MHeadsAtt => s + att_trunk + m * head + m * g,
        Variant::Abe => s + att_trunk + m * head + g,
    }
}
