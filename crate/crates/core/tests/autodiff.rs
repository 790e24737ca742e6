mod common;

use abe_core::autodiff::{OpKind, OptimizerState, Tape};
use abe_core::Tensor;
use common::{grad_cases, grad_check, rng, uniform};
use proptest::prelude::*;

#[test]
fn finite_differences_every_primitive_and_loss() {
    for case in grad_cases() {
        for instance in 0..10 {
            let mut r = rng(1000 + instance);
            let (inputs, build) = (case.make)(&mut r);
            let worst = grad_check(&inputs, build.as_ref());
            assert!(worst <= 1.0, "{} instance {instance}: error ratio {worst}", case.name);
        }
    }
}

#[test]
fn random_three_layer_network() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let inputs = vec![
            uniform(&mut r, &[2, 1, 4, 4], -1.0, 1.0),
            uniform(&mut r, &[3, 1, 3, 3], -0.8, 0.8),
            uniform(&mut r, &[3], -0.1, 0.1),
            uniform(&mut r, &[12, 4], -0.5, 0.5),
            uniform(&mut r, &[4], -0.1, 0.1),
            uniform(&mut r, &[4, 2], -0.5, 0.5),
            uniform(&mut r, &[2], -0.1, 0.1),
        ];
        let worst = grad_check(&inputs, &|t, v| {
            let c = t.conv2d(v[0], v[1], v[2])?;
            let c = t.sigmoid(c)?;
            let p = t.max_pool2d(c)?;
            let f = t.flatten(p)?;
            let h = t.linear(f, v[3], v[4])?;
            let h = t.sigmoid(h)?;
            let o = t.linear(h, v[5], v[6])?;
            let n = t.l2_normalize(o, 1e-12)?;
            common::weighted_sum(t, n, 77)
        });
        assert!(worst <= 1.0, "seed {seed}: {worst}");
    }
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let s = t.sum(x).unwrap();
    assert_eq!(t.backward(s).unwrap().get(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut t = Tape::new();
    let x = t.param(Tensor::from_vec(vec![1.0, 2.0]));
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq).unwrap();
    assert_eq!(t.backward(s).unwrap().get(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_and_inference() {
    let mut t = Tape::new();
    let x = t.param(Tensor::from_vec(vec![1.0, 2.0]));
    assert_eq!(t.backward(x).unwrap_err().exit_code(), 2);

    let mut t = Tape::inference();
    let x = t.constant(Tensor::from_vec(vec![1.0]));
    let s = t.sum(x).unwrap();
    assert!(t.backward(s).is_err());
}

#[test]
fn forward_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
    let w = t.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = t.constant(Tensor::zeros(&[2]));
    let y = t.linear(x, w, b).unwrap();
    assert_eq!(t.value(y).data(), &[4.0, 6.0]);

    let r = t.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
    let r = t.relu(r).unwrap();
    assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);

    let z = t.constant(Tensor::from_vec(vec![0.0]));
    let z = t.sigmoid(z).unwrap();
    assert_eq!(t.value(z).data(), &[0.5]);

    let v = t.constant(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
    let n = t.l2_normalize(v, 1e-12).unwrap();
    assert!((t.value(n).data()[0] - 0.6).abs() < 1e-15 && (t.value(n).data()[1] - 0.8).abs() < 1e-15);
}

#[test]
fn conv_averaging_kernel_by_hand() {
    let grid: Vec<f64> = (1..=16).map(f64::from).collect();
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![1, 1, 4, 4], grid.clone()).unwrap());
    let k = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0));
    let b = t.constant(Tensor::zeros(&[1]));
    let y = t.conv2d(x, k, b).unwrap();
    // Zero-padded 3x3 box sums of the 4x4 grid 1..16, divided by 9.
    let sums = [14.0, 24.0, 30.0, 22.0, 33.0, 54.0, 63.0, 45.0, 57.0, 90.0, 99.0, 69.0, 46.0, 72.0, 78.0, 54.0];
    for (got, want) in t.value(y).data().iter().zip(sums) {
        assert!((got - want / 9.0).abs() < 1e-12);
    }
}

#[test]
fn conv_rejects_even_kernel() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 1, 4, 4]));
    let k = t.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let b = t.constant(Tensor::zeros(&[1]));
    assert_eq!(t.conv2d(x, k, b).unwrap_err().exit_code(), 2);
}

#[test]
fn tape_is_topologically_ordered() {
    let mut t = Tape::new();
    let a = t.param(Tensor::from_vec(vec![1.0, -2.0]));
    let b = t.relu(a).unwrap();
    let c = t.mul(a, b).unwrap();
    let d = t.sum(c).unwrap();
    for v in [b, c, d] {
        assert!(t.inputs(v).iter().all(|i| i.index() < v.index()));
    }
    assert_eq!(t.kind(a), OpKind::Leaf);
}

#[test]
fn momentum_unrolls_by_hand() {
    let mut p = vec![Tensor::from_vec(vec![0.0])];
    let mut opt = OptimizerState::new(&p, 1.0, 0.9).unwrap();
    for _ in 0..2 {
        p[0].set_grad(vec![1.0]).unwrap();
        opt.step(&mut p).unwrap();
    }
    assert!((p[0].data()[0] + 2.9).abs() < 1e-12);
}

fn shape_strategy() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..3, 1usize..4, 1usize..5, 1usize..5).prop_map(|(b, c, h, w)| (b, c, 2 * h, 2 * w))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shapes_follow_the_oracle((b, c, h, w) in shape_strategy(), k in 1usize..4, kernel in prop::sample::select(vec![1usize, 3, 5])) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[b, c, h, w]));
        let ker = t.constant(Tensor::zeros(&[k, c, kernel, kernel]));
        let bias = t.constant(Tensor::zeros(&[k]));
        let y = t.conv2d(x, ker, bias).unwrap();
        prop_assert_eq!(t.value(y).shape(), &[b, k, h, w]);
        let p = t.max_pool2d(y).unwrap();
        prop_assert_eq!(t.value(p).shape(), &[b, k, h / 2, w / 2]);
        let g = t.global_avg_pool(p).unwrap();
        prop_assert_eq!(t.value(g).shape(), &[b, k]);
        let f = t.flatten(p).unwrap();
        prop_assert_eq!(t.value(f).shape(), &[b, k * h * w / 4]);
        let cat = t.concat(&[f, f], 1).unwrap();
        prop_assert_eq!(t.value(cat).shape(), &[b, k * h * w / 2]);
        let rows = t.concat(&[f, f, f], 0).unwrap();
        prop_assert_eq!(t.value(rows).shape(), &[3 * b, k * h * w / 4]);
    }

    #[test]
    fn sigmoid_in_open_unit_interval(v in prop::collection::vec(-30.0f64..30.0, 1..20)) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(v));
        let s = t.sigmoid(x).unwrap();
        prop_assert!(t.value(s).data().iter().all(|&y| y > 0.0 && y < 1.0));
    }

    #[test]
    fn l2_normalize_gives_unit_rows(rows in 1usize..5, v in prop::collection::vec(0.01f64..3.0, 12)) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![rows, 3], v[..rows * 3].to_vec()).unwrap());
        let n = t.l2_normalize(x, 1e-12).unwrap();
        for row in t.value(n).data().chunks(3) {
            prop_assert!((row.iter().map(|a| a * a).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mul_by_ones_is_identity(v in prop::collection::vec(-5.0f64..5.0, 1..30)) {
        let mut t = Tape::new();
        let n = v.len();
        let x = t.constant(Tensor::from_vec(v.clone()));
        let ones = t.constant(Tensor::full(&[n], 1.0));
        let y = t.mul(x, ones).unwrap();
        prop_assert_eq!(t.value(y).data(), &v[..]);
    }

    #[test]
    fn concat_mismatch_is_dimension_error(a in 1usize..4, b in 1usize..4) {
        prop_assume!(a != b);
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[a, 2]));
        let y = t.constant(Tensor::zeros(&[b, 2]));
        prop_assert!(t.concat(&[x, y], 1).is_err());
        prop_assert!(t.concat(&[x, y], 0).is_ok());
    }

    #[test]
    fn linear_shape_mismatch_is_error(i in 1usize..5, j in 1usize..5) {
        prop_assume!(i != j);
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, i]));
        let w = t.constant(Tensor::zeros(&[j, 3]));
        let b = t.constant(Tensor::zeros(&[3]));
        prop_assert_eq!(t.linear(x, w, b).unwrap_err().exit_code(), 2);
    }
}
