mod common;

use cardialign::tensor::{apply_primitive, Primitive};
use cardialign::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{check, random};

#[test]
fn every_primitive_matches_central_differences_over_100_seeds() {
    let tol = 1e-4;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cases = common::primitive_cases(&mut rng);
        for (kind, inputs, out_shape) in cases {
            let err = check(&kind, inputs, &out_shape, &mut rng);
            assert!(err < tol, "seed {seed}: {} relative error {err:e}", kind.name());
        }
    }
}

#[test]
fn conv3d_of_ones_sums_the_kernel_support() {
    let x = Tensor::<f64>::full(&[1, 4, 4, 4], 1.0);
    let w = Tensor::<f64>::full(&[1, 1, 3, 3, 3], 1.0);
    let y = apply_primitive(
        &Primitive::Conv3d {
            stride: [1; 3],
            padding: [0; 3],
        },
        &[&x, &w],
    )
    .unwrap();
    assert_eq!(y.shape(), &[1, 2, 2, 2]);
    assert!(y.data().iter().all(|&v| v == 27.0));
}

#[test]
fn conv3d_identity_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[1, 3, 5, 4]);
    let w = Tensor::<f64>::full(&[1, 1, 1, 1, 1], 1.0);
    let y = apply_primitive(
        &Primitive::Conv3d {
            stride: [1; 3],
            padding: [0; 3],
        },
        &[&x, &w],
    )
    .unwrap();
    assert_eq!(y, x);
}

#[test]
fn conv3d_uses_cross_correlation() {
    // A kernel that picks its last tap reads the input one step ahead.
    let x = Tensor::<f64>::new(vec![1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let w = Tensor::<f64>::new(vec![1, 1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
    let y = apply_primitive(
        &Primitive::Conv3d {
            stride: [1; 3],
            padding: [0; 3],
        },
        &[&x, &w],
    )
    .unwrap();
    assert_eq!(y.data(), &[2.0, 3.0, 4.0]);
}

#[test]
fn shape_errors_name_the_primitive() {
    let a = Tensor::<f64>::zeros(&[2, 3]);
    let b = Tensor::<f64>::zeros(&[4, 2]);
    let err = apply_primitive(&Primitive::MatMul { trans_b: false }, &[&a, &b]).unwrap_err();
    let msg = err.to_string();
    assert!(
        msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 2]"),
        "{msg}"
    );
    let err = apply_primitive(&Primitive::Add, &[&a, &Tensor::zeros(&[2])]).unwrap_err();
    assert!(err.to_string().contains("add"));
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let x = Tensor::<f64>::vector(vec![0.0, 0.0]);
    let y = apply_primitive(&Primitive::Softmax, &[&x]).unwrap();
    assert_eq!(y.data(), &[0.5, 0.5]);
}

#[test]
fn softmax_rows_are_distributions() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::from_fn(&[4, 9], |_| rng.random_range(-30.0..30.0));
        let y = apply_primitive(&Primitive::Softmax, &[&x]).unwrap();
        for r in 0..4 {
            let row = y.row(r);
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_norm_standardizes_rows() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = rng.random_range(1.0..5.0);
        let shift = rng.random_range(-10.0..10.0);
        let x = Tensor::<f64>::from_fn(&[5, 16], |_| shift + scale * rng.random_range(-1.0..1.0));
        let y = apply_primitive(&Primitive::LayerNorm { eps: 1e-9 }, &[&x]).unwrap();
        for r in 0..5 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-8, "var {var}");
        }
    }
}

#[test]
fn primitives_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[3, 6, 6, 6]);
    let w = random(&mut rng, &[4, 3, 3, 3, 3]);
    let kind = Primitive::Conv3d {
        stride: [2, 1, 2],
        padding: [1, 1, 1],
    };
    let first = apply_primitive(&kind, &[&x, &w]).unwrap();
    let second = apply_primitive(&kind, &[&x, &w]).unwrap();
    assert_eq!(
        first.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        second.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn l2_normalize_rejects_zero_rows() {
    let x = Tensor::<f64>::zeros(&[1, 3]);
    assert!(apply_primitive(&Primitive::L2Normalize, &[&x]).is_err());
}

#[test]
fn f32_mode_runs_the_same_primitives() {
    let x = Tensor::<f32>::vector(vec![0.5, -1.0, 2.0]);
    let mut g = Tape::<f32>::new();
    let v = g.leaf(x.with_grad(true));
    let y = g.gelu(v).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    let expect = [0.8674f32, -0.0833, 1.0852];
    for (a, b) in grads.get(v).unwrap().data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-3);
    }
}
