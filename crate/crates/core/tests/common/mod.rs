//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use cardialign::tensor::{finite_diff_check_many, Primitive};
use cardialign::{Result, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.5..1.5))
}

/// Values bounded away from zero, for kinks such as ReLU.
pub fn random_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.1..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Weighted sum of `f(inputs)` so every output coordinate matters.
pub fn weighted<F>(weights: Tensor<f64>, f: F) -> impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    move |g, xs| {
        let y = f(g, xs)?;
        let w = g.constant(weights.clone().reshape(g.shape(y))?);
        let p = g.mul(y, w)?;
        g.sum(p)
    }
}

pub fn check(kind: &Primitive, inputs: Vec<Tensor<f64>>, out_shape: &[usize], rng: &mut ChaCha8Rng) -> f64 {
    let w = random(rng, out_shape);
    let k = kind.clone();
    let f = weighted(w, move |g, xs| g.apply(k.clone(), xs));
    finite_diff_check_many(f, &inputs, 1e-5).unwrap()
}

/// One `(primitive, inputs, output shape)` case per differentiable primitive.
pub fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(Primitive, Vec<Tensor<f64>>, Vec<usize>)> {
    let mut cases: Vec<(Primitive, Vec<Tensor<f64>>, Vec<usize>)> = Vec::new();
    let a = random(rng, &[3, 4]);
    cases.push((Primitive::Add, vec![a.clone(), random(rng, &[4])], vec![3, 4]));
    cases.push((Primitive::Sub, vec![a.clone(), random(rng, &[3, 4])], vec![3, 4]));
    cases.push((Primitive::Mul, vec![a.clone(), random(rng, &[4])], vec![3, 4]));
    let denom = Tensor::from_fn(&[1], |_| rng.random_range(0.5..2.0));
    cases.push((Primitive::Div, vec![a.clone(), denom], vec![3, 4]));
    cases.push((Primitive::Neg, vec![a.clone()], vec![3, 4]));
    cases.push((Primitive::Scale(-0.7), vec![a.clone()], vec![3, 4]));
    cases.push((Primitive::AddScalar(0.3), vec![a.clone()], vec![3, 4]));
    cases.push((Primitive::Exp, vec![a.clone()], vec![3, 4]));
    cases.push((Primitive::Relu, vec![random_off_zero(rng, &[3, 4])], vec![3, 4]));
    cases.push((Primitive::Gelu, vec![a.clone()], vec![3, 4]));
    cases.push((Primitive::Softplus, vec![a.clone()], vec![3, 4]));
    cases.push((
        Primitive::MatMul { trans_b: false },
        vec![a.clone(), random(rng, &[4, 2])],
        vec![3, 2],
    ));
    cases.push((
        Primitive::MatMul { trans_b: true },
        vec![random(rng, &[2, 3, 4]), random(rng, &[2, 5, 4])],
        vec![2, 3, 5],
    ));
    cases.push((
        Primitive::Permute(vec![2, 0, 1]),
        vec![random(rng, &[2, 3, 4])],
        vec![4, 2, 3],
    ));
    cases.push((Primitive::Reshape(vec![4, 3]), vec![a.clone()], vec![4, 3]));
    cases.push((Primitive::Sum, vec![a.clone()], vec![]));
    cases.push((Primitive::Mean, vec![a.clone()], vec![]));
    cases.push((Primitive::SumAxis(1), vec![random(rng, &[2, 3, 4])], vec![2, 4]));
    cases.push((Primitive::MeanAxis(0), vec![a.clone()], vec![4]));
    cases.push((Primitive::Softmax, vec![a.clone()], vec![3, 4]));
    cases.push((Primitive::LogSumExp, vec![a.clone()], vec![3]));
    cases.push((Primitive::LayerNorm { eps: 1e-9 }, vec![a.clone()], vec![3, 4]));
    cases.push((Primitive::L2Normalize, vec![a.clone()], vec![3, 4]));
    cases.push((
        Primitive::Conv1d { stride: 2, padding: 1 },
        vec![random(rng, &[2, 7]), random(rng, &[3, 2, 3])],
        vec![3, 4],
    ));
    cases.push((
        Primitive::Conv3d {
            stride: [1, 2, 1],
            padding: [1, 0, 1],
        },
        vec![random(rng, &[2, 3, 4, 3]), random(rng, &[2, 2, 3, 2, 3])],
        vec![2, 3, 2, 3],
    ));
    cases.push((Primitive::IndexRows(vec![2, 0, 2]), vec![a.clone()], vec![3, 4]));
    cases.push((
        Primitive::Concat,
        vec![a.clone(), random(rng, &[1, 4]), random(rng, &[2, 4])],
        vec![6, 4],
    ));
    cases.push((Primitive::Mse, vec![a.clone(), random(rng, &[3, 4])], vec![]));
    cases
}
