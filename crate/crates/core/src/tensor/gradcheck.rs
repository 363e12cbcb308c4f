//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Tape, Tensor, Var};

/// Builds a scalar from the given leaves.
pub trait TapeFn<T: Scalar>: Fn(&mut Tape<T>, &[Var]) -> Result<Var> {}
impl<T: Scalar, F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>> TapeFn<T> for F {}

fn evaluate<T: Scalar>(f: &impl TapeFn<T>, xs: &[Tensor<T>]) -> Result<T> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone().with_grad(false))).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(Error::shape(
            "finite_diff_check",
            format!("f returned shape {:?}", value.shape()),
        ));
    }
    Ok(value.item())
}

/// Max over every coordinate of every input of
/// `|analytic - central| / (|analytic| + |central| + 1e-12)`.
pub fn finite_diff_check_many<T: Scalar>(f: impl TapeFn<T>, xs: &[Tensor<T>], step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::invalid(format!("step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone().with_grad(true))).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::shape(
            "finite_diff_check",
            format!("f returned shape {:?}", tape.value(out).shape()),
        ));
    }
    let grads = tape.backward(out)?;
    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<T>> = xs.to_vec();
    for (slot, (x, v)) in xs.iter().zip(&vars).enumerate() {
        let analytic = grads.get(*v).expect("leaf requires grad");
        for i in 0..x.numel() {
            let orig = x.data()[i];
            probe[slot].data_mut()[i] = orig + T::of(step);
            let plus = evaluate(&f, &probe)?.as_f64();
            probe[slot].data_mut()[i] = orig - T::of(step);
            let minus = evaluate(&f, &probe)?.as_f64();
            probe[slot].data_mut()[i] = orig;
            let central = (plus - minus) / (2.0 * step);
            let a = analytic.data()[i].as_f64();
            let rel = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Single-input form of [`finite_diff_check_many`].
pub fn finite_diff_check<T: Scalar>(
    f: impl Fn(&mut Tape<T>, Var) -> Result<Var>,
    x: &Tensor<T>,
    step: f64,
) -> Result<f64> {
    finite_diff_check_many(
        move |g: &mut Tape<T>, v: &[Var]| f(g, v[0]),
        std::slice::from_ref(x),
        step,
    )
}
