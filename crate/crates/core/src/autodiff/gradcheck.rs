use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Analytic gradient of a scalar function at `x`.
pub fn analytic_gradient<T, F>(f: &F, x: &Tensor<T>) -> Result<(T, Tensor<T>)>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    let grads = tape.backward(y)?;
    Ok((tape.value(y).item(), grads.wrt(&tape, xv)))
}

fn eval<T, F>(f: &F, x: Tensor<T>) -> Result<T>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let y = f(&mut tape, xv)?;
    if !tape.value(y).is_scalar() {
        return Err(Error::Shape("gradient check needs a scalar function".into()));
    }
    Ok(tape.value(y).item())
}

/// Central-difference gradient `(f(x+eps·eᵢ) − f(x−eps·eᵢ)) / 2eps`.
pub fn numeric_gradient<T, F>(f: &F, x: &Tensor<T>, eps: T) -> Result<Tensor<T>>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        out.data_mut()[i] = (eval(f, plus)? - eval(f, minus)?) / (eps + eps);
    }
    Ok(out)
}

/// `max_i |a−n| / max(|a|, |n|, 1e-8)` between two gradients.
pub fn max_relative_error<T: Real>(analytic: &Tensor<T>, numeric: &Tensor<T>) -> T {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| {
            let denom = a.abs().max(n.abs()).max(T::c(1e-8));
            (a - n).abs() / denom
        })
        .fold(T::zero(), T::max)
}

/// Compares the tape gradient of `f` at `x` with central finite differences
/// and returns the maximum relative error over all coordinates.
pub fn gradient_check<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<T>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if eps <= T::zero() {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    let (_, analytic) = analytic_gradient(&f, x)?;
    let numeric = numeric_gradient(&f, x, eps)?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// A scalar function that can be evaluated at either precision, so the 32-bit
/// tape gradient can be checked against 64-bit finite differences.
pub trait ScalarFn {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
}

/// Checks the `f32` tape gradient of `f` at `x` against central differences
/// evaluated in `f64` at the same point. Single-precision central differences
/// carry roundoff of order 1e-7/eps, which would swamp the comparison.
pub fn gradient_check_f32<F: ScalarFn>(f: &F, x: &Tensor<f32>, eps: f64) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    let (_, analytic) = analytic_gradient(&|t: &mut Tape<f32>, v| f.eval(t, v), x)?;
    let x64: Tensor<f64> = x.cast();
    let numeric = numeric_gradient(&|t: &mut Tape<f64>, v| f.eval(t, v), &x64, eps)?;
    Ok(max_relative_error(&analytic.cast::<f64>(), &numeric))
}
