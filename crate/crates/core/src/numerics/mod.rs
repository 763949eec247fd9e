//! Dense tensors, reverse-mode differentiation and a central-difference checker.

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::{Real, Tensor};

use crate::error::{Error, Result};

fn unary<T: Real>(
    x: &Tensor<T>,
    f: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = f(&mut g, v)?;
    Ok(g.value(out).clone())
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = g.matmul(va, vb)?;
    Ok(g.value(out).clone())
}

pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    unary(x, |g, v| g.softmax(v, axis))
}

pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    unary(x, |g, v| Ok(g.gelu(v))).expect("gelu is total")
}

pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vx = g.constant(x.clone());
    let vg = g.constant(gamma.clone());
    let vb = g.constant(beta.clone());
    let out = g.layer_norm(vx, vg, vb, eps)?;
    Ok(g.value(out).clone())
}

/// Evaluates a scalar function built on a fresh graph, returning its value and
/// the gradient with respect to each input.
pub fn value_and_grad<T: Real, F>(f: &F, xs: &[Tensor<T>]) -> Result<(f64, Vec<Vec<T>>)>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            g.shape(out)
        )));
    }
    let value = g.value(out).item().f64();
    let mut grads = g.backward(out)?;
    let gs = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| grads.take(v).unwrap_or_else(|| vec![T::zero(); x.len()]))
        .collect();
    Ok((value, gs))
}

fn eval_scalar<T: Real, F>(f: &F, xs: &[Tensor<T>]) -> Result<f64>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item().f64())
}

/// Relative error of one coordinate: `|analytic − numeric| / (|numeric| + 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-8)
}

/// Max relative error between reverse-mode gradients and central differences,
/// reported per input tensor.
pub fn finite_diff_check_many<T: Real, F>(f: &F, xs: &[Tensor<T>], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::contract("step size must be positive"));
    }
    let (_, analytic) = value_and_grad(f, xs)?;
    let mut work: Vec<Tensor<T>> = xs.to_vec();
    let mut worst = Vec::with_capacity(xs.len());
    for t in 0..xs.len() {
        let mut max_err = 0f64;
        for i in 0..xs[t].len() {
            let orig = xs[t].data()[i];
            work[t].data_mut()[i] = T::of(orig.f64() + h);
            let up = eval_scalar(f, &work)?;
            work[t].data_mut()[i] = T::of(orig.f64() - h);
            let down = eval_scalar(f, &work)?;
            work[t].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            max_err = max_err.max(relative_error(analytic[t][i].f64(), numeric));
        }
        worst.push(max_err);
    }
    Ok(worst)
}

/// Single-input form of [`finite_diff_check_many`].
pub fn finite_diff_check<T: Real, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let wrapped = |g: &mut Graph<T>, v: &[Var]| f(g, v[0]);
    Ok(finite_diff_check_many(&wrapped, std::slice::from_ref(x), h)?[0])
}
