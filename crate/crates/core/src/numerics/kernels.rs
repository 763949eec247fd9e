//! Scalar kernels. Every reduction accumulates in `f64` in a fixed order and
//! rounds once on store.

use super::tensor::Real;

/// `out[m,p] = a[m,k] · b[k,p]`.
pub fn matmul<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    let mut acc = vec![0f64; p];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let av = av.f64();
            let brow = &b[kk * p..(kk + 1) * p];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += av * bv.f64();
            }
        }
        for (o, &s) in out[i * p..(i + 1) * p].iter_mut().zip(&acc) {
            *o = T::of(s);
        }
    }
}

/// `acc[m,k] += dc[m,p] · b[k,p]ᵀ`.
pub fn matmul_nt_acc<T: Real>(dc: &[T], b: &[T], acc: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let drow = &dc[i * p..(i + 1) * p];
        for kk in 0..k {
            let brow = &b[kk * p..(kk + 1) * p];
            let mut s = 0f64;
            for (&d, &bv) in drow.iter().zip(brow) {
                s += d.f64() * bv.f64();
            }
            acc[i * k + kk] += s;
        }
    }
}

/// `acc[k,p] += a[m,k]ᵀ · dc[m,p]`.
pub fn matmul_tn_acc<T: Real>(a: &[T], dc: &[T], acc: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let drow = &dc[i * p..(i + 1) * p];
        for (kk, &av) in arow.iter().enumerate() {
            let av = av.f64();
            if av == 0.0 {
                continue;
            }
            let dst = &mut acc[kk * p..(kk + 1) * p];
            for (s, &d) in dst.iter_mut().zip(drow) {
                *s += av * d.f64();
            }
        }
    }
}

/// Standard normal CDF.
pub fn phi_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn phi_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn gelu(x: f64) -> f64 {
    x * phi_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    phi_cdf(x) + x * phi_pdf(x)
}

/// Row strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output element of `permute(shape, perm)`, the linear index into the input.
pub fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..n {
        idx.push(src);
        for d in (0..out_shape.len()).rev() {
            counter[d] += 1;
            src += src_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    idx
}

/// For each output element of broadcasting `shape` (right-aligned) to `target`,
/// the linear index into the input.
pub fn expand_index(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let offset = target.len() - shape.len();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = (0..target.len())
        .map(|d| {
            if d < offset || shape[d - offset] == 1 {
                0
            } else {
                in_strides[d - offset]
            }
        })
        .collect();
    let n: usize = target.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; target.len()];
    let mut src = 0usize;
    for _ in 0..n {
        idx.push(src);
        for d in (0..target.len()).rev() {
            counter[d] += 1;
            src += src_strides[d];
            if counter[d] < target[d] {
                break;
            }
            src -= src_strides[d] * target[d];
            counter[d] = 0;
        }
    }
    idx
}
