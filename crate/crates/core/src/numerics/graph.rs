//! Tape-based reverse-mode differentiation.
//!
//! Operations are recorded into a [`Graph`] in execution order; [`Graph::backward`]
//! walks the tape in reverse and returns one gradient buffer per node that
//! depends on a differentiable leaf.

use super::kernels;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batches: usize,
        a_batched: bool,
        b_batched: bool,
        m: usize,
        k: usize,
        p: usize,
    },
    /// `a + b` where `b` repeats cyclically over `a` (trailing-shape broadcast).
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    Relu {
        a: Var,
    },
    Gelu {
        a: Var,
    },
    Softmax {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        index: Vec<usize>,
    },
    Expand {
        a: Var,
        index: Vec<usize>,
    },
    Narrow {
        a: Var,
        outer: usize,
        in_len: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    Concat {
        inputs: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    GatherRows {
        a: Var,
        rows: usize,
        width: usize,
        index: Vec<Vec<usize>>,
    },
    L2Normalize {
        a: Var,
        width: usize,
        norms: Vec<f64>,
    },
    Sum {
        a: Var,
    },
    SumSquares {
        a: Var,
    },
    NtXent {
        a: Var,
        b: Var,
        tau: f64,
        symmetric: bool,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads[v.0].take()
    }
}

#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

const NORM_EPS: f64 = 1e-12;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn make(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op, inputs: &[Var]) -> Var {
        let t = Tensor::new(shape, data).expect("op produced inconsistent shape");
        self.push(t, op, inputs)
    }

    /// Records a leaf. It is differentiable iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad;
        let mut t = t;
        t.grad = None;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = true;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- forward ops --------------------------------------------------

    /// Batched matrix product `[.., M, K] × [.., K, P]`. A side with no batch
    /// axes (or a single batch) broadcasts against the other.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::Dimension {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, p) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let (na, nb) = (numel(ba), numel(bb));
        let (out_shape, batches, a_batched, b_batched, m_eff) = if nb == 1 {
            // flatten a's batch axes into rows
            let mut s = ba.to_vec();
            s.extend([m, p]);
            (s, 1, false, false, na * m)
        } else if na == 1 {
            let mut s = bb.to_vec();
            s.extend([m, p]);
            (s, nb, false, true, m)
        } else if ba == bb {
            let mut s = ba.to_vec();
            s.extend([m, p]);
            (s, na, true, true, m)
        } else {
            return Err(err());
        };
        let mut out = vec![T::zero(); batches * m_eff * p];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for bi in 0..batches {
                let ao = if a_batched { bi * m_eff * k } else { 0 };
                let bo = if b_batched { bi * k * p } else { 0 };
                kernels::matmul(
                    &ad[ao..ao + m_eff * k],
                    &bd[bo..bo + k * p],
                    &mut out[bi * m_eff * p..(bi + 1) * m_eff * p],
                    m_eff,
                    k,
                    p,
                );
            }
        }
        Ok(self.make(
            out_shape,
            out,
            Op::MatMul {
                a,
                b,
                batches,
                a_batched,
                b_batched,
                m: m_eff,
                k,
                p,
            },
            &[a, b],
        ))
    }

    /// `a + b`; `b`'s shape must equal a trailing part of `a`'s shape
    /// (leading unit axes of `b` are ignored).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let trimmed: Vec<usize> = sb.iter().copied().skip_while(|&d| d == 1).collect();
        let ok = trimmed.len() <= sa.len() && sa[sa.len() - trimmed.len()..] == trimmed[..];
        if !ok {
            return Err(Error::Dimension {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let bl = bd.len();
        let out: Vec<T> = ad
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % bl])
            .collect();
        Ok(self.make(sa, out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: "sub",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.make(shape, out, Op::Sub { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<T> = self.data(a).iter().map(|&x| T::of(x.f64() * c)).collect();
        let shape = self.shape(a).to_vec();
        self.make(shape, out, Op::Scale { a, c }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<T> = self
            .data(a)
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let shape = self.shape(a).to_vec();
        self.make(shape, out, Op::Relu { a }, &[a])
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<T> = self
            .data(a)
            .iter()
            .map(|&x| T::of(kernels::gelu(x.f64())))
            .collect();
        let shape = self.shape(a).to_vec();
        self.make(shape, out, Op::Gelu { a }, &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let x = self.data(a);
        let mut out = vec![T::zero(); x.len()];
        let mut buf = vec![0f64; len];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mx = (0..len)
                    .map(|j| x[at(j)].f64())
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (j, e) in buf.iter_mut().enumerate() {
                    *e = (x[at(j)].f64() - mx).exp();
                    z += *e;
                }
                for (j, e) in buf.iter().enumerate() {
                    out[at(j)] = T::of(e / z);
                }
            }
        }
        Ok(self.make(
            shape,
            out,
            Op::Softmax {
                a,
                outer,
                len,
                inner,
            },
            &[a],
        ))
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        for p in [gamma, beta] {
            if self.shape(p).iter().product::<usize>() != n {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xd = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = xd.len() / n;
        let mut out = vec![T::zero(); xd.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let denom = (var + eps).sqrt();
            let rstd = if denom > 0.0 { 1.0 / denom } else { 0.0 };
            for j in 0..n {
                let xhat = (row[j].f64() - mean) * rstd;
                out[r * n + j] = T::of(xhat * g[j].f64() + b[j].f64());
            }
            means.push(mean);
            rstds.push(rstd);
        }
        Ok(self.make(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.data(a).len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.data(a).to_vec();
        Ok(self.make(shape.to_vec(), data, Op::Reshape { a }, &[a]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::contract(format!(
                "invalid permutation {perm:?} for {shape:?}"
            )));
        }
        let index = kernels::permute_index(&shape, perm);
        let x = self.data(a);
        let out: Vec<T> = index.iter().map(|&i| x[i]).collect();
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        Ok(self.make(out_shape, out, Op::Permute { a, index }, &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::contract("transpose needs rank ≥ 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    /// Broadcasts `a` (right-aligned) to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let ok = sa.len() <= shape.len()
            && sa
                .iter()
                .zip(&shape[shape.len() - sa.len()..])
                .all(|(&s, &t)| s == t || s == 1);
        if !ok {
            return Err(Error::Dimension {
                op: "expand",
                lhs: sa,
                rhs: shape.to_vec(),
            });
        }
        let index = kernels::expand_index(&sa, shape);
        let x = self.data(a);
        let out: Vec<T> = index.iter().map(|&i| x[i]).collect();
        Ok(self.make(shape.to_vec(), out, Op::Expand { a, index }, &[a]))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::contract(format!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            )));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let in_len = shape[axis];
        let x = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * in_len * inner + start * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.make(
            out_shape,
            out,
            Op::Narrow {
                a,
                outer,
                in_len,
                start,
                len,
                inner,
            },
            &[a],
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *parts
                    .first()
                    .ok_or_else(|| Error::contract("concat of nothing"))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(Error::contract("concat axis out of range"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !same {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        let inputs: Vec<(Var, usize)> = parts.iter().map(|&p| (p, self.shape(p)[axis])).collect();
        for o in 0..outer {
            for &(p, len) in &inputs {
                let x = self.data(p);
                out.extend_from_slice(&x[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.make(
            shape,
            out,
            Op::Concat {
                inputs,
                outer,
                inner,
            },
            parts,
        ))
    }

    /// `out[b, j, :] = a[b, index[b][j], :]` for `a: [B, S, W]`.
    pub fn gather_rows(&mut self, a: Var, index: Vec<Vec<usize>>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 || index.len() != shape[0] {
            return Err(Error::contract(format!(
                "gather_rows expects [B,S,W] with B index lists, got {shape:?} and {}",
                index.len()
            )));
        }
        let (rows, width) = (shape[1], shape[2]);
        let k = index[0].len();
        if k == 0
            || index
                .iter()
                .any(|ix| ix.len() != k || ix.iter().any(|&i| i >= rows))
        {
            return Err(Error::contract("gather_rows index out of range or ragged"));
        }
        let x = self.data(a);
        let mut out = Vec::with_capacity(shape[0] * k * width);
        for (b, ix) in index.iter().enumerate() {
            for &i in ix {
                let base = (b * rows + i) * width;
                out.extend_from_slice(&x[base..base + width]);
            }
        }
        Ok(self.make(
            vec![shape[0], k, width],
            out,
            Op::GatherRows {
                a,
                rows,
                width,
                index,
            },
            &[a],
        ))
    }

    /// Divides each last-axis row by its Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let width = *shape.last().unwrap();
        let x = self.data(a);
        let mut norms = Vec::with_capacity(x.len() / width);
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(width) {
            let n = row
                .iter()
                .map(|v| v.f64() * v.f64())
                .sum::<f64>()
                .sqrt()
                .max(NORM_EPS);
            out.extend(row.iter().map(|v| T::of(v.f64() / n)));
            norms.push(n);
        }
        self.make(shape, out, Op::L2Normalize { a, width, norms }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().map(|v| v.f64()).sum();
        self.make(vec![1], vec![T::of(s)], Op::Sum { a }, &[a])
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().map(|v| v.f64() * v.f64()).sum();
        self.make(vec![1], vec![T::of(s)], Op::SumSquares { a }, &[a])
    }

    /// NT-Xent over row-normalized `a, b: [B, P]` (rows of `b` are the
    /// positives of the matching rows of `a`). The denominator for anchor `i`
    /// runs over all `2B` embeddings except `i` itself. With `symmetric`, the
    /// rows of `b` also act as anchors and the mean is over `2B` anchors.
    pub fn nt_xent(&mut self, a: Var, b: Var, tau: f64, symmetric: bool) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::config(format!("temperature must be > 0, got {tau}")));
        }
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sa != sb {
            return Err(Error::Dimension {
                op: "nt_xent",
                lhs: sa,
                rhs: sb,
            });
        }
        let (bsz, dim) = (sa[0], sa[1]);
        let z = stack_rows(self.data(a), self.data(b));
        let sim = similarity(&z, 2 * bsz, dim, tau);
        let anchors = if symmetric { 2 * bsz } else { bsz };
        let mut total = 0.0;
        for i in 0..anchors {
            let pos = (i + bsz) % (2 * bsz);
            let row = &sim[i * 2 * bsz..(i + 1) * 2 * bsz];
            total += log_sum_exp_excluding(row, i) - row[pos];
        }
        let loss = total / anchors as f64;
        Ok(self.make(
            vec![1],
            vec![T::of(loss)],
            Op::NtXent {
                a,
                b,
                tau,
                symmetric,
            },
            &[a, b],
        ))
    }

    /// Mean softmax cross-entropy of `logits: [B, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let c = shape[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::contract(format!("label {bad} ≥ class count {c}")));
        }
        let x = self.data(logits);
        let mut total = 0.0;
        for (row, &y) in x.chunks(c).zip(labels) {
            let row: Vec<f64> = row.iter().map(|v| v.f64()).collect();
            total += log_sum_exp_excluding(&row, usize::MAX) - row[y];
        }
        let loss = total / labels.len() as f64;
        Ok(self.make(
            vec![1],
            vec![T::of(loss)],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    // ---- backward -----------------------------------------------------

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = node.value.data();
        let mut acc = |v: Var, g: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(x, &d)| *x = T::of(x.f64() + d)),
                slot => *slot = Some(g.into_iter().map(T::of).collect()),
            }
        };
        let go = |i: usize| gout[i].f64();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batches,
                a_batched,
                b_batched,
                m,
                k,
                p,
            } => {
                let (ad, bd) = (self.data(a), self.data(b));
                let need_a = self.nodes[a.0].needs_grad;
                let need_b = self.nodes[b.0].needs_grad;
                let mut da = if need_a {
                    vec![0f64; ad.len()]
                } else {
                    Vec::new()
                };
                let mut db = if need_b {
                    vec![0f64; bd.len()]
                } else {
                    Vec::new()
                };
                for bi in 0..batches {
                    let ao = if a_batched { bi * m * k } else { 0 };
                    let bo = if b_batched { bi * k * p } else { 0 };
                    let dc = &gout[bi * m * p..(bi + 1) * m * p];
                    if need_a {
                        kernels::matmul_nt_acc(
                            dc,
                            &bd[bo..bo + k * p],
                            &mut da[ao..ao + m * k],
                            m,
                            k,
                            p,
                        );
                    }
                    if need_b {
                        kernels::matmul_tn_acc(
                            &ad[ao..ao + m * k],
                            dc,
                            &mut db[bo..bo + k * p],
                            m,
                            k,
                            p,
                        );
                    }
                }
                if need_a {
                    acc(a, da);
                }
                if need_b {
                    acc(b, db);
                }
            }
            &Op::Add { a, b } => {
                acc(a, gout.iter().map(|v| v.f64()).collect());
                let bl = self.data(b).len();
                let mut db = vec![0f64; bl];
                for (i, g) in gout.iter().enumerate() {
                    db[i % bl] += g.f64();
                }
                acc(b, db);
            }
            &Op::Sub { a, b } => {
                acc(a, gout.iter().map(|v| v.f64()).collect());
                acc(b, gout.iter().map(|v| -v.f64()).collect());
            }
            &Op::Scale { a, c } => acc(a, gout.iter().map(|v| v.f64() * c).collect()),
            &Op::Relu { a } => acc(
                a,
                self.data(a)
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| if x > T::zero() { go(i) } else { 0.0 })
                    .collect(),
            ),
            &Op::Gelu { a } => acc(
                a,
                self.data(a)
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| go(i) * kernels::gelu_grad(x.f64()))
                    .collect(),
            ),
            &Op::Softmax {
                a,
                outer,
                len,
                inner,
            } => {
                let mut dx = vec![0f64; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| go(at(j)) * out[at(j)].f64()).sum();
                        for j in 0..len {
                            dx[at(j)] = out[at(j)].f64() * (go(at(j)) - dot);
                        }
                    }
                }
                acc(a, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let xd = self.data(x);
                let g = self.data(gamma);
                let n = g.len();
                let mut dx = vec![0f64; xd.len()];
                let mut dg = vec![0f64; n];
                let mut dbeta = vec![0f64; n];
                let mut xhat = vec![0f64; n];
                let mut dxhat = vec![0f64; n];
                for r in 0..mean.len() {
                    let base = r * n;
                    for j in 0..n {
                        xhat[j] = (xd[base + j].f64() - mean[r]) * rstd[r];
                        let d = go(base + j);
                        dg[j] += d * xhat[j];
                        dbeta[j] += d;
                        dxhat[j] = d * g[j].f64();
                    }
                    let m1 = dxhat.iter().sum::<f64>() / n as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx[base + j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                acc(x, dx);
                acc(gamma, dg);
                acc(beta, dbeta);
            }
            &Op::Reshape { a } => acc(a, gout.iter().map(|v| v.f64()).collect()),
            Op::Permute { a, index } | Op::Expand { a, index } => {
                let mut dx = vec![0f64; self.data(*a).len()];
                for (o, &i) in index.iter().enumerate() {
                    dx[i] += go(o);
                }
                acc(*a, dx);
            }
            &Op::Narrow {
                a,
                outer,
                in_len,
                start,
                len,
                inner,
            } => {
                let mut dx = vec![0f64; outer * in_len * inner];
                for o in 0..outer {
                    let base = o * in_len * inner + start * inner;
                    for t in 0..len * inner {
                        dx[base + t] = go(o * len * inner + t);
                    }
                }
                acc(a, dx);
            }
            Op::Concat {
                inputs,
                outer,
                inner,
            } => {
                let total: usize = inputs.iter().map(|&(_, l)| l).sum();
                let mut offset = 0;
                for &(v, len) in inputs {
                    let mut dx = Vec::with_capacity(outer * len * inner);
                    for o in 0..*outer {
                        let base = o * total * inner + offset * inner;
                        dx.extend((0..len * inner).map(|t| go(base + t)));
                    }
                    acc(v, dx);
                    offset += len;
                }
            }
            Op::GatherRows {
                a,
                rows,
                width,
                index,
            } => {
                let mut dx = vec![0f64; self.data(*a).len()];
                let k = index[0].len();
                for (b, ix) in index.iter().enumerate() {
                    for (j, &i) in ix.iter().enumerate() {
                        let src = (b * k + j) * width;
                        let dst = (b * rows + i) * width;
                        for t in 0..*width {
                            dx[dst + t] += go(src + t);
                        }
                    }
                }
                acc(*a, dx);
            }
            Op::L2Normalize { a, width, norms } => {
                let mut dx = vec![0f64; out.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let base = r * width;
                    let dot: f64 = (0..*width)
                        .map(|j| go(base + j) * out[base + j].f64())
                        .sum();
                    for j in 0..*width {
                        dx[base + j] = (go(base + j) - out[base + j].f64() * dot) / n;
                    }
                }
                acc(*a, dx);
            }
            &Op::Sum { a } => {
                let g = go(0);
                acc(a, vec![g; self.data(a).len()]);
            }
            &Op::SumSquares { a } => {
                let g = go(0);
                acc(a, self.data(a).iter().map(|x| 2.0 * x.f64() * g).collect());
            }
            &Op::NtXent {
                a,
                b,
                tau,
                symmetric,
            } => {
                let shape = self.shape(a);
                let (bsz, dim) = (shape[0], shape[1]);
                let n = 2 * bsz;
                let z = stack_rows(self.data(a), self.data(b));
                let sim = similarity(&z, n, dim, tau);
                let anchors = if symmetric { n } else { bsz };
                // dL/dS
                let mut gs = vec![0f64; n * n];
                let scale = go(0) / anchors as f64;
                for i in 0..anchors {
                    let pos = (i + bsz) % n;
                    let row = &sim[i * n..(i + 1) * n];
                    let lse = log_sum_exp_excluding(row, i);
                    for kk in 0..n {
                        if kk == i {
                            continue;
                        }
                        let mut d = (row[kk] - lse).exp();
                        if kk == pos {
                            d -= 1.0;
                        }
                        gs[i * n + kk] = d * scale;
                    }
                }
                // dZ = (G + Gᵀ) Z / τ
                let mut dz = vec![0f64; n * dim];
                for i in 0..n {
                    for kk in 0..n {
                        let w = (gs[i * n + kk] + gs[kk * n + i]) / tau;
                        if w == 0.0 {
                            continue;
                        }
                        for t in 0..dim {
                            dz[i * dim + t] += w * z[kk * dim + t];
                        }
                    }
                }
                let db = dz.split_off(bsz * dim);
                acc(a, dz);
                acc(b, db);
            }
            Op::CrossEntropy { logits, labels } => {
                let x = self.data(*logits);
                let c = x.len() / labels.len();
                let scale = go(0) / labels.len() as f64;
                let mut dx = Vec::with_capacity(x.len());
                for (row, &y) in x.chunks(c).zip(labels) {
                    let row: Vec<f64> = row.iter().map(|v| v.f64()).collect();
                    let lse = log_sum_exp_excluding(&row, usize::MAX);
                    for (j, &v) in row.iter().enumerate() {
                        let p = (v - lse).exp();
                        dx.push((p - if j == y { 1.0 } else { 0.0 }) * scale);
                    }
                }
                acc(*logits, dx);
            }
        }
    }
}

fn stack_rows<T: Real>(a: &[T], b: &[T]) -> Vec<f64> {
    a.iter().chain(b).map(|v| v.f64()).collect()
}

/// `S[i,k] = ⟨z_i, z_k⟩ / τ` for `n` rows of width `dim`.
fn similarity(z: &[f64], n: usize, dim: usize, tau: f64) -> Vec<f64> {
    let mut s = vec![0f64; n * n];
    for i in 0..n {
        for k in 0..n {
            let dot: f64 = z[i * dim..(i + 1) * dim]
                .iter()
                .zip(&z[k * dim..(k + 1) * dim])
                .map(|(x, y)| x * y)
                .sum();
            s[i * n + k] = dot / tau;
        }
    }
    s
}

/// `log Σ_{k≠skip} exp(row[k])`, max-shifted.
fn log_sum_exp_excluding(row: &[f64], skip: usize) -> f64 {
    let mx = row
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != skip)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != skip)
        .map(|(_, &v)| (v - mx).exp())
        .sum();
    mx + s.ln()
}
