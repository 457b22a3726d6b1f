//! Reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Forward
//! values are computed eagerly; [`Graph::backward`] replays the record in
//! reverse and returns input cotangents for every node that depends on a
//! leaf created with [`Graph::leaf`].
//!
//! Shape errors inside a graph are programming errors and panic.

use std::rc::Rc;

use super::real::Real;
use super::tensor::{bmm_kernel, gelu_grad_scalar, gelu_scalar, sigmoid_scalar, softplus_scalar};
use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Log,
    Sigmoid,
    Softplus,
    Gelu,
    Relu,
    Tanh,
    Square,
}

impl Unary {
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sigmoid => sigmoid_scalar(x),
            Unary::Softplus => softplus_scalar(x),
            Unary::Gelu => gelu_scalar(x),
            Unary::Relu => x.max(T::zero()),
            Unary::Tanh => x.tanh(),
            Unary::Square => x * x,
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Unary::Exp => y,
            Unary::Log => T::one() / x,
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Softplus => sigmoid_scalar(x),
            Unary::Gelu => gelu_grad_scalar(x),
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Tanh => T::one() - y * y,
            Unary::Square => x + x,
        }
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Shift(Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Unary(Var, Unary),
    SoftmaxLast(Var),
    LogSoftmaxLast(Var),
    L2NormLast(Var),
    SumAll(Var),
    SumLast(Var),
    LogSumExp(Var),
    Gather(Var, Rc<[usize]>),
    SegmentSum(Var, Rc<[usize]>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    MinMaxSegments(Var, usize),
    Taps {
        x: Var,
        idx: Rc<[usize]>,
        weights: Rc<[T]>,
        taps: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Cotangents produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient for `v`, zeros if the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn last_dim(shape: &[usize]) -> (usize, usize) {
    let n = *shape.last().expect("rank >= 1");
    (shape.iter().product::<usize>() / n, n)
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        va.zip_map(vb, name, f).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, "add", |x, y| x + y);
        let g = self.grad_of(&[a, b]);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, "sub", |x, y| x - y);
        let g = self.grad_of(&[a, b]);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, "mul", |x, y| x * y);
        let g = self.grad_of(&[a, b]);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, "div", |x, y| x / y);
        let g = self.grad_of(&[a, b]);
        self.push(v, Op::Div(a, b), g)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).scale(c);
        let g = self.grad_of(&[a]);
        self.push(v, Op::Scale(a, c), g)
    }

    pub fn shift(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x + c);
        let g = self.grad_of(&[a]);
        self.push(v, Op::Shift(a), g)
    }

    /// `x[.., j] + row[j]` for a vector `row` matching the last axis.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (_, n) = last_dim(self.shape(x));
        assert_eq!(
            self.value(row).numel(),
            n,
            "add_row: row length != last dim"
        );
        let r = self.value(row).data().to_vec();
        let mut v = self.value(x).clone();
        for chunk in v.data_mut().chunks_mut(n) {
            for (o, &b) in chunk.iter_mut().zip(&r) {
                *o += b;
            }
        }
        let g = self.grad_of(&[x, row]);
        self.push(v, Op::AddRow(x, row), g)
    }

    /// `x[i, ..] * col[i]` for a vector `col` matching the leading rows.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let (rows, n) = last_dim(self.shape(x));
        assert_eq!(self.value(col).numel(), rows, "mul_col: col length != rows");
        let c = self.value(col).data().to_vec();
        let mut v = self.value(x).clone();
        for (chunk, &s) in v.data_mut().chunks_mut(n).zip(&c) {
            for o in chunk.iter_mut() {
                *o *= s;
            }
        }
        let g = self.grad_of(&[x, col]);
        self.push(v, Op::MulCol(x, col), g)
    }

    /// Rank-2 product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// Rank-2 product `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 2 && sb.len() == 2,
            "matmul: rank-2 operands, got {sa:?} and {sb:?}"
        );
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b {
            (sb[1], sb[0])
        } else {
            (sb[0], sb[1])
        };
        assert_eq!(
            k, kb,
            "matmul: inner dimensions differ for {sa:?} and {sb:?}"
        );
        self.bmm_push(a, b, 1, m, k, n, trans_b, vec![m, n])
    }

    /// Batched product over rank-3 operands: `a[b] · b[b]` (or `a[b] · b[b]ᵀ`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0],
            "bmm: got {sa:?} and {sb:?}"
        );
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        assert_eq!(k, kb, "bmm: inner dimensions differ for {sa:?} and {sb:?}");
        self.bmm_push(a, b, batch, m, k, n, trans_b, vec![batch, m, n])
    }

    #[allow(clippy::too_many_arguments)]
    fn bmm_push(
        &mut self,
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
        shape: Vec<usize>,
    ) -> Var {
        let mut out = vec![T::zero(); batch * m * n];
        bmm_kernel(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            batch,
            m,
            k,
            n,
            false,
            trans_b,
        );
        let g = self.grad_of(&[a, b]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            g,
        )
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let v = self.value(a).map(|x| kind.apply(x));
        let g = self.grad_of(&[a]);
        self.push(v, Op::Unary(a, kind), g)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let axis = self.shape(a).len() - 1;
        let v = self.value(a).softmax(axis).expect("valid axis");
        let g = self.grad_of(&[a]);
        self.push(v, Op::SoftmaxLast(a), g)
    }

    pub fn log_softmax_last(&mut self, a: Var) -> Var {
        let axis = self.shape(a).len() - 1;
        let v = self.value(a).log_softmax(axis).expect("valid axis");
        let g = self.grad_of(&[a]);
        self.push(v, Op::LogSoftmaxLast(a), g)
    }

    /// Unit-normalizes along the last axis; zero vectors stay zero.
    pub fn l2_normalize_last(&mut self, a: Var) -> Var {
        let axis = self.shape(a).len() - 1;
        let v = self.value(a).l2_normalize(axis).expect("valid axis");
        let g = self.grad_of(&[a]);
        self.push(v, Op::L2NormLast(a), g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let g = self.grad_of(&[a]);
        self.push(v, Op::SumAll(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Sums out the last axis.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let axis = self.shape(a).len() - 1;
        let v = self.value(a).sum_axis(axis).expect("valid axis");
        let g = self.grad_of(&[a]);
        self.push(v, Op::SumLast(a), g)
    }

    /// `ln Σ exp(a)` over all elements, max-stabilized.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mx = x.max();
        let z: T = x.data().iter().map(|&v| (v - mx).exp()).sum();
        let v = Tensor::scalar(mx + z.ln());
        let g = self.grad_of(&[a]);
        self.push(v, Op::LogSumExp(a), g)
    }

    /// `out[o] = a.flat[index[o]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Rc<[usize]>, shape: &[usize]) -> Var {
        assert_eq!(
            index.len(),
            shape.iter().product::<usize>(),
            "gather: index/shape mismatch"
        );
        let src = self.value(a).data();
        let data: Vec<T> = index.iter().map(|&i| src[i]).collect();
        let g = self.grad_of(&[a]);
        self.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::Gather(a, index),
            g,
        )
    }

    /// Selects whole rows (leading-axis slices) of a rank-2 tensor.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let (r, n) = last_dim(self.shape(a));
        let mut index = Vec::with_capacity(rows.len() * n);
        for &row in rows {
            assert!(row < r, "gather_rows: row {row} out of {r}");
            index.extend(row * n..(row + 1) * n);
        }
        self.gather(a, index.into(), &[rows.len(), n])
    }

    /// Repeats a length-`n` vector as `n×width`, i.e. `out[i, j] = a[i]`.
    pub fn broadcast_col(&mut self, a: Var, width: usize) -> Var {
        let n = self.value(a).numel();
        let index: Vec<usize> = (0..n)
            .flat_map(|i| std::iter::repeat(i).take(width))
            .collect();
        self.gather(a, index.into(), &[n, width])
    }

    /// Rank-2 transpose.
    pub fn transpose(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2, "transpose: rank-2 operand");
        let (r, c) = (s[0], s[1]);
        let index: Vec<usize> = (0..c)
            .flat_map(|j| (0..r).map(move |i| i * c + j))
            .collect();
        self.gather(a, index.into(), &[c, r])
    }

    /// Sums rows of `a` (`[N×D]`) into `segments.len()` … groups:
    /// `out[p] = Σ_{i: seg[i]=p} a[i]`, with `groups` output rows.
    pub fn segment_sum(&mut self, a: Var, seg: Rc<[usize]>, groups: usize) -> Var {
        let (rows, n) = last_dim(self.shape(a));
        assert_eq!(seg.len(), rows, "segment_sum: one segment id per row");
        let src = self.value(a).data();
        let mut out = vec![T::zero(); groups * n];
        for (i, &p) in seg.iter().enumerate() {
            assert!(p < groups, "segment_sum: segment {p} >= {groups}");
            for j in 0..n {
                out[p * n + j] += src[i * n + j];
            }
        }
        let mut shape = self.shape(a).to_vec();
        shape[0] = groups;
        if shape.len() > 2 {
            shape = vec![groups, n];
        }
        let g = self.grad_of(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::SegmentSum(a, seg), g)
    }

    /// Concatenates along the leading axis; trailing shapes must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(&s[1..], &tail[..], "concat_rows: trailing shapes differ");
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let g = self.grad_of(parts);
        self.push(
            Tensor::from_parts(shape, data),
            Op::ConcatRows(parts.to_vec()),
            g,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .value(a)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        let g = self.grad_of(&[a]);
        self.push(v, Op::Reshape(a), g)
    }

    /// Splits the flat data into `segments` equal contiguous chunks and maps
    /// each chunk linearly onto `[0, 1]`; constant chunks map to zeros.
    pub fn minmax_segments(&mut self, a: Var, segments: usize) -> Var {
        let x = self.value(a);
        let len = x.numel() / segments;
        assert_eq!(
            len * segments,
            x.numel(),
            "minmax_segments: uneven segments"
        );
        let mut out = vec![T::zero(); x.numel()];
        for s in 0..segments {
            let chunk = &x.data()[s * len..(s + 1) * len];
            let (lo, hi) = (minmax(chunk).0, minmax(chunk).1);
            let (mn, mx) = (chunk[lo], chunk[hi]);
            let range = mx - mn;
            if range > T::zero() {
                for (o, &v) in out[s * len..(s + 1) * len].iter_mut().zip(chunk) {
                    *o = (v - mn) / range;
                }
            }
        }
        let shape = x.shape().to_vec();
        let g = self.grad_of(&[a]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::MinMaxSegments(a, segments),
            g,
        )
    }

    /// Fixed sparse linear map: `out[o] = Σ_t weights[o·taps+t] · a.flat[idx[o·taps+t]]`.
    pub fn taps(
        &mut self,
        a: Var,
        idx: Rc<[usize]>,
        weights: Rc<[T]>,
        taps: usize,
        shape: &[usize],
    ) -> Var {
        let out_len: usize = shape.iter().product();
        assert_eq!(idx.len(), out_len * taps);
        assert_eq!(weights.len(), out_len * taps);
        let src = self.value(a).data();
        let data: Vec<T> = (0..out_len)
            .map(|o| {
                (0..taps)
                    .map(|t| weights[o * taps + t] * src[idx[o * taps + t]])
                    .sum()
            })
            .collect();
        let g = self.grad_of(&[a]);
        self.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::Taps {
                x: a,
                idx,
                weights,
                taps,
            },
            g,
        )
    }

    /// `x · w + b` for `x: [N×I]`, `w: [I×O]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(
            self.value(loss).numel(),
            1,
            "backward: loss must be a scalar"
        );
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        }
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &dyn Fn(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot =
                grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(o, &d)| *o += d));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(o, &d)| *o += d));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(o, &d)| *o += d));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(o, &d)| *o -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / vb[i];
                    }
                });
                acc(*b, &|s| {
                    for i in 0..s.len() {
                        s[i] -= g[i] * y[i] / vb[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(o, &d)| *o += c * d));
            }
            Op::Shift(a) => acc(*a, &|s| s.iter_mut().zip(g).for_each(|(o, &d)| *o += d)),
            Op::AddRow(x, row) => {
                acc(*x, &|s| s.iter_mut().zip(g).for_each(|(o, &d)| *o += d));
                acc(*row, &|s| {
                    let n = s.len();
                    for chunk in g.chunks(n) {
                        s.iter_mut().zip(chunk).for_each(|(o, &d)| *o += d);
                    }
                });
            }
            Op::MulCol(x, col) => {
                let (vx, vc) = (val(*x), val(*col));
                let n = g.len() / vc.len();
                acc(*x, &|s| {
                    for (i, &c) in vc.iter().enumerate() {
                        for j in 0..n {
                            s[i * n + j] += g[i * n + j] * c;
                        }
                    }
                });
                acc(*col, &|s| {
                    for (i, o) in s.iter_mut().enumerate() {
                        for j in 0..n {
                            *o += g[i * n + j] * vx[i * n + j];
                        }
                    }
                });
            }
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &|s| {
                    // dA = dC · op(B)ᵀ
                    let mut tmp = vec![T::zero(); s.len()];
                    bmm_kernel(g, vb, &mut tmp, batch, m, n, k, false, !*trans_b);
                    s.iter_mut().zip(&tmp).for_each(|(o, &d)| *o += d);
                });
                acc(*b, &|s| {
                    let mut tmp = vec![T::zero(); s.len()];
                    if *trans_b {
                        // B is n×k: dB = dCᵀ · A
                        bmm_kernel(g, va, &mut tmp, batch, n, m, k, true, false);
                    } else {
                        // dB = Aᵀ · dC
                        bmm_kernel(va, g, &mut tmp, batch, k, m, n, true, false);
                    }
                    s.iter_mut().zip(&tmp).for_each(|(o, &d)| *o += d);
                });
            }
            Op::Unary(a, kind) => {
                let va = val(*a);
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * kind.derivative(va[i], y[i]);
                    }
                });
            }
            Op::SoftmaxLast(a) => {
                let n = *node.value.shape().last().unwrap();
                acc(*a, &|s| {
                    for ((sr, gr), yr) in s.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            sr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxLast(a) => {
                let n = *node.value.shape().last().unwrap();
                acc(*a, &|s| {
                    for ((sr, gr), yr) in s.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let total: T = gr.iter().copied().sum();
                        for j in 0..n {
                            sr[j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                });
            }
            Op::L2NormLast(a) => {
                let n = *node.value.shape().last().unwrap();
                let va = val(*a);
                acc(*a, &|s| {
                    for (r, sr) in s.chunks_mut(n).enumerate() {
                        let xr = &va[r * n..(r + 1) * n];
                        let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                        if norm == T::zero() {
                            continue;
                        }
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            sr[j] += (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                });
            }
            Op::SumAll(a) => acc(*a, &|s| s.iter_mut().for_each(|o| *o += g[0])),
            Op::SumLast(a) => {
                let n = self.nodes[a.0].value.shape().last().copied().unwrap();
                acc(*a, &|s| {
                    for (sr, &d) in s.chunks_mut(n).zip(g) {
                        sr.iter_mut().for_each(|o| *o += d);
                    }
                });
            }
            Op::LogSumExp(a) => {
                let va = val(*a);
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[0] * (va[i] - y[0]).exp();
                    }
                });
            }
            Op::Gather(a, index) => acc(*a, &|s| {
                for (&i, &d) in index.iter().zip(g) {
                    s[i] += d;
                }
            }),
            Op::SegmentSum(a, seg) => {
                let n = *node.value.shape().last().unwrap();
                acc(*a, &|s| {
                    for (i, &p) in seg.iter().enumerate() {
                        for j in 0..n {
                            s[i * n + j] += g[p * n + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    let slice = &g[offset..offset + len];
                    acc(p, &|s| s.iter_mut().zip(slice).for_each(|(o, &d)| *o += d));
                    offset += len;
                }
            }
            Op::Reshape(a) => acc(*a, &|s| s.iter_mut().zip(g).for_each(|(o, &d)| *o += d)),
            Op::MinMaxSegments(a, segments) => {
                let va = val(*a);
                let len = va.len() / segments;
                acc(*a, &|s| {
                    for seg in 0..*segments {
                        let range_ = seg * len..(seg + 1) * len;
                        let chunk = &va[range_.clone()];
                        let (lo, hi) = minmax(chunk);
                        let r = chunk[hi] - chunk[lo];
                        if r <= T::zero() {
                            continue;
                        }
                        let (gs, ys) = (&g[range_.clone()], &y[range_]);
                        let mut d_min = T::zero();
                        let mut d_max = T::zero();
                        for i in 0..len {
                            s[seg * len + i] += gs[i] / r;
                            d_min += gs[i] * (ys[i] - T::one()) / r;
                            d_max -= gs[i] * ys[i] / r;
                        }
                        s[seg * len + lo] += d_min;
                        s[seg * len + hi] += d_max;
                    }
                });
            }
            Op::Taps {
                x,
                idx,
                weights,
                taps,
            } => acc(*x, &|s| {
                for (o, &d) in g.iter().enumerate() {
                    for t in 0..*taps {
                        s[idx[o * taps + t]] += weights[o * taps + t] * d;
                    }
                }
            }),
        }
    }
}

/// Indices of the first minimum and first maximum.
fn minmax<T: Real>(xs: &[T]) -> (usize, usize) {
    let (mut lo, mut hi) = (0, 0);
    for (i, &v) in xs.iter().enumerate() {
        if v < xs[lo] {
            lo = i;
        }
        if v > xs[hi] {
            hi = i;
        }
    }
    (lo, hi)
}
