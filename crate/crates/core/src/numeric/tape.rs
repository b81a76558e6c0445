//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. Nodes are
//! created in dependency order, so `backward` replays the tape from the loss
//! towards the leaves and each node is visited after all of its consumers.

use std::collections::HashMap;

use super::scalar::{gemm, MatRef};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sentinel in [`Op::Select`] tables for "no source, output zero".
pub(crate) const NO_SOURCE: usize = usize::MAX;

enum Op<T> {
    Input,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Elu1(Var),
    Abs(Var),
    Transpose(Var),
    SumRows(Var),
    DivRows(Var, Var),
    Sum(Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    /// `out[o] = in[src[o]]` over flat indices; the workhorse behind max
    /// reductions (argmax precomputed in forward) and element picking.
    Select(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    GraphAttention {
        q: Var,
        k: Var,
        v: Var,
        neighbors: Vec<usize>,
        k_per_row: usize,
        heads: usize,
        scores: Vec<T>,
        norms: Vec<T>,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        cols: Vec<T>,
    },
    FocalLoss {
        logits: Var,
        target: Vec<T>,
        alpha: T,
        beta: T,
        norm: T,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a computation over tensors for later differentiation.
pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<T>>,
    params: &'p ParamStore<T>,
    param_vars: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, node)| self.nodes[node].as_deref())
    }

    /// Adds every parameter gradient into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(id, node) in &self.params {
            if let Some(g) = &self.nodes[node] {
                store.get_mut(id).tensor.accumulate_grad(g);
            }
        }
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(g.to_vec()),
    }
}

fn slot_mut<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Tape {
            nodes: Vec::new(),
            params,
            param_vars: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; `backward` yields no gradients.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new(params)
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].shape[0]
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].shape[1..].iter().product()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(&self.nodes[v.0].shape, self.nodes[v.0].value.clone())
            .expect("tape node shapes are consistent")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Input, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input_with_grad(&mut self, t: &Tensor<T>) -> Var {
        let g = self.grad_enabled;
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Input, g)
    }

    pub fn input_raw(&mut self, shape: &[usize], data: Vec<T>) -> Var {
        self.push(shape.to_vec(), data, Op::Input, false)
    }

    /// Loads a parameter; repeated calls return the same node so shared
    /// weights accumulate a single gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let t = &self.params.get(id).tensor;
        let g = self.grad_enabled;
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param, g);
        self.param_vars.insert(id, v);
        v
    }

    fn check_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(Error::dim(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::dim(op, &self.nodes[a.0].shape, &self.nodes[b.0].shape));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.check_2d("matmul", a)?;
        let (k2, n) = self.check_2d("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatRef::new(self.value(a), m, k),
            MatRef::new(self.value(b), k, n),
            T::zero(),
            &mut out,
        );
        let g = self.needs(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), g))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        self.same_shape(op, a, b)?;
        Ok(self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        let g = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        let g = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        let g = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), g))
    }

    /// `a[i, :] + row` for every row of the `N × C` matrix `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, c) = self.check_2d("add_row", a)?;
        if self.nodes[row.0].value.len() != c {
            return Err(Error::dim("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row);
        let mut out = self.value(a).to_vec();
        for i in 0..n {
            out[i * c..(i + 1) * c]
                .iter_mut()
                .zip(r)
                .for_each(|(x, &y)| *x = *x + y);
        }
        let g = self.needs(&[a, row]);
        Ok(self.push(vec![n, c], out, Op::AddRow(a, row), g))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let g = self.needs(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(T::zero())).collect();
        let g = self.needs(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), g)
    }

    /// `elu(x) + 1`: `x + 1` for `x >= 0`, `exp(x)` otherwise. Strictly positive.
    pub fn elu1(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| elu1(x)).collect();
        let g = self.needs(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Elu1(a), g)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.abs()).collect();
        let g = self.needs(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Abs(a), g)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (n, c) = self.check_2d("transpose", a)?;
        let src = self.value(a);
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            for j in 0..c {
                out[j * n + i] = src[i * c + j];
            }
        }
        let g = self.needs(&[a]);
        Ok(self.push(vec![c, n], out, Op::Transpose(a), g))
    }

    /// Column sums of an `N × C` matrix, as `1 × C`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (n, c) = self.check_2d("sum_rows", a)?;
        let src = self.value(a);
        let mut out = vec![T::zero(); c];
        for i in 0..n {
            out.iter_mut()
                .zip(&src[i * c..(i + 1) * c])
                .for_each(|(o, &x)| *o = *o + x);
        }
        let g = self.needs(&[a]);
        Ok(self.push(vec![1, c], out, Op::SumRows(a), g))
    }

    /// Divides row `i` of `a` (`N × C`) by `d[i]` (`N × 1`).
    pub fn div_rows(&mut self, a: Var, d: Var) -> Result<Var> {
        let (n, c) = self.check_2d("div_rows", a)?;
        if self.nodes[d.0].value.len() != n {
            return Err(Error::dim("div_rows", self.shape(a), self.shape(d)));
        }
        let dv = self.value(d);
        let mut out = self.value(a).to_vec();
        for i in 0..n {
            let inv = T::one() / dv[i];
            out[i * c..(i + 1) * c].iter_mut().for_each(|x| *x = *x * inv);
        }
        let g = self.needs(&[a, d]);
        Ok(self.push(vec![n, c], out, Op::DivRows(a, d), g))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let g = self.needs(&[a]);
        self.push(vec![1], vec![s], Op::Sum(a), g)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (n, c) = self.check_2d("slice_cols", a)?;
        if start >= end || end > c {
            return Err(Error::Parameter(format!(
                "column range {start}..{end} out of 0..{c}"
            )));
        }
        let w = end - start;
        let src = self.value(a);
        let mut out = Vec::with_capacity(n * w);
        for i in 0..n {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let g = self.needs(&[a]);
        Ok(self.push(vec![n, w], out, Op::SliceCols(a, start, end), g))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Parameter("concat of zero tensors".into()))?;
        let (n, _) = self.check_2d("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.check_2d("concat_cols", p)?;
            if r != n {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let g = self.needs(parts);
        Ok(self.push(vec![n, total], out, Op::ConcatCols(parts.to_vec()), g))
    }

    /// Rows `a[idx[0]], a[idx[1]], ...`; repeated indices are allowed.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let n = self.rows(a);
        let c = self.cols(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Parameter(format!("row index {bad} out of 0..{n}")));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let mut shape = self.shape(a).to_vec();
        shape[0] = idx.len();
        let g = self.needs(&[a]);
        Ok(self.push(shape, out, Op::GatherRows(a, idx.to_vec()), g))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.nodes[a.0].value.len() {
            return Err(Error::dim("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let g = self.needs(&[a]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), g))
    }

    /// Flat-index selection: `out[o] = a[src[o]]`, or zero where `src[o]` is
    /// [`NO_SOURCE`].
    pub(crate) fn select(&mut self, a: Var, src: Vec<usize>, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != src.len() {
            return Err(Error::dim("select", shape, &[src.len()]));
        }
        let values = self.value(a);
        let n = values.len();
        let mut out = Vec::with_capacity(src.len());
        for &s in &src {
            if s == NO_SOURCE {
                out.push(T::zero());
            } else if s < n {
                out.push(values[s]);
            } else {
                return Err(Error::Parameter(format!("flat index {s} out of 0..{n}")));
            }
        }
        let g = self.needs(&[a]);
        Ok(self.push(shape.to_vec(), out, Op::Select(a, src), g))
    }

    /// Picks individual elements by flat index into a 1-D result.
    pub fn pick(&mut self, a: Var, flat: &[usize]) -> Result<Var> {
        self.select(a, flat.to_vec(), &[flat.len()])
    }

    /// `out[i, c] = max_k a[table[i*k_per_row + k], c]` with ties resolved to
    /// the first neighbor in table order.
    pub fn neighbor_max(&mut self, a: Var, table: &[usize], k_per_row: usize) -> Result<Var> {
        let (n_src, c) = self.check_2d("neighbor_max", a)?;
        if k_per_row == 0 || table.len() % k_per_row != 0 {
            return Err(Error::Parameter(format!(
                "neighbor table of {} entries is not a multiple of k={k_per_row}",
                table.len()
            )));
        }
        if let Some(&bad) = table.iter().find(|&&j| j >= n_src) {
            return Err(Error::Parameter(format!("neighbor index {bad} out of 0..{n_src}")));
        }
        let rows = table.len() / k_per_row;
        let vals = self.value(a);
        let mut src = Vec::with_capacity(rows * c);
        for i in 0..rows {
            let nbrs = &table[i * k_per_row..(i + 1) * k_per_row];
            for ch in 0..c {
                let mut best = nbrs[0] * c + ch;
                for &j in &nbrs[1..] {
                    let cand = j * c + ch;
                    if vals[cand] > vals[best] {
                        best = cand;
                    }
                }
                src.push(best);
            }
        }
        self.select(a, src, &[rows, c])
    }

    /// Row-wise normalization to zero mean and unit variance followed by a
    /// learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (n, c) = self.check_2d("layer_norm", x)?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let cf = T::from_usize(c).unwrap();
        let xs = self.value(x);
        let gs = self.value(gamma);
        let bs = self.value(beta);
        let mut xhat = vec![T::zero(); n * c];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..c {
                let h = (row[j] - mean) * r;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gs[j] + bs[j];
            }
        }
        let g = self.needs(&[x, gamma, beta]);
        let (xhat, rstd) = if g { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            vec![n, c],
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            g,
        ))
    }

    /// Kernelized attention restricted to per-row neighbor sets.
    ///
    /// `q` and `k` must already be mapped through a positive feature map. For
    /// row `i` and head `h`, with `s_j = q_ih · k_jh` over the neighbors `j` of
    /// `i`, the output is `Σ_j s_j v_jh / Σ_j s_j`.
    pub fn graph_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        neighbors: &[usize],
        k_per_row: usize,
        heads: usize,
    ) -> Result<Var> {
        let (nq, c) = self.check_2d("graph_attention", q)?;
        let (nk, ck) = self.check_2d("graph_attention", k)?;
        let (nv, cv) = self.check_2d("graph_attention", v)?;
        if ck != c || cv != c || nv != nk {
            return Err(Error::dim("graph_attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::Parameter(format!("{c} channels not divisible by {heads} heads")));
        }
        if k_per_row == 0 || neighbors.len() != nq * k_per_row {
            return Err(Error::Parameter("neighbor table does not match query rows".into()));
        }
        if let Some(&bad) = neighbors.iter().find(|&&j| j >= nk) {
            return Err(Error::Parameter(format!("neighbor index {bad} out of 0..{nk}")));
        }
        let d = c / heads;
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut scores = vec![T::zero(); nq * heads * k_per_row];
        let mut norms = vec![T::zero(); nq * heads];
        let mut out = vec![T::zero(); nq * c];
        for i in 0..nq {
            let nbrs = &neighbors[i * k_per_row..(i + 1) * k_per_row];
            for h in 0..heads {
                let qi = &qs[i * c + h * d..i * c + (h + 1) * d];
                let base = (i * heads + h) * k_per_row;
                let mut total = T::zero();
                let acc = &mut out[i * c + h * d..i * c + (h + 1) * d];
                for (slot, &j) in nbrs.iter().enumerate() {
                    let kj = &ks[j * c + h * d..j * c + (h + 1) * d];
                    let s: T = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum();
                    scores[base + slot] = s;
                    total = total + s;
                    let vj = &vs[j * c + h * d..j * c + (h + 1) * d];
                    acc.iter_mut().zip(vj).for_each(|(o, &x)| *o = *o + s * x);
                }
                norms[i * heads + h] = total;
                let inv = T::one() / total;
                acc.iter_mut().for_each(|o| *o = *o * inv);
            }
        }
        let g = self.needs(&[q, k, v]);
        Ok(self.push(
            vec![nq, c],
            out,
            Op::GraphAttention {
                q,
                k,
                v,
                neighbors: if g { neighbors.to_vec() } else { Vec::new() },
                k_per_row,
                heads,
                scores,
                norms,
            },
            g,
        ))
    }

    /// Same-padded 2-D cross-correlation.
    ///
    /// `input` is `C_in × H × W`, `kernel` is `C_out × C_in × k × k` with odd
    /// `k`, and `bias` has `C_out` entries.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let is = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if is.len() != 3 || ks.len() != 4 || ks[2] != ks[3] {
            return Err(Error::dim("conv2d", &is, &ks));
        }
        let (cin, h, w) = (is[0], is[1], is[2]);
        let (cout, kcin, kk) = (ks[0], ks[1], ks[2]);
        if kcin != cin {
            return Err(Error::dim("conv2d", &is, &ks));
        }
        if kk % 2 == 0 {
            return Err(Error::Parameter(format!("conv2d kernel size {kk} must be odd")));
        }
        if self.value(bias).len() != cout {
            return Err(Error::dim("conv2d", &ks, self.shape(bias)));
        }
        let cols = im2col(self.value(input), cin, h, w, kk);
        let hw = h * w;
        let mut out = vec![T::zero(); cout * hw];
        let bs = self.value(bias);
        for (o, &b) in bs.iter().enumerate() {
            out[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = b);
        }
        gemm(
            MatRef::new(self.value(kernel), cout, cin * kk * kk),
            MatRef::new(&cols, cin * kk * kk, hw),
            T::one(),
            &mut out,
        );
        let g = self.needs(&[input, kernel, bias]);
        Ok(self.push(
            vec![cout, h, w],
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                cols: if g { cols } else { Vec::new() },
            },
            g,
        ))
    }

    /// Penalty-reduced focal loss on logits against a soft target map in
    /// `[0, 1]`; cells with target exactly one are positives. The sum is
    /// divided by the positive count (at least one).
    pub fn focal_loss(&mut self, logits: Var, target: &[T], alpha: T, beta: T) -> Result<Var> {
        let xs = self.value(logits);
        if xs.len() != target.len() {
            return Err(Error::dim("focal_loss", self.shape(logits), &[target.len()]));
        }
        let positives = target.iter().filter(|&&t| t == T::one()).count().max(1);
        let norm = T::from_usize(positives).unwrap();
        let mut total = T::zero();
        for (&x, &t) in xs.iter().zip(target) {
            total = total + focal_term(x, t, alpha, beta);
        }
        let g = self.needs(&[logits]);
        Ok(self.push(
            vec![1],
            vec![total / norm],
            Op::FocalLoss {
                logits,
                target: target.to_vec(),
                alpha,
                beta,
                norm,
            },
            g,
        ))
    }

    /// Reverse pass from `loss`, seeding its gradient with ones.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let params = self
            .param_vars
            .iter()
            .map(|(&id, &v)| (id, v.0))
            .collect::<Vec<_>>();
        if !self.nodes[loss.0].needs_grad {
            return Gradients { nodes: grads, params };
        }
        grads[loss.0] = Some(vec![T::one(); self.nodes[loss.0].value.len()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { nodes: grads, params }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input | Op::Param => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.wants(a) {
                    let slot = slot_mut(&mut grads[a.0], m * k);
                    gemm(
                        MatRef::new(g, m, n),
                        MatRef::new(self.value(b), k, n).t(),
                        T::one(),
                        slot,
                    );
                }
                if self.wants(b) {
                    let slot = slot_mut(&mut grads[b.0], k * n);
                    gemm(
                        MatRef::new(self.value(a), m, k).t(),
                        MatRef::new(g, m, n),
                        T::one(),
                        slot,
                    );
                }
            }
            &Op::Add(a, b) => {
                if self.wants(a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.wants(b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            &Op::Sub(a, b) => {
                if self.wants(a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.wants(b) {
                    let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                    add_into(&mut grads[b.0], &neg);
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let ga: Vec<T> = g.iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
                    add_into(&mut grads[a.0], &ga);
                }
                if self.wants(b) {
                    let gb: Vec<T> = g.iter().zip(self.value(a)).map(|(&x, &y)| x * y).collect();
                    add_into(&mut grads[b.0], &gb);
                }
            }
            &Op::AddRow(a, row) => {
                if self.wants(a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.wants(row) {
                    let c = self.value(row).len();
                    let slot = slot_mut(&mut grads[row.0], c);
                    for chunk in g.chunks(c) {
                        slot.iter_mut().zip(chunk).for_each(|(s, &x)| *s = *s + x);
                    }
                }
            }
            &Op::Scale(a, s) => {
                if self.wants(a) {
                    let ga: Vec<T> = g.iter().map(|&x| x * s).collect();
                    add_into(&mut grads[a.0], &ga);
                }
            }
            &Op::Relu(a) => {
                if self.wants(a) {
                    let ga: Vec<T> = g
                        .iter()
                        .zip(self.value(a))
                        .map(|(&x, &v)| if v > T::zero() { x } else { T::zero() })
                        .collect();
                    add_into(&mut grads[a.0], &ga);
                }
            }
            &Op::Elu1(a) => {
                if self.wants(a) {
                    let ga: Vec<T> = g
                        .iter()
                        .zip(self.value(a))
                        .zip(&node.value)
                        .map(|((&x, &v), &y)| if v >= T::zero() { x } else { x * y })
                        .collect();
                    add_into(&mut grads[a.0], &ga);
                }
            }
            &Op::Abs(a) => {
                if self.wants(a) {
                    let ga: Vec<T> = g
                        .iter()
                        .zip(self.value(a))
                        .map(|(&x, &v)| {
                            if v > T::zero() {
                                x
                            } else if v < T::zero() {
                                -x
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    add_into(&mut grads[a.0], &ga);
                }
            }
            &Op::Transpose(a) => {
                if self.wants(a) {
                    let (n, c) = (self.shape(a)[0], self.shape(a)[1]);
                    let slot = slot_mut(&mut grads[a.0], n * c);
                    for i in 0..n {
                        for j in 0..c {
                            slot[i * c + j] = slot[i * c + j] + g[j * n + i];
                        }
                    }
                }
            }
            &Op::SumRows(a) => {
                if self.wants(a) {
                    let (n, c) = (self.shape(a)[0], self.shape(a)[1]);
                    let slot = slot_mut(&mut grads[a.0], n * c);
                    for chunk in slot.chunks_mut(c) {
                        chunk.iter_mut().zip(g).for_each(|(s, &x)| *s = *s + x);
                    }
                }
            }
            &Op::DivRows(a, d) => {
                let (n, c) = (self.shape(a)[0], self.shape(a)[1]);
                let dv = self.value(d);
                if self.wants(a) {
                    let slot = slot_mut(&mut grads[a.0], n * c);
                    for i in 0..n {
                        let inv = T::one() / dv[i];
                        for j in 0..c {
                            slot[i * c + j] = slot[i * c + j] + g[i * c + j] * inv;
                        }
                    }
                }
                if self.wants(d) {
                    let slot = slot_mut(&mut grads[d.0], n);
                    for i in 0..n {
                        // d(a/d)/dd = -out/d
                        let dot: T = (0..c).map(|j| g[i * c + j] * node.value[i * c + j]).sum();
                        slot[i] = slot[i] - dot / dv[i];
                    }
                }
            }
            &Op::Sum(a) => {
                if self.wants(a) {
                    let len = self.value(a).len();
                    let slot = slot_mut(&mut grads[a.0], len);
                    slot.iter_mut().for_each(|s| *s = *s + g[0]);
                }
            }
            &Op::SliceCols(a, start, end) => {
                if self.wants(a) {
                    let (n, c) = (self.shape(a)[0], self.shape(a)[1]);
                    let w = end - start;
                    let slot = slot_mut(&mut grads[a.0], n * c);
                    for i in 0..n {
                        slot[i * c + start..i * c + end]
                            .iter_mut()
                            .zip(&g[i * w..(i + 1) * w])
                            .for_each(|(s, &x)| *s = *s + x);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.wants(p) {
                        let slot = slot_mut(&mut grads[p.0], n * w);
                        for i in 0..n {
                            slot[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(&g[i * total + offset..i * total + offset + w])
                                .for_each(|(s, &x)| *s = *s + x);
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherRows(a, idx) => {
                let a = *a;
                if self.wants(a) {
                    let c = self.cols(a);
                    let slot = slot_mut(&mut grads[a.0], self.value(a).len());
                    for (o, &i) in idx.iter().enumerate() {
                        slot[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(&g[o * c..(o + 1) * c])
                            .for_each(|(s, &x)| *s = *s + x);
                    }
                }
            }
            &Op::Reshape(a) => {
                if self.wants(a) {
                    add_into(&mut grads[a.0], g);
                }
            }
            Op::Select(a, src) => {
                let a = *a;
                if self.wants(a) {
                    let slot = slot_mut(&mut grads[a.0], self.value(a).len());
                    for (o, &s) in src.iter().enumerate() {
                        if s != NO_SOURCE {
                            slot[s] = slot[s] + g[o];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, c) = (node.shape[0], node.shape[1]);
                let cf = T::from_usize(c).unwrap();
                let gs = self.value(*gamma);
                if self.wants(*beta) {
                    let slot = slot_mut(&mut grads[beta.0], c);
                    for chunk in g.chunks(c) {
                        slot.iter_mut().zip(chunk).for_each(|(s, &v)| *s = *s + v);
                    }
                }
                if self.wants(*gamma) {
                    let slot = slot_mut(&mut grads[gamma.0], c);
                    for i in 0..n {
                        for j in 0..c {
                            slot[j] = slot[j] + g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if self.wants(*x) {
                    let slot = slot_mut(&mut grads[x.0], n * c);
                    for i in 0..n {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..c {
                            let d = g[i * c + j] * gs[j];
                            mean_d = mean_d + d;
                            mean_dx = mean_dx + d * xhat[i * c + j];
                        }
                        mean_d = mean_d / cf;
                        mean_dx = mean_dx / cf;
                        for j in 0..c {
                            let d = g[i * c + j] * gs[j];
                            let h = xhat[i * c + j];
                            slot[i * c + j] = slot[i * c + j] + rstd[i] * (d - mean_d - h * mean_dx);
                        }
                    }
                }
            }
            Op::GraphAttention {
                q,
                k,
                v,
                neighbors,
                k_per_row,
                heads,
                scores,
                norms,
            } => {
                let (q, k, v, kpr, heads) = (*q, *k, *v, *k_per_row, *heads);
                let nq = node.shape[0];
                let c = node.shape[1];
                let d = c / heads;
                let nk = self.shape(k)[0];
                let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
                let mut gq = vec![T::zero(); nq * c];
                let mut gk = vec![T::zero(); nk * c];
                let mut gv = vec![T::zero(); nk * c];
                for i in 0..nq {
                    let nbrs = &neighbors[i * kpr..(i + 1) * kpr];
                    for h in 0..heads {
                        let off = i * c + h * d;
                        let gi = &g[off..off + d];
                        let oi = &node.value[off..off + d];
                        let total = norms[i * heads + h];
                        let inv = T::one() / total;
                        let d_norm = -gi.iter().zip(oi).map(|(&a, &b)| a * b).sum::<T>() * inv;
                        let base = (i * heads + h) * kpr;
                        for (slot, &j) in nbrs.iter().enumerate() {
                            let joff = j * c + h * d;
                            let vj = &vs[joff..joff + d];
                            let ds = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>() * inv + d_norm;
                            let w = scores[base + slot] * inv;
                            for t in 0..d {
                                gq[off + t] = gq[off + t] + ds * ks[joff + t];
                                gk[joff + t] = gk[joff + t] + ds * qs[off + t];
                                gv[joff + t] = gv[joff + t] + w * gi[t];
                            }
                        }
                    }
                }
                if self.wants(q) {
                    add_into(&mut grads[q.0], &gq);
                }
                if self.wants(k) {
                    add_into(&mut grads[k.0], &gk);
                }
                if self.wants(v) {
                    add_into(&mut grads[v.0], &gv);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                cols,
            } => {
                let is = self.shape(*input);
                let (cin, h, w) = (is[0], is[1], is[2]);
                let ks = self.shape(*kernel);
                let (cout, kk) = (ks[0], ks[2]);
                let hw = h * w;
                let rows = cin * kk * kk;
                if self.wants(*bias) {
                    let slot = slot_mut(&mut grads[bias.0], cout);
                    for o in 0..cout {
                        slot[o] = slot[o] + g[o * hw..(o + 1) * hw].iter().copied().sum();
                    }
                }
                if self.wants(*kernel) {
                    let slot = slot_mut(&mut grads[kernel.0], cout * rows);
                    gemm(
                        MatRef::new(g, cout, hw),
                        MatRef::new(cols, rows, hw).t(),
                        T::one(),
                        slot,
                    );
                }
                if self.wants(*input) {
                    let mut dcols = vec![T::zero(); rows * hw];
                    gemm(
                        MatRef::new(self.value(*kernel), cout, rows).t(),
                        MatRef::new(g, cout, hw),
                        T::zero(),
                        &mut dcols,
                    );
                    let slot = slot_mut(&mut grads[input.0], cin * hw);
                    col2im_add(&dcols, cin, h, w, kk, slot);
                }
            }
            Op::FocalLoss {
                logits,
                target,
                alpha,
                beta,
                norm,
            } => {
                if self.wants(*logits) {
                    let scale = g[0] / *norm;
                    let ga: Vec<T> = self
                        .value(*logits)
                        .iter()
                        .zip(target)
                        .map(|(&x, &t)| focal_grad(x, t, *alpha, *beta) * scale)
                        .collect();
                    add_into(&mut grads[logits.0], &ga);
                }
            }
        }
    }
}

pub(crate) fn elu1<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        x + T::one()
    } else {
        x.exp()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn focal_term<T: Scalar>(x: T, t: T, alpha: T, beta: T) -> T {
    let p = sigmoid(x);
    // log p = -softplus(-x), log(1 - p) = -softplus(x)
    if t == T::one() {
        (T::one() - p).powf(alpha) * softplus(-x)
    } else {
        (T::one() - t).powf(beta) * p.powf(alpha) * softplus(x)
    }
}

fn focal_grad<T: Scalar>(x: T, t: T, alpha: T, beta: T) -> T {
    let p = sigmoid(x);
    let q = T::one() - p;
    if t == T::one() {
        // d/dx [-(1-p)^a log p]
        -alpha * p * q.powf(alpha) * softplus(-x) - q.powf(alpha + T::one())
    } else {
        // d/dx [-(1-t)^b p^a log(1-p)]
        let w = (T::one() - t).powf(beta);
        w * (alpha * p.powf(alpha) * q * softplus(x) + p.powf(alpha + T::one()))
    }
}

fn im2col<T: Scalar>(input: &[T], cin: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![T::zero(); cin * k * k * hw];
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[y * w + x] = input[(c * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(cols: &[T], cin: usize, h: usize, w: usize, k: usize, out: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let o = (c * h + sy as usize) * w + sx as usize;
                        out[o] = out[o] + src[y * w + x];
                    }
                }
            }
        }
    }
}
