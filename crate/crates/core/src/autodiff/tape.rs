use crate::error::{BottError, Result};

use super::tensor::{matmul_into, Real, Tensor};

/// Logit added for masked attention keys. Finite so 32-bit softmax stays
/// NaN-free; `exp` of it underflows to exactly zero.
pub const MASK_LOGIT: f64 = -1e9;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    MatMulNT { a: Var, b: Var },
    Relu { x: Var },
    Add { a: Var, b: Var },
    LayerNorm { x: Var, gain: Var, shift: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    L2Normalize { x: Var, norms: Vec<T> },
    Affine { x: Var, scale: T },
    Rows { x: Var, idx: Vec<usize> },
    Sum { x: Var },
    ScalarHead { x: Var, grad: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records primitive operations for one forward pass.
///
/// Not shareable across threads while recording; forward passes on shared
/// parameters use one tape per thread.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> BottError {
    BottError::Shape { op, detail }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced on tape");
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input (features, masks).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `x W + b` for `x: N x a`, `W: a x b`, `b: [b]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.rank() != 2 || wv.rank() != 2 || xv.cols() != wv.rows() || bv.len() != wv.cols() {
            return Err(shape_err(
                "linear",
                format!("x {:?}, W {:?}, bias {:?}", xv.shape, wv.shape, bv.shape),
            ));
        }
        let (n, a, m) = (xv.rows(), xv.cols(), wv.cols());
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(&bv.data);
        }
        matmul_into(&xv.data, n, a, false, &wv.data, a, m, false, T::ONE, &mut out);
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(Tensor { shape: vec![n, m], data: out }, Op::Linear { x, w, b }, needs))
    }

    /// `A B^T` for `A: n x d`, `B: m x d`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.cols() {
            return Err(shape_err("matmul_nt", format!("{:?} x {:?}^T", av.shape, bv.shape)));
        }
        let (n, d, m) = (av.rows(), av.cols(), bv.rows());
        let mut out = vec![T::ZERO; n * m];
        matmul_into(&av.data, n, d, false, &bv.data, m, d, true, T::ZERO, &mut out);
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor { shape: vec![n, m], data: out }, Op::MatMulNT { a, b }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|v| if *v > T::ZERO { *v } else { T::ZERO }).collect(),
        };
        let needs = self.needs(&[x]);
        self.push(out, Op::Relu { x }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(shape_err("add", format!("{:?} + {:?}", av.shape, bv.shape)));
        }
        let out = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().zip(&bv.data).map(|(p, q)| *p + *q).collect(),
        };
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    /// Per-row standardization followed by `gain * xhat + shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let (xv, gv, sv) = (self.value(x), self.value(gain), self.value(shift));
        let d = xv.cols();
        if xv.rank() != 2 || d == 0 || gv.len() != d || sv.len() != d {
            return Err(shape_err(
                "layer_norm",
                format!("x {:?}, gain {:?}, shift {:?}", xv.shape, gv.shape, sv.shape),
            ));
        }
        let n = xv.rows();
        let inv_d = T::of(1.0 / d as f64);
        let eps = T::of(eps);
        let mut xhat = Vec::with_capacity(n * d);
        let mut inv_std = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_d;
            let is = T::ONE / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat.push(h);
                out.push(gv.data[c] * h + sv.data[c]);
            }
        }
        let needs = self.needs(&[x, gain, shift]);
        Ok(self.push(
            Tensor { shape: vec![n, d], data: out },
            Op::LayerNorm { x, gain, shift, xhat, inv_std },
            needs,
        ))
    }

    /// Scaled dot-product attention over already-projected `q`, `k`, `v`
    /// (`N x d` each), split into `heads` column blocks. Keys flagged in
    /// `padded` receive [`MASK_LOGIT`]. Output is the concatenation of the
    /// per-head results, `N x d`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, padded: &[bool]) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = (qv.rows(), qv.cols());
        if qv.rank() != 2 || kv.shape != qv.shape || vv.shape != qv.shape {
            return Err(shape_err(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", qv.shape, kv.shape, vv.shape),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", format!("width {d} not divisible into {heads} heads")));
        }
        if padded.len() != n {
            return Err(shape_err("attention", format!("mask of {} for {n} rows", padded.len())));
        }
        if padded.iter().all(|p| *p) {
            return Err(BottError::domain("attention with every key masked"));
        }
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mask = T::of(MASK_LOGIT);
        let mut probs = vec![T::ZERO; heads * n * n];
        let mut out = vec![T::ZERO; n * d];
        for h in 0..heads {
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            // SAFETY: column block h*dh..(h+1)*dh of N x d row-major buffers.
            unsafe {
                T::gemm(
                    n,
                    dh,
                    n,
                    scale,
                    qv.data.as_ptr().add(h * dh),
                    d as isize,
                    1,
                    kv.data.as_ptr().add(h * dh),
                    1,
                    d as isize,
                    T::ZERO,
                    p.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            for row in p.chunks_mut(n) {
                for (s, pad) in row.iter_mut().zip(padded) {
                    if *pad {
                        *s += mask;
                    }
                }
                softmax_in_place(row);
            }
            // SAFETY: as above; output block written with row stride d.
            unsafe {
                T::gemm(
                    n,
                    n,
                    dh,
                    T::ONE,
                    p.as_ptr(),
                    n as isize,
                    1,
                    vv.data.as_ptr().add(h * dh),
                    d as isize,
                    1,
                    T::ZERO,
                    out.as_mut_ptr().add(h * dh),
                    d as isize,
                    1,
                );
            }
        }
        let needs = self.needs(&[q, k, v]);
        Ok(self.push(
            Tensor { shape: vec![n, d], data: out },
            Op::Attention { q, k, v, heads, probs },
            needs,
        ))
    }

    /// Attention weights recorded by an [`Tape::attention`] node as
    /// `(heads, N, weights[heads][N][N])`.
    pub fn attention_weights(&self, v: Var) -> Option<(usize, usize, &[T])> {
        match &self.nodes[v.0].op {
            Op::Attention { heads, probs, .. } => Some((*heads, self.nodes[v.0].value.rows(), probs)),
            _ => None,
        }
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(shape_err("l2_normalize_rows", format!("{:?}", xv.shape)));
        }
        let (n, d) = (xv.rows(), xv.cols());
        let mut norms = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for r in 0..n {
            let row = xv.row(r);
            let norm = row.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(BottError::domain(format!("row {r} has zero norm (degenerate embedding)")));
            }
            let nt = T::of(norm);
            norms.push(nt);
            out.extend(row.iter().map(|v| *v / nt));
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor { shape: vec![n, d], data: out }, Op::L2Normalize { x, norms }, needs))
    }

    /// `scale * x + shift` with scalar coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let xv = self.value(x);
        let (s, b) = (T::of(scale), T::of(shift));
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|v| *v * s + b).collect(),
        };
        let needs = self.needs(&[x]);
        self.push(out, Op::Affine { x, scale: s }, needs)
    }

    /// The first `n` rows of a matrix.
    pub fn take_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        self.gather_rows(x, &(0..n).collect::<Vec<_>>())
    }

    /// Rows `idx` of a matrix, in that order.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || idx.iter().any(|&i| i >= xv.rows()) {
            return Err(shape_err("gather_rows", format!("rows {idx:?} of {:?}", xv.shape)));
        }
        let d = xv.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor {
            shape: vec![idx.len(), d],
            data,
        };
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Rows { x, idx: idx.to_vec() }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum::<T>();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, needs)
    }

    /// A scalar computed outside the tape from `x`, with its gradient with
    /// respect to `x` supplied by the caller.
    pub fn scalar_head(&mut self, x: Var, value: T, grad: Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if grad.shape != xv.shape {
            return Err(shape_err("scalar_head", format!("grad {:?} for value {:?}", grad.shape, xv.shape)));
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(value), Op::ScalarHead { x, grad: grad.data }, needs))
    }

    /// Backward pass from a scalar output.
    pub fn backward(&mut self, out: Var) -> Result<Gradients<T>> {
        let v = self.value(out);
        if v.len() != 1 {
            return Err(shape_err("backward", format!("output {:?} is not a scalar", v.shape)));
        }
        let seed = Tensor { shape: v.shape.clone(), data: vec![T::ONE] };
        self.backward_seeded(&[(out, seed)])
    }

    /// Backward pass with explicit upstream gradients for one or more
    /// outputs. A tape supports exactly one backward pass.
    pub fn backward_seeded(&mut self, seeds: &[(Var, Tensor<T>)]) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(BottError::TapeConsumed);
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if g.shape != self.nodes[v.0].value.shape {
                return Err(shape_err(
                    "backward",
                    format!("seed {:?} for value {:?}", g.shape, self.nodes[v.0].value.shape),
                ));
            }
            accumulate(&mut grads, *v, g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Only differentiable leaves are reported.
        for (i, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.needs_grad) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let want = |v: &Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, a, m) = (xv.rows(), xv.cols(), wv.cols());
                if want(x) {
                    let mut dx = vec![T::ZERO; n * a];
                    matmul_into(&g.data, n, m, false, &wv.data, a, m, true, T::ZERO, &mut dx);
                    accumulate(grads, *x, Tensor { shape: vec![n, a], data: dx });
                }
                if want(w) {
                    let mut dw = vec![T::ZERO; a * m];
                    matmul_into(&xv.data, n, a, true, &g.data, n, m, false, T::ZERO, &mut dw);
                    accumulate(grads, *w, Tensor { shape: vec![a, m], data: dw });
                }
                if want(b) {
                    let mut db = vec![T::ZERO; m];
                    for r in 0..n {
                        for (acc, v) in db.iter_mut().zip(g.row(r)) {
                            *acc += *v;
                        }
                    }
                    accumulate(grads, *b, Tensor { shape: self.value(*b).shape.clone(), data: db });
                }
            }
            Op::MatMulNT { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, d, m) = (av.rows(), av.cols(), bv.rows());
                if want(a) {
                    let mut da = vec![T::ZERO; n * d];
                    matmul_into(&g.data, n, m, false, &bv.data, m, d, false, T::ZERO, &mut da);
                    accumulate(grads, *a, Tensor { shape: vec![n, d], data: da });
                }
                if want(b) {
                    let mut db = vec![T::ZERO; m * d];
                    matmul_into(&g.data, n, m, true, &av.data, n, d, false, T::ZERO, &mut db);
                    accumulate(grads, *b, Tensor { shape: vec![m, d], data: db });
                }
            }
            Op::Relu { x } => {
                if want(x) {
                    let xv = self.value(*x);
                    let dx = xv
                        .data
                        .iter()
                        .zip(&g.data)
                        .map(|(v, gi)| if *v > T::ZERO { *gi } else { T::ZERO })
                        .collect();
                    accumulate(grads, *x, Tensor { shape: xv.shape.clone(), data: dx });
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if want(v) {
                        accumulate(grads, *v, g.clone());
                    }
                }
            }
            Op::LayerNorm { x, gain, shift, xhat, inv_std } => {
                let d = g.cols();
                let n = g.rows();
                let gv = self.value(*gain);
                if want(gain) || want(shift) {
                    let mut dg = vec![T::ZERO; d];
                    let mut ds = vec![T::ZERO; d];
                    for r in 0..n {
                        for c in 0..d {
                            let gi = g.data[r * d + c];
                            dg[c] += gi * xhat[r * d + c];
                            ds[c] += gi;
                        }
                    }
                    if want(gain) {
                        accumulate(grads, *gain, Tensor { shape: gv.shape.clone(), data: dg });
                    }
                    if want(shift) {
                        accumulate(grads, *shift, Tensor { shape: self.value(*shift).shape.clone(), data: ds });
                    }
                }
                if want(x) {
                    let inv_d = T::of(1.0 / d as f64);
                    let mut dx = vec![T::ZERO; n * d];
                    for r in 0..n {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let gr = g.row(r);
                        let mut mean_dxh = T::ZERO;
                        let mut mean_dxh_xh = T::ZERO;
                        for c in 0..d {
                            let dxh = gr[c] * gv.data[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[c];
                        }
                        mean_dxh *= inv_d;
                        mean_dxh_xh *= inv_d;
                        for c in 0..d {
                            let dxh = gr[c] * gv.data[c];
                            dx[r * d + c] = inv_std[r] * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
                        }
                    }
                    accumulate(grads, *x, Tensor { shape: vec![n, d], data: dx });
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d) = (qv.rows(), qv.cols());
                let dh = d / heads;
                let scale = T::of(1.0 / (dh as f64).sqrt());
                let mut dq = vec![T::ZERO; n * d];
                let mut dk = vec![T::ZERO; n * d];
                let mut dv = vec![T::ZERO; n * d];
                let mut dp = vec![T::ZERO; n * n];
                for h in 0..*heads {
                    let p = &probs[h * n * n..(h + 1) * n * n];
                    // SAFETY (all gemm calls below): column block h of N x d
                    // buffers, N x N scratch with row stride N.
                    unsafe {
                        // dV_h = P^T dO_h
                        T::gemm(n, n, dh, T::ONE, p.as_ptr(), 1, n as isize, g.data.as_ptr().add(h * dh), d as isize, 1, T::ZERO, dv.as_mut_ptr().add(h * dh), d as isize, 1);
                        // dP = dO_h V_h^T
                        T::gemm(n, dh, n, T::ONE, g.data.as_ptr().add(h * dh), d as isize, 1, vv.data.as_ptr().add(h * dh), 1, d as isize, T::ZERO, dp.as_mut_ptr(), n as isize, 1);
                    }
                    // dS = P * (dP - rowsum(P * dP)), folded in place into dp.
                    for r in 0..n {
                        let pr = &p[r * n..(r + 1) * n];
                        let dr = &mut dp[r * n..(r + 1) * n];
                        let dot: T = pr.iter().zip(dr.iter()).map(|(a, b)| *a * *b).sum();
                        for (ds, pv) in dr.iter_mut().zip(pr) {
                            *ds = *pv * (*ds - dot);
                        }
                    }
                    unsafe {
                        // dQ_h = scale * dS K_h
                        T::gemm(n, n, dh, scale, dp.as_ptr(), n as isize, 1, kv.data.as_ptr().add(h * dh), d as isize, 1, T::ZERO, dq.as_mut_ptr().add(h * dh), d as isize, 1);
                        // dK_h = scale * dS^T Q_h
                        T::gemm(n, n, dh, scale, dp.as_ptr(), 1, n as isize, qv.data.as_ptr().add(h * dh), d as isize, 1, T::ZERO, dk.as_mut_ptr().add(h * dh), d as isize, 1);
                    }
                }
                for (var, data) in [(q, dq), (k, dk), (v, dv)] {
                    if want(var) {
                        accumulate(grads, *var, Tensor { shape: vec![n, d], data });
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                if want(x) {
                    let y = &node.value;
                    let (n, d) = (y.rows(), y.cols());
                    let mut dx = vec![T::ZERO; n * d];
                    for r in 0..n {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                        for c in 0..d {
                            dx[r * d + c] = (gr[c] - yr[c] * dot) / norms[r];
                        }
                    }
                    accumulate(grads, *x, Tensor { shape: vec![n, d], data: dx });
                }
            }
            Op::Affine { x, scale } => {
                if want(x) {
                    let dx = g.data.iter().map(|v| *v * *scale).collect();
                    accumulate(grads, *x, Tensor { shape: g.shape.clone(), data: dx });
                }
            }
            Op::Rows { x, idx } => {
                if want(x) {
                    let xv = self.value(*x);
                    let d = xv.cols();
                    let mut dx = vec![T::ZERO; xv.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..d {
                            dx[i * d + c] = dx[i * d + c] + g.data[r * d + c];
                        }
                    }
                    accumulate(grads, *x, Tensor { shape: xv.shape.clone(), data: dx });
                }
            }
            Op::ScalarHead { x, grad } => {
                if want(x) {
                    let dx = grad.iter().map(|v| *v * g.data[0]).collect();
                    accumulate(grads, *x, Tensor { shape: self.value(*x).shape.clone(), data: dx });
                }
            }
            Op::Sum { x } => {
                if want(x) {
                    let xv = self.value(*x);
                    accumulate(grads, *x, Tensor { shape: xv.shape.clone(), data: vec![g.data[0]; xv.len()] });
                }
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mut m = row[0];
    for v in row.iter() {
        m = m.max(*v);
    }
    let mut total = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    let inv = T::ONE / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Gradients of the differentiable leaves after a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_and_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(t(&[2], &[0.0, 0.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data, vec![1.0, 2.0, 3.0, 4.0]);

        let x = tape.leaf(t(&[1, 1], &[2.0]));
        let w = tape.leaf(t(&[1, 1], &[3.0]));
        let b = tape.leaf(t(&[1], &[1.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data, vec![7.0]);
    }

    #[test]
    fn linear_shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 3], &[0.0; 6]));
        let w = tape.leaf(t(&[2, 2], &[0.0; 4]));
        let b = tape.leaf(t(&[2], &[0.0; 2]));
        assert!(matches!(tape.linear(x, w, b), Err(BottError::Shape { .. })));
    }

    #[test]
    fn layer_norm_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 2], &[5.0, 5.0, 1.0, -1.0]));
        let g = tape.leaf(t(&[2], &[1.0, 1.0]));
        let s = tape.leaf(t(&[2], &[0.0, 0.0]));
        let y = tape.layer_norm(x, g, s, 1e-5).unwrap();
        let out = &tape.value(y).data;
        assert_eq!(&out[..2], &[0.0, 0.0]);
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((out[2] - expect).abs() < 1e-12 && (out[3] + expect).abs() < 1e-12);
        assert!((out[2] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn l2_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 2], &[3.0, 4.0, 0.6, 0.8]));
        let y = tape.l2_normalize_rows(x).unwrap();
        let out = &tape.value(y).data;
        assert_eq!(&out[..2], &[0.6, 0.8]);
        assert!((out[2] - 0.6).abs() < 1e-12 && (out[3] - 0.8).abs() < 1e-12);
        let z = tape.leaf(t(&[1, 2], &[0.0, 0.0]));
        assert!(matches!(tape.l2_normalize_rows(z), Err(BottError::Domain(_))));
    }

    #[test]
    fn single_key_attention_returns_value() {
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(t(&[1, 4], &[0.3, -1.0, 2.0, 0.1]));
        let k = tape.leaf(t(&[1, 4], &[1.0, 1.0, -1.0, 0.5]));
        let v = tape.leaf(t(&[1, 4], &[7.0, 8.0, 9.0, 10.0]));
        let o = tape.attention(q, k, v, 2, &[false]).unwrap();
        assert_eq!(tape.value(o).data, vec![7.0, 8.0, 9.0, 10.0]);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let q = tape.leaf(t(&[3, 8], &data));
        let o = tape.attention(q, q, q, 4, &[false, false, true]).unwrap();
        let (heads, n, w) = tape.attention_weights(o).unwrap();
        assert_eq!((heads, n), (4, 3));
        for row in w.chunks(n) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|p| *p >= 0.0));
            assert_eq!(row[2], 0.0);
        }
        assert!(tape.attention(q, q, q, 4, &[true, true, true]).is_err());
        assert!(tape.attention(q, q, q, 3, &[false, false, false]).is_err());
    }

    #[test]
    fn shared_input_gradients_accumulate() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data, vec![2.0, 2.0]);
    }

    #[test]
    fn second_backward_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(BottError::TapeConsumed)));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let x = tape.leaf(t(&[1, 2], &[3.0, 4.0]));
        let y = tape.add(c, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data, vec![1.0, 1.0]);
    }
}
