//! Reverse-mode differentiation over dense row-major `f64` matrices.
//!
//! A [`Tape`] records every operation in evaluation order; [`Tape::backward`]
//! walks it in reverse and accumulates gradients. Scalars are `1 x 1`
//! tensors.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data does not match {rows}x{cols}");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(1, 1, vec![v])
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` where `op` optionally transposes.
/// Shapes are those of the (possibly transposed) operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides above address only those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Relu(Var),
    Gelu(Var),
    Log(Var),
    SoftmaxRows(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<(usize, usize)>,
        probs: Vec<Vec<f64>>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    /// Scalar loss whose gradient w.r.t. `x` was computed analytically
    /// during the forward pass.
    External {
        x: Var,
        grad: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Leaf bound to parameter slot `slot`; its gradient is reported under
    /// that slot by [`Gradients::param`].
    pub fn param(&mut self, slot: usize, t: Tensor) -> Var {
        self.push(t, Op::Param(slot))
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows) {
            return Err(Error::TokenOutOfRange { id: bad, size: t.rows });
        }
        let mut out = Tensor::zeros(ids.len(), t.cols);
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let out = Tensor::from_vec(x.rows, x.cols, data);
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, b) = (self.value(a), self.value(row));
        assert_eq!((1, x.cols), b.shape(), "add_row shape mismatch");
        let mut out = x.clone();
        for r in 0..out.rows {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&b.data) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let out = Tensor::from_vec(x.rows, x.cols, data);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let out = Tensor::from_vec(x.rows, x.cols, x.data.iter().map(|v| v * s).collect());
        self.push(out, Op::Scale(a, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols, y.rows, "matmul inner dimension mismatch");
        let mut out = Tensor::zeros(x.rows, y.cols);
        gemm(x.rows, x.cols, y.cols, &x.data, false, &y.data, false, &mut out.data, 0.0);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::from_vec(x.rows, x.cols, x.data.iter().map(|v| v.max(0.0)).collect());
        self.push(out, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::from_vec(x.rows, x.cols, x.data.iter().map(|&v| gelu(v)).collect());
        self.push(out, Op::Gelu(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::from_vec(x.rows, x.cols, x.data.iter().map(|v| v.ln()).collect());
        self.push(out, Op::Log(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (xt, g, b) = (self.value(x), self.value(gain), self.value(bias));
        assert_eq!((1, xt.cols), g.shape());
        assert_eq!((1, xt.cols), b.shape());
        let n = xt.cols as f64;
        let mut out = Tensor::zeros(xt.rows, xt.cols);
        let mut xhat = vec![0.0; xt.data.len()];
        let mut inv_std = vec![0.0; xt.rows];
        for r in 0..xt.rows {
            let row = xt.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            let base = r * xt.cols;
            for c in 0..xt.cols {
                let h = (row[c] - mean) * is;
                xhat[base + c] = h;
                out.data[base + c] = h * g.data[c] + b.data[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Multiplies by a fixed mask (already scaled by `1 / keep`).
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let xt = self.value(x);
        assert_eq!(mask.len(), xt.data.len());
        let data = xt.data.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::from_vec(xt.rows, xt.cols, data);
        self.push(out, Op::Dropout { x, mask })
    }

    /// Causal multi-head attention within each `(start, len)` segment of the
    /// packed rows; tokens never attend across segments.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: &[(usize, usize)]) -> Var {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qt.shape(), kt.shape());
        assert_eq!(qt.shape(), vt.shape());
        let d = qt.cols;
        assert!(heads > 0 && d % heads == 0);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(qt.rows, d);
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for &(start, len) in segments {
            assert!(start + len <= qt.rows);
            for h in 0..heads {
                let off = h * dh;
                let mut p = vec![0.0; len * len];
                for i in 0..len {
                    let qi = &qt.row(start + i)[off..off + dh];
                    let pr = &mut p[i * len..i * len + i + 1];
                    let mut mx = f64::NEG_INFINITY;
                    for (j, s) in pr.iter_mut().enumerate() {
                        let kj = &kt.row(start + j)[off..off + dh];
                        *s = dot(qi, kj) * scale;
                        mx = mx.max(*s);
                    }
                    let mut z = 0.0;
                    for s in pr.iter_mut() {
                        *s = (*s - mx).exp();
                        z += *s;
                    }
                    for s in pr.iter_mut() {
                        *s /= z;
                    }
                    let orow = &mut out.data[(start + i) * d + off..(start + i) * d + off + dh];
                    for (j, &pij) in pr.iter().enumerate() {
                        let vj = &vt.row(start + j)[off..off + dh];
                        for (o, vv) in orow.iter_mut().zip(vj) {
                            *o += pij * vv;
                        }
                    }
                }
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
        )
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let xt = self.value(x);
        let mut out = Tensor::zeros(rows.len(), xt.cols);
        for (r, &i) in rows.iter().enumerate() {
            out.row_mut(r).copy_from_slice(xt.row(i));
        }
        self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// Attaches a scalar with a caller-supplied gradient w.r.t. `x`.
    pub fn external_loss(&mut self, x: Var, value: f64, grad: Tensor) -> Var {
        assert_eq!(self.value(x).shape(), grad.shape(), "external gradient shape mismatch");
        self.push(Tensor::scalar(value), Op::External { x, grad })
    }

    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(Error::Unsupported(format!(
                "backward needs a scalar root, got {}x{}",
                rv.rows, rv.cols
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut gt = Tensor::zeros(t.rows, t.cols);
                    for (r, &i) in ids.iter().enumerate() {
                        for (a, b) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *a += b;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, row) => {
                    let mut gr = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (a, b) in gr.data.iter_mut().zip(g.row(r)) {
                            *a += b;
                        }
                    }
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *row, gr);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let ga = g.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
                    let gb = g.data.iter().zip(&x.data).map(|(p, q)| p * q).collect();
                    accumulate(&mut grads, *a, Tensor::from_vec(g.rows, g.cols, ga));
                    accumulate(&mut grads, *b, Tensor::from_vec(g.rows, g.cols, gb));
                }
                Op::Scale(a, s) => {
                    let ga = g.data.iter().map(|v| v * s).collect();
                    accumulate(&mut grads, *a, Tensor::from_vec(g.rows, g.cols, ga));
                }
                Op::MatMul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (x.rows, x.cols, y.cols);
                    let mut ga = Tensor::zeros(m, k);
                    gemm(m, n, k, &g.data, false, &y.data, true, &mut ga.data, 0.0);
                    let mut gb = Tensor::zeros(k, n);
                    gemm(k, m, n, &x.data, true, &g.data, false, &mut gb.data, 0.0);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let ga = g
                        .data
                        .iter()
                        .zip(&x.data)
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, Tensor::from_vec(g.rows, g.cols, ga));
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let ga = g.data.iter().zip(&x.data).map(|(gv, xv)| gv * gelu_grad(*xv)).collect();
                    accumulate(&mut grads, *a, Tensor::from_vec(g.rows, g.cols, ga));
                }
                Op::Log(a) => {
                    let x = self.value(*a);
                    let ga = g.data.iter().zip(&x.data).map(|(gv, xv)| gv / xv).collect();
                    accumulate(&mut grads, *a, Tensor::from_vec(g.rows, g.cols, ga));
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let s = dot(yr, gr);
                        for ((o, yv), gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - s);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let x = self.value(*a);
                    let ga = Tensor::from_vec(x.rows, x.cols, vec![g.data[0]; x.data.len()]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let cols = g.cols;
                    let n = cols as f64;
                    let mut gx = Tensor::zeros(g.rows, cols);
                    let mut gg = Tensor::zeros(1, cols);
                    let mut gb = Tensor::zeros(1, cols);
                    for r in 0..g.rows {
                        let gr = g.row(r);
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let d = gr[c] * gv.data[c];
                            mean_d += d;
                            mean_dx += d * xh[c];
                            gg.data[c] += gr[c] * xh[c];
                            gb.data[c] += gr[c];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        let out = gx.row_mut(r);
                        for c in 0..cols {
                            out[c] = inv_std[r] * (gr[c] * gv.data[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gain, gg);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::Dropout { x, mask } => {
                    let gx = g.data.iter().zip(mask).map(|(a, m)| a * m).collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(g.rows, g.cols, gx));
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    segments,
                    probs,
                } => {
                    let (qt, kt, vt) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qt.cols;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Tensor::zeros(qt.rows, d);
                    let mut gk = Tensor::zeros(qt.rows, d);
                    let mut gvv = Tensor::zeros(qt.rows, d);
                    let mut dp = Vec::new();
                    for (s, &(start, len)) in segments.iter().enumerate() {
                        for h in 0..*heads {
                            let p = &probs[s * heads + h];
                            let off = h * dh;
                            for i in 0..len {
                                let gi = &g.row(start + i)[off..off + dh];
                                let pr = &p[i * len..i * len + i + 1];
                                dp.clear();
                                dp.extend((0..=i).map(|j| dot(gi, &vt.row(start + j)[off..off + dh])));
                                let sum_pd: f64 = pr.iter().zip(&dp).map(|(a, b)| a * b).sum();
                                for j in 0..=i {
                                    let pij = pr[j];
                                    let gvj = &mut gvv.data[(start + j) * d + off..(start + j) * d + off + dh];
                                    for (o, gg) in gvj.iter_mut().zip(gi) {
                                        *o += pij * gg;
                                    }
                                    let ds = pij * (dp[j] - sum_pd) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let kj = &kt.row(start + j)[off..off + dh];
                                    let gqi = &mut gq.data[(start + i) * d + off..(start + i) * d + off + dh];
                                    for (o, kk) in gqi.iter_mut().zip(kj) {
                                        *o += ds * kk;
                                    }
                                    let qi = &qt.row(start + i)[off..off + dh];
                                    let gkj = &mut gk.data[(start + j) * d + off..(start + j) * d + off + dh];
                                    for (o, qq) in gkj.iter_mut().zip(qi) {
                                        *o += ds * qq;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *q, gq);
                    accumulate(&mut grads, *k, gk);
                    accumulate(&mut grads, *v, gvv);
                }
                Op::SelectRows { x, rows } => {
                    let xt = self.value(*x);
                    let mut gx = Tensor::zeros(xt.rows, xt.cols);
                    for (r, &i) in rows.iter().enumerate() {
                        for (a, b) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                            *a += b;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::External { x, grad } => {
                    let s = g.data[0];
                    let gx = grad.data.iter().map(|v| v * s).collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(grad.rows, grad.cols, gx));
                }
            }
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(slot) => Some((slot, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `v`; `None` when `v` does not influence it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// `(slot, gradient)` for every parameter leaf that received one.
    pub fn params(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(slot, node)| self.grads[node].as_ref().map(|g| (slot, g)))
    }
}
