//! Reverse-mode gradient tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles
//! together with the produced value. [`Graph::backward`] walks the record
//! in reverse and accumulates `∂loss/∂param` into the gradients held by a
//! [`ParamStore`]. Gradients add onto whatever is already stored, so
//! callers clear them explicitly with [`ParamStore::zero_grads`].
//!
//! Tensors are laid out with the batch (or batch·time) axis first. Apart
//! from bias-style broadcasting over that leading axis there is no
//! implicit broadcasting.

use std::collections::HashMap;

use super::activation::{sigmoid, silu_grad, silu_scalar, softplus_scalar};
use super::tensor::matmul_into;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine { a: usize, mul: f64 },
    AddBias { a: usize, bias: usize },
    MulCols { a: usize, v: usize },
    RowScale { a: usize, s: usize },
    ScaleBlocks { a: usize, factors: Vec<f64> },
    Outer { a: usize, b: usize },
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    BatchMatVec { m: usize, x: usize, time: Option<(usize, usize)>, transpose: bool },
    Silu(usize),
    Softplus(usize),
    Sigmoid(usize),
    Exp(usize),
    Square(usize),
    Clamp { a: usize, lo: f64, hi: f64 },
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    ConcatCols(Vec<usize>),
    SelectTime { a: usize, t: usize },
    StackTime(Vec<usize>),
    TimeDiff(usize),
    Blend { a: usize, b: usize, mask: Vec<bool> },
    CausalConv { x: usize, k: usize, bias: usize },
    TimeLinear { x: usize, w: usize, bias: usize },
    LayerNorm { a: usize, inv_std: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::AddBias { .. } => "add_bias",
            Op::MulCols { .. } => "mul_cols",
            Op::RowScale { .. } => "row_scale",
            Op::ScaleBlocks { .. } => "scale_blocks",
            Op::Outer { .. } => "outer",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatVec { .. } => "batch_matvec",
            Op::Silu(_) => "silu",
            Op::Softplus(_) => "softplus",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Square(_) => "square",
            Op::Clamp { .. } => "clamp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Reshape(_) => "reshape",
            Op::ConcatCols(_) => "concat_cols",
            Op::SelectTime { .. } => "select_time",
            Op::StackTime(_) => "stack_time",
            Op::TimeDiff(_) => "time_diff",
            Op::Blend { .. } => "blend",
            Op::CausalConv { .. } => "causal_conv",
            Op::TimeLinear { .. } => "time_linear",
            Op::LayerNorm { .. } => "layer_norm",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Dynamically recorded computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    fault: Option<String>,
}

fn rows_of(t: &Tensor) -> usize {
    t.shape().first().copied().unwrap_or(1)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some(op.name().to_string());
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.val(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.val(v).shape()
    }

    /// Fails if any recorded operation produced NaN or ±∞.
    pub fn check(&self) -> Result<()> {
        match &self.fault {
            Some(op) => Err(Error::NonFinite { op: op.clone() }),
            None => Ok(()),
        }
    }

    /// Value of a scalar node, or an error if the graph went non-finite.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.check()?;
        let t = self.val(v);
        if t.len() != 1 {
            return Err(Error::NotScalar(t.shape().to_vec()));
        }
        Ok(t.item())
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Tracked parameter; repeated calls with the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let (x, y) = (self.val(a), self.val(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(t, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p + q, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p - q, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p * q, Op::Mul(a.0, b.0))
    }

    /// `mul·a + add`, elementwise with constant coefficients.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let t = self.val(a).map(|v| mul * v + add);
        self.push(t, Op::Affine { a: a.0, mul })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.val(a).map(f);
        self.push(t, op)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, silu_scalar, Op::Silu(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus_scalar, Op::Softplus(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |v| v * v, Op::Square(a.0))
    }

    /// Elementwise clamp; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |v| v.clamp(lo, hi), Op::Clamp { a: a.0, lo, hi })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let s = t.sum() / t.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a.0))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a.0)))
    }

    /// Adds `bias` (length n) to every length-n row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.val(a), self.val(bias));
        let n = b.len();
        if x.last_dim() != n || b.rank() != 1 {
            return shape_err("add_bias", format!("{:?} + {:?}", x.shape(), b.shape()));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias { a: a.0, bias: bias.0 }))
    }

    /// Multiplies every length-n row of `a` elementwise by `v`.
    pub fn mul_cols(&mut self, a: Var, v: Var) -> Result<Var> {
        let (x, w) = (self.val(a), self.val(v));
        let n = w.len();
        if x.last_dim() != n || w.rank() != 1 {
            return shape_err("mul_cols", format!("{:?} * {:?}", x.shape(), w.shape()));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, wv) in row.iter_mut().zip(w.data()) {
                *o *= wv;
            }
        }
        Ok(self.push(out, Op::MulCols { a: a.0, v: v.0 }))
    }

    /// Scales leading-axis block `b` of `a` by `s[b]`.
    pub fn row_scale(&mut self, a: Var, s: Var) -> Result<Var> {
        let (x, sv) = (self.val(a), self.val(s));
        let rows = rows_of(x);
        if sv.len() != rows || x.rank() == 0 {
            return shape_err("row_scale", format!("{:?} by {:?}", x.shape(), sv.shape()));
        }
        let m = x.len() / rows;
        let mut out = x.clone();
        for (blk, &c) in out.data_mut().chunks_mut(m.max(1)).zip(sv.data()) {
            blk.iter_mut().for_each(|o| *o *= c);
        }
        Ok(self.push(out, Op::RowScale { a: a.0, s: s.0 }))
    }

    /// Scales consecutive equal-size blocks of `a` by constant factors.
    pub fn scale_blocks(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let x = self.val(a);
        if factors.is_empty() || x.len() % factors.len() != 0 {
            return shape_err("scale_blocks", format!("{:?} by {}", x.shape(), factors.len()));
        }
        let m = x.len() / factors.len();
        let mut out = x.clone();
        for (blk, &c) in out.data_mut().chunks_mut(m).zip(&factors) {
            blk.iter_mut().for_each(|o| *o *= c);
        }
        Ok(self.push(out, Op::ScaleBlocks { a: a.0, factors }))
    }

    /// Outer product of two vectors: `[n] ⊗ [m] → [n×m]`.
    pub fn outer(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.val(a), self.val(b));
        let (n, m) = (x.len(), y.len());
        let mut data = Vec::with_capacity(n * m);
        for &p in x.data() {
            data.extend(y.data().iter().map(|&q| p * q));
        }
        let t = Tensor::new(vec![n, m], data).expect("outer shape");
        self.push(t, Op::Outer { a: a.0, b: b.0 })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes a rank-2 operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let [ar, ac] = self.val(a).dims2("matmul")?;
        let [br, bc] = self.val(b).dims2("matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return shape_err(
                "matmul",
                format!("{:?}{} x {:?}{}", self.shape(a), if ta { "ᵀ" } else { "" }, self.shape(b), if tb { "ᵀ" } else { "" }),
            );
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.val(a).data(), self.val(b).data(), &mut out, m, k, n, ta, tb);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul { a: a.0, b: b.0, ta, tb }))
    }

    /// `x · W + b` for `x: [N×in]`, `W: [in×out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Per-row matrix-vector products.
    ///
    /// `m` holds `N` matrices of shape `p×q` (trailing two axes). Without
    /// `time`, row `n` of `x` multiplies matrix `n`. With `time = Some(t)`,
    /// `m` is `[B×L×p×q]` and row `b` of `x` multiplies matrix `(b, t)`.
    /// `transpose` uses each matrix transposed.
    pub fn batch_matvec(&mut self, m: Var, x: Var, time: Option<usize>, transpose: bool) -> Result<Var> {
        let (mt, xt) = (self.val(m), self.val(x));
        let ms = mt.shape();
        if ms.len() < 3 {
            return shape_err("batch_matvec", format!("matrices {ms:?}"));
        }
        let (p, q) = (ms[ms.len() - 2], ms[ms.len() - 1]);
        let (inn, outn) = if transpose { (p, q) } else { (q, p) };
        let rows = rows_of(xt);
        let time = match time {
            Some(t) => {
                if ms.len() != 4 || ms[0] != rows || t >= ms[1] {
                    return shape_err("batch_matvec", format!("time {t} into {ms:?} for {rows} rows"));
                }
                Some((t, ms[1]))
            }
            None => {
                if mt.len() != rows * p * q {
                    return shape_err("batch_matvec", format!("{ms:?} for {rows} rows"));
                }
                None
            }
        };
        if xt.len() != rows * inn {
            return shape_err("batch_matvec", format!("x {:?} needs {inn} columns", xt.shape()));
        }
        let mut out = vec![0.0; rows * outn];
        for r in 0..rows {
            let blk = match time {
                Some((t, l)) => r * l + t,
                None => r,
            };
            let mat = &mt.data()[blk * p * q..(blk + 1) * p * q];
            let xr = &xt.data()[r * inn..(r + 1) * inn];
            let or = &mut out[r * outn..(r + 1) * outn];
            if transpose {
                for i in 0..p {
                    let xi = xr[i];
                    for (o, &mv) in or.iter_mut().zip(&mat[i * q..(i + 1) * q]) {
                        *o += mv * xi;
                    }
                }
            } else {
                for i in 0..p {
                    or[i] = mat[i * q..(i + 1) * q].iter().zip(xr).map(|(a, b)| a * b).sum();
                }
            }
        }
        let t = Tensor::new(vec![rows, outn], out)?;
        Ok(self.push(
            t,
            Op::BatchMatVec {
                m: m.0,
                x: x.0,
                time,
                transpose,
            },
        ))
    }

    /// Concatenates `[N×nᵢ]` operands along the trailing axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = rows_of(self.val(parts[0]));
        let widths: Vec<usize> = parts.iter().map(|&p| self.val(p).len() / rows.max(1)).collect();
        if parts.iter().any(|&p| rows_of(self.val(p)) != rows) {
            return shape_err("concat_cols", "row counts differ");
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.val(p).data()[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.iter().map(|p| p.0).collect())))
    }

    /// Picks time step `t` from `[B×L×…]`, giving `[B×…]`.
    pub fn select_time(&mut self, a: Var, t: usize) -> Result<Var> {
        let x = self.val(a);
        let s = x.shape();
        if s.len() < 2 || t >= s[1] {
            return shape_err("select_time", format!("step {t} of {s:?}"));
        }
        let (b, l) = (s[0], s[1]);
        let m = x.len() / (b * l).max(1);
        let mut out = Vec::with_capacity(b * m);
        for bi in 0..b {
            let o = (bi * l + t) * m;
            out.extend_from_slice(&x.data()[o..o + m]);
        }
        let mut shape = vec![b];
        shape.extend_from_slice(&s[2..]);
        let val = Tensor::new(shape, out)?;
        Ok(self.push(val, Op::SelectTime { a: a.0, t }))
    }

    /// Stacks `L` tensors shaped `[B×…]` into `[B×L×…]`.
    pub fn stack_time(&mut self, steps: &[Var]) -> Result<Var> {
        let first = self.val(steps[0]).shape().to_vec();
        if steps.iter().any(|&s| self.shape(s) != first.as_slice()) {
            return shape_err("stack_time", "steps differ in shape");
        }
        let b = first.first().copied().unwrap_or(1);
        let l = steps.len();
        let m = self.val(steps[0]).len() / b.max(1);
        let mut out = vec![0.0; b * l * m];
        for (t, &s) in steps.iter().enumerate() {
            let d = self.val(s).data();
            for bi in 0..b {
                out[(bi * l + t) * m..(bi * l + t + 1) * m].copy_from_slice(&d[bi * m..(bi + 1) * m]);
            }
        }
        let mut shape = vec![b, l];
        shape.extend_from_slice(&first[1.min(first.len())..]);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::StackTime(steps.iter().map(|s| s.0).collect())))
    }

    /// Consecutive differences along the time axis: `[B×L×…] → [B×(L−1)×…]`.
    pub fn time_diff(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a);
        let s = x.shape().to_vec();
        if s.len() < 2 || s[1] < 2 {
            return shape_err("time_diff", format!("{s:?}"));
        }
        let (b, l) = (s[0], s[1]);
        let m = x.len() / (b * l);
        let mut out = Vec::with_capacity(b * (l - 1) * m);
        for bi in 0..b {
            for t in 1..l {
                let cur = (bi * l + t) * m;
                let prev = cur - m;
                out.extend((0..m).map(|i| x.data()[cur + i] - x.data()[prev + i]));
            }
        }
        let mut shape = s.clone();
        shape[1] = l - 1;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::TimeDiff(a.0)))
    }

    /// Row-wise select: leading row `r` comes from `a` when `mask[r]`, else `b`.
    pub fn blend(&mut self, a: Var, b: Var, mask: Vec<bool>) -> Result<Var> {
        self.same_shape("blend", a, b)?;
        let rows = rows_of(self.val(a));
        if mask.len() != rows {
            return shape_err("blend", format!("mask {} for {rows} rows", mask.len()));
        }
        let m = self.val(a).len() / rows.max(1);
        let mut out = self.val(b).clone();
        for (r, &take) in mask.iter().enumerate() {
            if take {
                out.data_mut()[r * m..(r + 1) * m].copy_from_slice(&self.val(a).data()[r * m..(r + 1) * m]);
            }
        }
        Ok(self.push(out, Op::Blend { a: a.0, b: b.0, mask }))
    }

    /// Depthwise causal convolution of `x: [B×L×C]` with `k: [W×C]`.
    ///
    /// Output step `t` sees inputs `t−W+1..=t` (left zero padding); tap
    /// `W−1` multiplies the current step.
    pub fn causal_conv(&mut self, x: Var, k: Var, bias: Var) -> Result<Var> {
        let out = super::conv::causal_conv1d_batched(self.val(x), self.val(k), self.val(bias))?;
        Ok(self.push(out, Op::CausalConv { x: x.0, k: k.0, bias: bias.0 }))
    }

    /// Linear map along time: `[B×L×C]` with `w: [H×L]`, `bias: [H]` → `[B×H×C]`.
    pub fn time_linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (xt, wt, bt) = (self.val(x), self.val(w), self.val(bias));
        let s = xt.shape();
        let [h, l] = wt.dims2("time_linear")?;
        if s.len() != 3 || s[1] != l || bt.len() != h {
            return shape_err("time_linear", format!("x {s:?}, w {:?}, bias {:?}", wt.shape(), bt.shape()));
        }
        let (b, c) = (s[0], s[2]);
        let mut out = vec![0.0; b * h * c];
        for bi in 0..b {
            let xb = &xt.data()[bi * l * c..(bi + 1) * l * c];
            let ob = &mut out[bi * h * c..(bi + 1) * h * c];
            for hi in 0..h {
                let orow = &mut ob[hi * c..(hi + 1) * c];
                orow.fill(bt.data()[hi]);
                for li in 0..l {
                    let wv = wt.data()[hi * l + li];
                    for (o, &xv) in orow.iter_mut().zip(&xb[li * c..(li + 1) * c]) {
                        *o += wv * xv;
                    }
                }
            }
        }
        let t = Tensor::new(vec![b, h, c], out)?;
        Ok(self.push(t, Op::TimeLinear { x: x.0, w: w.0, bias: bias.0 }))
    }

    /// Normalizes each trailing-axis row to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.val(a);
        let n = x.last_dim();
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.len() / n.max(1));
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { a: a.0, inv_std })
    }

    /// Accumulates `∂loss/∂θ` into every trainable parameter's gradient.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.check()?;
        let lt = self.val(loss);
        if lt.len() != 1 {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        let grads = self.gradients(loss);
        let mut touched = false;
        for (&id, &v) in &self.params {
            if let Some(g) = &grads[v.0] {
                touched = true;
                let p = store.get_mut(id);
                if p.trainable {
                    for (acc, gv) in p.grad.data_mut().iter_mut().zip(g) {
                        *acc += gv;
                    }
                }
            }
        }
        if !touched {
            return Err(Error::UntrackedGraph);
        }
        Ok(())
    }

    fn gradients(&self, loss: Var) -> Vec<Option<Vec<f64>>> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let v = |i: usize| nodes[i].value.data();
        macro_rules! acc {
            ($i:expr) => {
                grad_buf(grads, nodes, $i)
            };
        }
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                add_into(acc!(*a), g);
                add_into(acc!(*b), g);
            }
            Op::Sub(a, b) => {
                add_into(acc!(*a), g);
                acc!(*b).iter_mut().zip(g).for_each(|(o, gv)| *o -= gv);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (v(*a), v(*b));
                acc!(*a).iter_mut().zip(g).zip(bv).for_each(|((o, gv), y)| *o += gv * y);
                acc!(*b).iter_mut().zip(g).zip(av).for_each(|((o, gv), x)| *o += gv * x);
            }
            Op::Affine { a, mul } => {
                acc!(*a).iter_mut().zip(g).for_each(|(o, gv)| *o += mul * gv);
            }
            Op::AddBias { a, bias } => {
                add_into(acc!(*a), g);
                let db = acc!(*bias);
                let n = db.len();
                for row in g.chunks(n) {
                    add_into(db, row);
                }
            }
            Op::MulCols { a, v: w } => {
                let (xv, wv) = (v(*a), v(*w));
                let n = wv.len();
                {
                    let da = acc!(*a);
                    for (drow, grow) in da.chunks_mut(n).zip(g.chunks(n)) {
                        for j in 0..n {
                            drow[j] += grow[j] * wv[j];
                        }
                    }
                }
                let dw = acc!(*w);
                for (xrow, grow) in xv.chunks(n).zip(g.chunks(n)) {
                    for j in 0..n {
                        dw[j] += grow[j] * xrow[j];
                    }
                }
            }
            Op::RowScale { a, s } => {
                let (xv, sv) = (v(*a), v(*s));
                let m = (xv.len() / sv.len()).max(1);
                {
                    let da = acc!(*a);
                    for ((drow, grow), &c) in da.chunks_mut(m).zip(g.chunks(m)).zip(sv) {
                        drow.iter_mut().zip(grow).for_each(|(o, gv)| *o += c * gv);
                    }
                }
                let ds = acc!(*s);
                for (r, (xrow, grow)) in xv.chunks(m).zip(g.chunks(m)).enumerate() {
                    ds[r] += xrow.iter().zip(grow).map(|(x, gv)| x * gv).sum::<f64>();
                }
            }
            Op::ScaleBlocks { a, factors } => {
                let m = g.len() / factors.len();
                let da = acc!(*a);
                for ((drow, grow), &c) in da.chunks_mut(m).zip(g.chunks(m)).zip(factors) {
                    drow.iter_mut().zip(grow).for_each(|(o, gv)| *o += c * gv);
                }
            }
            Op::Outer { a, b } => {
                let (av, bv) = (v(*a), v(*b));
                let m = bv.len();
                {
                    let da = acc!(*a);
                    for (i, grow) in g.chunks(m).enumerate() {
                        da[i] += grow.iter().zip(bv).map(|(gv, y)| gv * y).sum::<f64>();
                    }
                }
                let db = acc!(*b);
                for (grow, &x) in g.chunks(m).zip(av) {
                    db.iter_mut().zip(grow).for_each(|(o, gv)| *o += gv * x);
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (ashape, bshape) = (nodes[*a].value.shape(), nodes[*b].value.shape());
                let (m, k) = if *ta { (ashape[1], ashape[0]) } else { (ashape[0], ashape[1]) };
                let n = if *tb { bshape[0] } else { bshape[1] };
                let (av, bv) = (v(*a), v(*b));
                if *ta {
                    matmul_into(bv, g, acc!(*a), k, n, m, *tb, true);
                } else {
                    matmul_into(g, bv, acc!(*a), m, n, k, false, !*tb);
                }
                if *tb {
                    matmul_into(g, av, acc!(*b), n, m, k, true, *ta);
                } else {
                    matmul_into(av, g, acc!(*b), k, m, n, !*ta, false);
                }
            }
            Op::BatchMatVec { m, x, time, transpose } => {
                let ms = nodes[*m].value.shape();
                let (p, q) = (ms[ms.len() - 2], ms[ms.len() - 1]);
                let (inn, outn) = if *transpose { (p, q) } else { (q, p) };
                let (mv, xv) = (v(*m), v(*x));
                let rows = xv.len() / inn;
                let blk = |r: usize| match time {
                    Some((t, l)) => r * l + t,
                    None => r,
                };
                {
                    let dm = acc!(*m);
                    for r in 0..rows {
                        let b0 = blk(r) * p * q;
                        let xr = &xv[r * inn..(r + 1) * inn];
                        let gr = &g[r * outn..(r + 1) * outn];
                        for i in 0..p {
                            for j in 0..q {
                                dm[b0 + i * q + j] += if *transpose { xr[i] * gr[j] } else { gr[i] * xr[j] };
                            }
                        }
                    }
                }
                let dx = acc!(*x);
                for r in 0..rows {
                    let b0 = blk(r) * p * q;
                    let gr = &g[r * outn..(r + 1) * outn];
                    let dr = &mut dx[r * inn..(r + 1) * inn];
                    for i in 0..p {
                        for j in 0..q {
                            let mij = mv[b0 + i * q + j];
                            if *transpose {
                                dr[i] += mij * gr[j];
                            } else {
                                dr[j] += mij * gr[i];
                            }
                        }
                    }
                }
            }
            Op::Silu(a) => {
                let xv = v(*a);
                acc!(*a).iter_mut().zip(g).zip(xv).for_each(|((o, gv), &x)| *o += gv * silu_grad(x));
            }
            Op::Softplus(a) => {
                let xv = v(*a);
                acc!(*a).iter_mut().zip(g).zip(xv).for_each(|((o, gv), &x)| *o += gv * sigmoid(x));
            }
            Op::Sigmoid(a) => {
                let yv = node.value.data();
                acc!(*a).iter_mut().zip(g).zip(yv).for_each(|((o, gv), &y)| *o += gv * y * (1.0 - y));
            }
            Op::Exp(a) => {
                let yv = node.value.data();
                acc!(*a).iter_mut().zip(g).zip(yv).for_each(|((o, gv), &y)| *o += gv * y);
            }
            Op::Square(a) => {
                let xv = v(*a);
                acc!(*a).iter_mut().zip(g).zip(xv).for_each(|((o, gv), &x)| *o += 2.0 * gv * x);
            }
            Op::Clamp { a, lo, hi } => {
                let xv = v(*a);
                acc!(*a).iter_mut().zip(g).zip(xv).for_each(|((o, gv), &x)| {
                    if x >= *lo && x <= *hi {
                        *o += gv;
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g[0];
                acc!(*a).iter_mut().for_each(|o| *o += gv);
            }
            Op::Mean(a) => {
                let da = acc!(*a);
                let gv = g[0] / da.len().max(1) as f64;
                da.iter_mut().for_each(|o| *o += gv);
            }
            Op::Reshape(a) => add_into(acc!(*a), g),
            Op::ConcatCols(parts) => {
                let rows = rows_of(&node.value);
                let total = g.len() / rows.max(1);
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p].value.len() / rows.max(1);
                    let dp = acc!(p);
                    for r in 0..rows {
                        add_into(&mut dp[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                    }
                    off += w;
                }
            }
            Op::SelectTime { a, t } => {
                let s = nodes[*a].value.shape();
                let (b, l) = (s[0], s[1]);
                let m = g.len() / b.max(1);
                let da = acc!(*a);
                for bi in 0..b {
                    let o = (bi * l + t) * m;
                    add_into(&mut da[o..o + m], &g[bi * m..(bi + 1) * m]);
                }
            }
            Op::StackTime(steps) => {
                let l = steps.len();
                let b = rows_of(&node.value);
                let m = g.len() / (b * l).max(1);
                for (t, &s) in steps.iter().enumerate() {
                    let ds = acc!(s);
                    for bi in 0..b {
                        add_into(&mut ds[bi * m..(bi + 1) * m], &g[(bi * l + t) * m..(bi * l + t + 1) * m]);
                    }
                }
            }
            Op::TimeDiff(a) => {
                let s = nodes[*a].value.shape();
                let (b, l) = (s[0], s[1]);
                let m = nodes[*a].value.len() / (b * l);
                let da = acc!(*a);
                for bi in 0..b {
                    for t in 1..l {
                        let gi = (bi * (l - 1) + t - 1) * m;
                        let cur = (bi * l + t) * m;
                        for i in 0..m {
                            da[cur + i] += g[gi + i];
                            da[cur - m + i] -= g[gi + i];
                        }
                    }
                }
            }
            Op::Blend { a, b, mask } => {
                let m = g.len() / mask.len().max(1);
                for (r, &take) in mask.iter().enumerate() {
                    let dst = acc!(if take { *a } else { *b });
                    add_into(&mut dst[r * m..(r + 1) * m], &g[r * m..(r + 1) * m]);
                }
            }
            Op::CausalConv { x, k, bias } => {
                let s = nodes[*x].value.shape();
                let (b, l, c) = (s[0], s[1], s[2]);
                let w = nodes[*k].value.shape()[0];
                let (xv, kv) = (v(*x), v(*k));
                {
                    let db = acc!(*bias);
                    for row in g.chunks(c) {
                        add_into(db, row);
                    }
                }
                {
                    let dk = acc!(*k);
                    for bi in 0..b {
                        for t in 0..l {
                            let go = (bi * l + t) * c;
                            for sft in 0..w {
                                let Some(src) = (t + sft + 1).checked_sub(w) else { continue };
                                let xo = (bi * l + src) * c;
                                for ch in 0..c {
                                    dk[sft * c + ch] += g[go + ch] * xv[xo + ch];
                                }
                            }
                        }
                    }
                }
                let dx = acc!(*x);
                for bi in 0..b {
                    for t in 0..l {
                        let go = (bi * l + t) * c;
                        for sft in 0..w {
                            let Some(src) = (t + sft + 1).checked_sub(w) else { continue };
                            let xo = (bi * l + src) * c;
                            for ch in 0..c {
                                dx[xo + ch] += g[go + ch] * kv[sft * c + ch];
                            }
                        }
                    }
                }
            }
            Op::TimeLinear { x, w, bias } => {
                let s = nodes[*x].value.shape();
                let (b, l, c) = (s[0], s[1], s[2]);
                let h = nodes[*w].value.shape()[0];
                let (xv, wv) = (v(*x), v(*w));
                {
                    let db = acc!(*bias);
                    for bi in 0..b {
                        for hi in 0..h {
                            let o = (bi * h + hi) * c;
                            db[hi] += g[o..o + c].iter().sum::<f64>();
                        }
                    }
                }
                {
                    let dw = acc!(*w);
                    for bi in 0..b {
                        for hi in 0..h {
                            let gr = &g[(bi * h + hi) * c..(bi * h + hi + 1) * c];
                            for li in 0..l {
                                let xr = &xv[(bi * l + li) * c..(bi * l + li + 1) * c];
                                dw[hi * l + li] += gr.iter().zip(xr).map(|(p, q)| p * q).sum::<f64>();
                            }
                        }
                    }
                }
                let dx = acc!(*x);
                for bi in 0..b {
                    for hi in 0..h {
                        let gr = &g[(bi * h + hi) * c..(bi * h + hi + 1) * c];
                        for li in 0..l {
                            let wv_ = wv[hi * l + li];
                            let dr = &mut dx[(bi * l + li) * c..(bi * l + li + 1) * c];
                            dr.iter_mut().zip(gr).for_each(|(o, gv)| *o += wv_ * gv);
                        }
                    }
                }
            }
            Op::LayerNorm { a, inv_std } => {
                let y = node.value.data();
                let n = node.value.last_dim();
                let da = acc!(*a);
                for (r, &is) in inv_std.iter().enumerate() {
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let mg = gr.iter().sum::<f64>() / n as f64;
                    let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n as f64;
                    for i in 0..n {
                        da[r * n + i] += is * (gr[i] - mg - yr[i] * mgy);
                    }
                }
            }
        }
    }
}

fn grad_buf<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], i: usize) -> &'a mut Vec<f64> {
    grads[i].get_or_insert_with(|| vec![0.0; nodes[i].value.len()])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(o, s)| *o += s);
}
