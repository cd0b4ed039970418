//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] owns every value produced during a forward pass. Operations
//! append nodes in execution order, so the node list is already topologically
//! sorted and [`Graph::backward`] simply walks it in reverse, visiting each
//! node once. A node records a backward rule only when at least one input
//! requires a gradient; graphs built from constants alone are plain
//! inference and never allocate gradient buffers.
//!
//! Broadcasting is limited to [`Graph::bias_add`] (a vector over the last
//! axis) and [`Graph::mul_scalar`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{axpy, dot, matmul_kernel, matmul_nt_kernel, matmul_tn_kernel, Element, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const GROUP_NORM_EPS: f64 = 1e-5;
/// Added to each norm in the cosine-similarity denominator.
pub const COSINE_EPS: f64 = 1e-8;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    BiasAdd(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    MulScalar(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        groups: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sigmoid(Var),
    Log(Var),
    L1Distance(Var, Var),
    Cosine(Var, Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// A computation tape in numeric mode `F`.
/// Receives a node and a closure that updates that node's gradient buffer.
type GradSink<'a, F> = dyn FnMut(Var, &mut dyn FnMut(&mut [F])) + 'a;

pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Element> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_fwd<F: Element>(x: F) -> F {
    let half = F::from_f64(0.5);
    half * x * (F::ONE + (x * F::from_f64(core::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<F: Element>(x: F) -> F {
    let half = F::from_f64(0.5);
    let cdf = half * (F::ONE + (x * F::from_f64(core::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(half * x * x)).exp() * F::from_f64(0.398_942_280_401_432_7);
    cdf + x * pdf
}

fn sigmoid<F: Element>(x: F) -> F {
    if x >= F::ZERO {
        F::ONE / (F::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::ONE + e)
    }
}

impl<F: Element> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) root with respect
    /// to `v`; `None` if `v` does not require grad or is not an ancestor.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?}", self.shape(a)), self.shape(b)));
        }
        Ok(())
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(shape_err(op, "a 2-D tensor", s)),
        }
    }

    fn unary(&mut self, x: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    // ---- primitives -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{k}, _] right operand"), self.shape(b)));
        }
        let out = matmul_kernel(self.data(a), self.data(b), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix("transpose", a)?;
        let src = self.data(a);
        let mut out = vec![F::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Sub(a, b), &[a, b]))
    }

    /// Adds a vector over the last axis of `x`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(b) != [d] {
            return Err(shape_err("bias_add", format!("[{d}]"), self.shape(b)));
        }
        let bias = self.data(b);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_exact_mut(d) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::BiasAdd(x, b), &[x, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = F::from_f64(c);
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let value = self.value(x).map(|v| v * sv);
        Ok(self.push(value, Op::MulScalar(x, s), &[x, s]))
    }

    /// 1-D convolution over time without padding.
    ///
    /// `x` is `[T, C_in]`, `w` is `[C_out, K, C_in / groups]`, `b` is
    /// `[C_out]`; the result is `[floor((T - K) / stride) + 1, C_out]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        groups: usize,
    ) -> Result<Var> {
        let (t_in, c_in) = self.matrix("conv1d", x)?;
        let (c_out, k, cig) = match *self.shape(w) {
            [o, k, c] => (o, k, c),
            ref s => return Err(shape_err("conv1d", "[C_out, K, C_in/groups] weight", s)),
        };
        if stride == 0 || groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::Parameter(format!(
                "conv1d: stride {stride} / groups {groups} incompatible with {c_in} -> {c_out} channels"
            )));
        }
        if cig != c_in / groups {
            return Err(shape_err(
                "conv1d",
                format!("[{c_out}, {k}, {}] weight", c_in / groups),
                self.shape(w),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(shape_err("conv1d", format!("[{c_out}] bias"), self.shape(b)));
            }
        }
        if t_in < k {
            return Err(Error::Length {
                op: "conv1d",
                got: t_in,
                required: k,
            });
        }
        let t_out = (t_in - k) / stride + 1;
        let xd = self.data(x);
        let wd = self.data(w);
        let cog = c_out / groups;
        let mut out = vec![F::ZERO; t_out * c_out];
        for t in 0..t_out {
            let base = t * stride;
            let orow = &mut out[t * c_out..(t + 1) * c_out];
            if groups == 1 {
                let window = &xd[base * c_in..(base + k) * c_in];
                for (o, ov) in orow.iter_mut().enumerate() {
                    *ov = dot(window, &wd[o * k * cig..(o + 1) * k * cig]);
                }
            } else {
                for (o, ov) in orow.iter_mut().enumerate() {
                    let g = o / cog;
                    let mut acc = F::ZERO;
                    for kk in 0..k {
                        let xr = (base + kk) * c_in + g * cig;
                        let wr = (o * k + kk) * cig;
                        acc += dot(&xd[xr..xr + cig], &wd[wr..wr + cig]);
                    }
                    *ov = acc;
                }
            }
        }
        if let Some(b) = b {
            let bd = self.data(b);
            for row in out.chunks_exact_mut(c_out) {
                for (o, &bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            Tensor::new(vec![t_out, c_out], out)?,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                groups,
            },
            &inputs,
        ))
    }

    /// Group normalization of `x: [T, C]`: each group of `C / groups`
    /// channels is normalized over all its time steps, then scaled and
    /// shifted per channel.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (t, c) = self.matrix("group_norm", x)?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::Parameter(format!(
                "group_norm: {groups} groups do not divide {c} channels"
            )));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(shape_err("group_norm", format!("[{c}] affine"), self.shape(p)));
            }
        }
        let cg = c / groups;
        let n = F::from_usize(t * cg);
        let xd = self.data(x);
        let mut mean = vec![F::ZERO; groups];
        let mut rstd = vec![F::ZERO; groups];
        for g in 0..groups {
            let mut s = F::ZERO;
            for row in xd.chunks_exact(c) {
                for &v in &row[g * cg..(g + 1) * cg] {
                    s += v;
                }
            }
            let mu = s / n;
            let mut var = F::ZERO;
            for row in xd.chunks_exact(c) {
                for &v in &row[g * cg..(g + 1) * cg] {
                    var += (v - mu) * (v - mu);
                }
            }
            mean[g] = mu;
            rstd[g] = F::ONE / (var / n + F::from_f64(GROUP_NORM_EPS)).sqrt();
        }
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut out = vec![F::ZERO; t * c];
        for (orow, row) in out.chunks_exact_mut(c).zip(xd.chunks_exact(c)) {
            for ch in 0..c {
                let g = ch / cg;
                orow[ch] = (row[ch] - mean[g]) * rstd[g] * gd[ch] + bd[ch];
            }
        }
        Ok(self.push(
            Tensor::new(vec![t, c], out)?,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Normalizes each row (last axis) to zero mean and unit variance, then
    /// applies the per-feature affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(x).cols();
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(shape_err("layer_norm", format!("[{d}] affine"), self.shape(p)));
            }
        }
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let rows = xd.len() / d;
        let dn = F::from_usize(d);
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![F::ZERO; xd.len()];
        for (orow, row) in out.chunks_exact_mut(d).zip(xd.chunks_exact(d)) {
            let mut s = F::ZERO;
            for &v in row {
                s += v;
            }
            let mu = s / dn;
            let mut var = F::ZERO;
            for &v in row {
                var += (v - mu) * (v - mu);
            }
            let r = F::ONE / (var / dn + F::from_f64(LAYER_NORM_EPS)).sqrt();
            for j in 0..d {
                orow[j] = (row[j] - mu) * r * gd[j] + bd[j];
            }
            mean.push(mu);
            rstd.push(r);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), gelu_fwd)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), F::ln)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let d = self.value(x).cols();
        let mut out = self.data(x).to_vec();
        for row in out.chunks_exact_mut(d) {
            let m = row.iter().fold(row[0], |a, &b| a.max(b));
            let mut s = F::ZERO;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let shape = self.shape(x).to_vec();
        let value = Tensor::new(shape, out).expect("shape preserved");
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let d = self.value(x).cols();
        let mut out = self.data(x).to_vec();
        for row in out.chunks_exact_mut(d) {
            let m = row.iter().fold(row[0], |a, &b| a.max(b));
            let mut s = F::ZERO;
            for &v in row.iter() {
                s += (v - m).exp();
            }
            let lse = m + s.ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let shape = self.shape(x).to_vec();
        let value = Tensor::new(shape, out).expect("shape preserved");
        self.push(value, Op::LogSoftmax(x), &[x])
    }

    /// Per-row ℓ1 distance: `[R, D] x [R, D] -> [R]`.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1_distance", a, b)?;
        let d = self.value(a).cols();
        let out: Vec<F> = self
            .data(a)
            .chunks_exact(d)
            .zip(self.data(b).chunks_exact(d))
            .map(|(ra, rb)| {
                let mut s = F::ZERO;
                for (&x, &y) in ra.iter().zip(rb) {
                    s += (x - y).abs();
                }
                s
            })
            .collect();
        let n = out.len();
        Ok(self.push(Tensor::new(vec![n], out)?, Op::L1Distance(a, b), &[a, b]))
    }

    /// Per-row cosine similarity `a.b / ((|a| + eps)(|b| + eps))`:
    /// `[R, D] x [R, D] -> [R]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_similarity", a, b)?;
        let d = self.value(a).cols();
        let eps = F::from_f64(COSINE_EPS);
        let out: Vec<F> = self
            .data(a)
            .chunks_exact(d)
            .zip(self.data(b).chunks_exact(d))
            .map(|(ra, rb)| {
                let na = dot(ra, ra).sqrt();
                let nb = dot(rb, rb).sqrt();
                dot(ra, rb) / ((na + eps) * (nb + eps))
            })
            .collect();
        let n = out.len();
        Ok(self.push(Tensor::new(vec![n], out)?, Op::Cosine(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = F::ZERO;
        for &v in self.data(x) {
            s += v;
        }
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let mut s = F::ZERO;
        for &v in self.data(x) {
            s += v;
        }
        let n = F::from_usize(self.value(x).len());
        self.push(Tensor::scalar(s / n), Op::Mean(x), &[x])
    }

    /// Mean over the first axis of a `[T, D]` tensor, giving `[D]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (t, d) = self.matrix("mean_rows", x)?;
        let mut out = vec![F::ZERO; d];
        for row in self.data(x).chunks_exact(d) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let tn = F::from_usize(t);
        for o in &mut out {
            *o = *o / tn;
        }
        Ok(self.push(Tensor::new(vec![d], out)?, Op::MeanRows(x), &[x]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Parameter("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis < {}", base.len()), &base));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", format!("{base:?} except axis {axis}"), s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let dim = self.shape(v)[axis];
                let block = dim * inner;
                out.extend_from_slice(&self.data(v)[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Same elements, new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(shape_err(
                "slice",
                format!("axis {axis} range {start}..{end} inside the tensor"),
                &shape,
            ));
        }
        let (outer, dim, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let off = o * dim * inner;
            out.extend_from_slice(&src[off + start * inner..off + end * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = end - start;
        Ok(self.push(
            Tensor::new(oshape, out)?,
            Op::Slice { x, axis, start },
            &[x],
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Populates gradients of `root` with respect to every ancestor that
    /// requires one. Gradients from a previous call are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(Error::Rank {
                op: "backward",
                shape: rv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![F::ONE]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|g| Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![F::ZERO; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if needs(*a) {
                    let da = matmul_nt_kernel(g, self.data(*b), m, n, k);
                    acc(*a, &mut |s| add_into(s, &da));
                }
                if needs(*b) {
                    let db = matmul_tn_kernel(self.data(*a), g, m, k, n);
                    acc(*b, &mut |s| add_into(s, &db));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                acc(*a, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    for (o, &gv) in s.iter_mut().zip(g) {
                        *o += -gv;
                    }
                });
            }
            Op::BiasAdd(x, b) => {
                acc(*x, &mut |s| add_into(s, g));
                let d = self.shape(*b)[0];
                acc(*b, &mut |s| {
                    for row in g.chunks_exact(d) {
                        add_into(s, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |s| {
                    for ((o, &gv), &bv) in s.iter_mut().zip(g).zip(bd) {
                        *o += gv * bv;
                    }
                });
                acc(*b, &mut |s| {
                    for ((o, &gv), &av) in s.iter_mut().zip(g).zip(ad) {
                        *o += gv * av;
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                acc(*x, &mut |s| axpy(c, g, s));
            }
            Op::MulScalar(x, sv) => {
                let scalar = self.data(*sv)[0];
                acc(*x, &mut |s| axpy(scalar, g, s));
                let xd = self.data(*x);
                acc(*sv, &mut |s| s[0] += dot(g, xd));
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                groups,
            } => self.conv1d_backward(*x, *w, *b, *stride, *groups, g, &mut acc),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let (t, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let cg = c / groups;
                let xd = self.data(*x);
                let gd = self.data(*gamma);
                let n = F::from_usize(t * cg);
                let xhat = |r: usize, ch: usize| (xd[r * c + ch] - mean[ch / cg]) * rstd[ch / cg];
                acc(*beta, &mut |s| {
                    for row in g.chunks_exact(c) {
                        add_into(s, row);
                    }
                });
                acc(*gamma, &mut |s| {
                    for r in 0..t {
                        for ch in 0..c {
                            s[ch] += g[r * c + ch] * xhat(r, ch);
                        }
                    }
                });
                #[allow(clippy::needless_range_loop)]
                acc(*x, &mut |s| {
                    for grp in 0..*groups {
                        let mut m1 = F::ZERO;
                        let mut m2 = F::ZERO;
                        for r in 0..t {
                            for ch in grp * cg..(grp + 1) * cg {
                                let dxh = g[r * c + ch] * gd[ch];
                                m1 += dxh;
                                m2 += dxh * xhat(r, ch);
                            }
                        }
                        m1 = m1 / n;
                        m2 = m2 / n;
                        for r in 0..t {
                            for ch in grp * cg..(grp + 1) * cg {
                                let dxh = g[r * c + ch] * gd[ch];
                                s[r * c + ch] += rstd[grp] * (dxh - m1 - xhat(r, ch) * m2);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let d = self.value(*x).cols();
                let xd = self.data(*x);
                let gd = self.data(*gamma);
                let dn = F::from_usize(d);
                acc(*beta, &mut |s| {
                    for row in g.chunks_exact(d) {
                        add_into(s, row);
                    }
                });
                acc(*gamma, &mut |s| {
                    for (r, (row, grow)) in xd.chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
                        for j in 0..d {
                            s[j] += grow[j] * (row[j] - mean[r]) * rstd[r];
                        }
                    }
                });
                acc(*x, &mut |s| {
                    for (r, ((row, grow), srow)) in xd
                        .chunks_exact(d)
                        .zip(g.chunks_exact(d))
                        .zip(s.chunks_exact_mut(d))
                        .enumerate()
                    {
                        let mut m1 = F::ZERO;
                        let mut m2 = F::ZERO;
                        for j in 0..d {
                            let dxh = grow[j] * gd[j];
                            m1 += dxh;
                            m2 += dxh * (row[j] - mean[r]) * rstd[r];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            let xh = (row[j] - mean[r]) * rstd[r];
                            srow[j] += rstd[r] * (grow[j] * gd[j] - m1 - xh * m2);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |s| {
                    for ((o, &gv), &xv) in s.iter_mut().zip(g).zip(xd) {
                        *o += gv * gelu_grad(xv);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |s| {
                    for ((o, &gv), &yv) in s.iter_mut().zip(g).zip(y) {
                        *o += gv * yv * (F::ONE - yv);
                    }
                });
            }
            Op::Log(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |s| {
                    for ((o, &gv), &xv) in s.iter_mut().zip(g).zip(xd) {
                        *o += gv / xv;
                    }
                });
            }
            Op::Softmax(x) => {
                let d = node.value.cols();
                let y = node.value.data();
                acc(*x, &mut |s| {
                    for ((srow, grow), yrow) in
                        s.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(y.chunks_exact(d))
                    {
                        let inner = dot(grow, yrow);
                        for j in 0..d {
                            srow[j] += yrow[j] * (grow[j] - inner);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let d = node.value.cols();
                let y = node.value.data();
                acc(*x, &mut |s| {
                    for ((srow, grow), yrow) in
                        s.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(y.chunks_exact(d))
                    {
                        let mut total = F::ZERO;
                        for &gv in grow {
                            total += gv;
                        }
                        for j in 0..d {
                            srow[j] += grow[j] - yrow[j].exp() * total;
                        }
                    }
                });
            }
            Op::L1Distance(a, b) => {
                let d = self.value(*a).cols();
                let (ad, bd) = (self.data(*a), self.data(*b));
                let sign = |x: F, y: F| {
                    if x > y {
                        F::ONE
                    } else if x < y {
                        -F::ONE
                    } else {
                        F::ZERO
                    }
                };
                acc(*a, &mut |s| {
                    for (idx, o) in s.iter_mut().enumerate() {
                        *o += g[idx / d] * sign(ad[idx], bd[idx]);
                    }
                });
                acc(*b, &mut |s| {
                    for (idx, o) in s.iter_mut().enumerate() {
                        *o += g[idx / d] * sign(bd[idx], ad[idx]);
                    }
                });
            }
            Op::Cosine(a, b) => {
                let d = self.value(*a).cols();
                let (ad, bd) = (self.data(*a), self.data(*b));
                let eps = F::from_f64(COSINE_EPS);
                // d cos / d u for u in {a, b}: v / den - (dot / den) * u / (|u| (|u| + eps))
                let rule = |u: &[F], v: &[F], gr: F, out: &mut [F]| {
                    let nu = dot(u, u).sqrt();
                    let nv = dot(v, v).sqrt();
                    let den = (nu + eps) * (nv + eps);
                    let c = dot(u, v) / den;
                    let k = if nu > F::ZERO {
                        c / (nu * (nu + eps))
                    } else {
                        F::ZERO
                    };
                    for j in 0..u.len() {
                        out[j] += gr * (v[j] / den - k * u[j]);
                    }
                };
                acc(*a, &mut |s| {
                    for (r, srow) in s.chunks_exact_mut(d).enumerate() {
                        rule(&ad[r * d..(r + 1) * d], &bd[r * d..(r + 1) * d], g[r], srow);
                    }
                });
                acc(*b, &mut |s| {
                    for (r, srow) in s.chunks_exact_mut(d).enumerate() {
                        rule(&bd[r * d..(r + 1) * d], &ad[r * d..(r + 1) * d], g[r], srow);
                    }
                });
            }
            Op::Sum(x) => {
                let gv = g[0];
                acc(*x, &mut |s| s.iter_mut().for_each(|o| *o += gv));
            }
            Op::Mean(x) => {
                let gv = g[0] / F::from_usize(self.value(*x).len());
                acc(*x, &mut |s| s.iter_mut().for_each(|o| *o += gv));
            }
            Op::MeanRows(x) => {
                let (t, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let tn = F::from_usize(t);
                acc(*x, &mut |s| {
                    for row in s.chunks_exact_mut(d) {
                        for (o, &gv) in row.iter_mut().zip(g) {
                            *o += gv / tn;
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let dim = self.shape(v)[*axis];
                    let block = dim * inner;
                    acc(v, &mut |s| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            add_into(&mut s[o * block..(o + 1) * block], &g[src..src + block]);
                        }
                    });
                    offset += dim;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |s| add_into(s, g)),
            Op::Slice { x, axis, start } => {
                let (outer, dim, inner) = axis_split(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        let dst = o * dim * inner + start * inner;
                        let src = o * len * inner;
                        add_into(&mut s[dst..dst + len * inner], &g[src..src + len * inner]);
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv1d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        groups: usize,
        g: &[F],
        acc: &mut GradSink<'_, F>,
    ) {
        let c_in = self.shape(x)[1];
        let (c_out, k, cig) = (self.shape(w)[0], self.shape(w)[1], self.shape(w)[2]);
        let cog = c_out / groups;
        let t_out = g.len() / c_out;
        let xd = self.data(x);
        let wd = self.data(w);
        if let Some(b) = b {
            acc(b, &mut |s| {
                for row in g.chunks_exact(c_out) {
                    add_into(s, row);
                }
            });
        }
        acc(x, &mut |s| {
            for t in 0..t_out {
                let base = t * stride;
                for o in 0..c_out {
                    let gv = g[t * c_out + o];
                    if groups == 1 {
                        axpy(
                            gv,
                            &wd[o * k * cig..(o + 1) * k * cig],
                            &mut s[base * c_in..(base + k) * c_in],
                        );
                    } else {
                        let grp = o / cog;
                        for kk in 0..k {
                            let xr = (base + kk) * c_in + grp * cig;
                            let wr = (o * k + kk) * cig;
                            axpy(gv, &wd[wr..wr + cig], &mut s[xr..xr + cig]);
                        }
                    }
                }
            }
        });
        acc(w, &mut |s| {
            for t in 0..t_out {
                let base = t * stride;
                for o in 0..c_out {
                    let gv = g[t * c_out + o];
                    if groups == 1 {
                        axpy(
                            gv,
                            &xd[base * c_in..(base + k) * c_in],
                            &mut s[o * k * cig..(o + 1) * k * cig],
                        );
                    } else {
                        let grp = o / cog;
                        for kk in 0..k {
                            let xr = (base + kk) * c_in + grp * cig;
                            let wr = (o * k + kk) * cig;
                            axpy(gv, &xd[xr..xr + cig], &mut s[wr..wr + cig]);
                        }
                    }
                }
            }
        });
    }
}

fn add_into<F: Element>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
