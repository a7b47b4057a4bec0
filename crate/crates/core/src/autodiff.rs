//! A small reverse-mode differentiation tape over 2-D arrays.
//!
//! Every value is a `rows x cols` matrix. Feature maps are stored channel-major
//! (`channels x frames`), waveforms as `1 x samples`, and scalars as `1 x 1`.
//! The tape is rebuilt for every example; parameters are borrowed, not copied.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::objectives;

/// Scalar types the tape can run on. `f32` is used for training, `f64` for
/// gradient checks.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Float for f32 {
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

pub(crate) fn cst<T: Float>(v: f64) -> T {
    T::from_f64_lossy(v)
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddCol(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Prelu(Var, Var),
    Log1p(Var),
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<T>,
        inv_std: Vec<T>,
    },
    ChannelNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<T>,
        inv_std: Vec<T>,
    },
    Depthwise {
        x: Var,
        w: Var,
        stride: usize,
        dilation: usize,
        pad: usize,
    },
    Upsample(Var),
    Frame {
        x: Var,
        kernel: usize,
        stride: usize,
    },
    OverlapAdd {
        x: Var,
        stride: usize,
    },
    Concat(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    PadCols(Var),
    BroadcastCols(Var),
    MeanCols(Var),
    SiSnr {
        est: Var,
        grad: Vec<f64>,
    },
    WeightedSum(Vec<(Var, T)>),
    Dot {
        x: Var,
        weights: Array2<T>,
    },
    SoftmaxXent {
        logits: Var,
        probs: Vec<T>,
        label: usize,
    },
}

struct Node<T> {
    // `None` for parameters, whose values live in the borrowed slice.
    value: Option<Array2<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// The tape. Parameters are referenced by index into the borrowed slice.
pub struct Graph<'p, T: Float> {
    params: &'p [Array2<T>],
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Array2<T>>>,
    params: Vec<Option<Array2<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of a leaf variable (created with [`Graph::variable`]).
    pub fn wrt(&self, v: Var) -> Option<&Array2<T>> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, index: usize) -> Option<&Array2<T>> {
        self.params[index].as_ref()
    }

    /// Per-parameter gradients, zero-filled for parameters the tape never touched.
    pub fn into_param_grads(self, params: &[Array2<T>]) -> Vec<Array2<T>> {
        self.params
            .into_iter()
            .zip(params)
            .map(|(g, p)| g.unwrap_or_else(|| Array2::zeros(p.raw_dim())))
            .collect()
    }
}

fn accumulate<T: Float>(slot: &mut Option<Array2<T>>, contribution: Array2<T>) {
    match slot {
        Some(acc) => *acc += &contribution,
        None => *slot = Some(contribution),
    }
}

fn row_sums<T: Float>(a: &Array2<T>) -> Array2<T> {
    a.sum_axis(Axis(1)).insert_axis(Axis(1))
}

impl<'p, T: Float> Graph<'p, T> {
    pub fn new(params: &'p [Array2<T>]) -> Self {
        Self {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(val), _) => val.view(),
            (None, Op::Param(i)) => self.params[*i].view(),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[[0, 0]]
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, value: Array2<T>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Input,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is retained.
    pub fn variable(&mut self, value: Array2<T>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Input,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, index: usize) -> Var {
        if let Some(v) = self.param_vars[index] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(index),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[index] = Some(v);
        v
    }

    /// `w x` for `w: out x in`, `x: in x frames` (a pointwise convolution).
    pub fn matmul(&mut self, w: Var, x: Var) -> Var {
        let (wr, wc) = self.shape(w);
        let (xr, _) = self.shape(x);
        assert_eq!(wc, xr, "matmul: {wr}x{wc} by {xr}x?");
        let y = self.value(w).dot(&self.value(x));
        self.push(y, Op::MatMul(w, x), &[w, x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let y = &self.value(a) + &self.value(b);
        self.push(y, Op::Add(a, b), &[a, b])
    }

    /// Adds a `rows x 1` column to every column of `x`.
    pub fn add_col(&mut self, x: Var, b: Var) -> Var {
        assert_eq!(self.shape(b), (self.shape(x).0, 1), "add_col shape mismatch");
        let y = &self.value(x) + &self.value(b);
        self.push(y, Op::AddCol(x, b), &[x, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let y = &self.value(a) * &self.value(b);
        self.push(y, Op::Mul(a, b), &[a, b])
    }

    /// Scales every column of `x` elementwise by the `rows x 1` column `v`.
    pub fn mul_col(&mut self, x: Var, v: Var) -> Var {
        assert_eq!(self.shape(v), (self.shape(x).0, 1), "mul_col shape mismatch");
        let y = &self.value(x) * &self.value(v);
        self.push(y, Op::MulCol(x, v), &[x, v])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| if v > T::zero() { v } else { T::zero() });
        self.push(y, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| T::one() / (T::one() + (-v).exp()));
        self.push(y, Op::Sigmoid(x), &[x])
    }

    /// Parametric ReLU with one shared slope (`1 x 1`).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Var {
        let a = self.scalar(slope);
        let y = self.value(x).mapv(|v| if v > T::zero() { v } else { a * v });
        self.push(y, Op::Prelu(x, slope), &[x, slope])
    }

    pub fn log1p(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v.ln_1p());
        self.push(y, Op::Log1p(x), &[x])
    }

    /// Per-channel normalization over time with affine `rows x 1` gamma/beta.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let n = cst::<T>(cols as f64);
        let mut xhat = Array2::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, (row, mut out)) in xv
            .axis_iter(Axis(0))
            .zip(xhat.axis_iter_mut(Axis(0)))
            .enumerate()
        {
            let _ = r;
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + cst(eps)).sqrt();
            Zip::from(&mut out).and(&row).for_each(|o, &v| *o = (v - mean) * is);
            inv_std.push(is);
        }
        let y = &xhat * &self.value(gamma) + &self.value(beta);
        self.push(
            y,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Per-frame normalization across channels with affine `rows x 1` gamma/beta.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let n = cst::<T>(rows as f64);
        let mut mean = vec![T::zero(); cols];
        for row in xv.axis_iter(Axis(0)) {
            for (m, &v) in mean.iter_mut().zip(row.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / n);
        let mut var = vec![T::zero(); cols];
        for row in xv.axis_iter(Axis(0)) {
            for ((acc, &v), &m) in var.iter_mut().zip(row.iter()).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v / n + cst(eps)).sqrt())
            .collect();
        let mut xhat = Array2::zeros((rows, cols));
        for (row, mut out) in xv.axis_iter(Axis(0)).zip(xhat.axis_iter_mut(Axis(0))) {
            for (((o, &v), &m), &is) in out.iter_mut().zip(row.iter()).zip(&mean).zip(&inv_std) {
                *o = (v - m) * is;
            }
        }
        let y = &xhat * &self.value(gamma) + &self.value(beta);
        self.push(
            y,
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Depthwise 1-D convolution: each channel `c` of `x` is correlated with
    /// row `c` of `w` (`channels x kernel`), zero-padded by `pad` on both ends.
    pub fn depthwise_conv(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        dilation: usize,
        pad: usize,
    ) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (c, t) = xv.dim();
        let (wc, k) = wv.dim();
        assert_eq!(c, wc, "depthwise channel mismatch");
        let span = dilation * (k - 1) + 1;
        assert!(t + 2 * pad >= span, "depthwise input too short");
        let t_out = (t + 2 * pad - span) / stride + 1;
        let mut y = Array2::<T>::zeros((c, t_out));
        for ch in 0..c {
            let xr = xv.row(ch);
            let xs = xr.as_slice().expect("contiguous rows");
            let mut yr = y.row_mut(ch);
            let ys = yr.as_slice_mut().expect("contiguous rows");
            for j in 0..k {
                let wj = wv[[ch, j]];
                let offset = (j * dilation) as isize - pad as isize;
                let (lo, hi) = valid_range(offset, stride, t, t_out);
                for (to, yo) in ys.iter_mut().enumerate().take(hi).skip(lo) {
                    let ti = (to * stride) as isize + offset;
                    *yo += wj * xs[ti as usize];
                }
            }
        }
        self.push(
            y,
            Op::Depthwise {
                x,
                w,
                stride,
                dilation,
                pad,
            },
            &[x, w],
        )
    }

    /// Nearest-neighbour x2 upsampling along time, truncated to `out_len`.
    pub fn upsample(&mut self, x: Var, out_len: usize) -> Var {
        let xv = self.value(x);
        let (c, t) = xv.dim();
        assert!(out_len <= 2 * t, "upsample target too long");
        let y = Array2::from_shape_fn((c, out_len), |(r, i)| xv[[r, i / 2]]);
        self.push(y, Op::Upsample(x), &[x])
    }

    /// Unfolds `x` (`ch x T`) into frames: output row `ch * kernel + j`,
    /// column `f` holds `x[ch, f * stride + j]`.
    pub fn frame(&mut self, x: Var, kernel: usize, stride: usize) -> Var {
        let xv = self.value(x);
        let (c, t) = xv.dim();
        assert!(t >= kernel, "frame: input shorter than kernel");
        let frames = (t - kernel) / stride + 1;
        let mut y = Array2::<T>::zeros((c * kernel, frames));
        for ch in 0..c {
            for j in 0..kernel {
                let mut row = y.row_mut(ch * kernel + j);
                for (f, out) in row.iter_mut().enumerate() {
                    *out = xv[[ch, f * stride + j]];
                }
            }
        }
        self.push(y, Op::Frame { x, kernel, stride }, &[x])
    }

    /// Inverse of [`Graph::frame`] for one channel: sums column `f` of `x`
    /// (`kernel x frames`) into samples `f * stride ..`.
    pub fn overlap_add(&mut self, x: Var, stride: usize) -> Var {
        let xv = self.value(x);
        let (k, frames) = xv.dim();
        let len = (frames - 1) * stride + k;
        let mut y = Array2::<T>::zeros((1, len));
        for j in 0..k {
            for f in 0..frames {
                y[[0, f * stride + j]] += xv[[j, f]];
            }
        }
        self.push(y, Op::OverlapAdd { x, stride }, &[x])
    }

    /// Stacks inputs along the channel (row) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let y = ndarray::concatenate(Axis(0), &views).expect("concat: frame count mismatch");
        self.push(y, Op::Concat(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let y = self.value(x).slice(s![start..start + len, ..]).to_owned();
        self.push(y, Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let y = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(y, Op::SliceCols { x, start }, &[x])
    }

    /// Zero-pads columns at the end up to `total`.
    pub fn pad_cols(&mut self, x: Var, total: usize) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.dim();
        assert!(total >= c);
        let mut y = Array2::zeros((r, total));
        y.slice_mut(s![.., ..c]).assign(&xv);
        self.push(y, Op::PadCols(x), &[x])
    }

    /// Repeats a `rows x 1` column `cols` times.
    pub fn broadcast_cols(&mut self, x: Var, cols: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ncols(), 1);
        let y = xv
            .broadcast((xv.nrows(), cols))
            .expect("broadcast column")
            .to_owned();
        self.push(y, Op::BroadcastCols(x), &[x])
    }

    pub fn mean_cols(&mut self, x: Var) -> Var {
        let y = self
            .value(x)
            .mean_axis(Axis(1))
            .expect("non-empty")
            .insert_axis(Axis(1));
        self.push(y, Op::MeanCols(x), &[x])
    }

    /// SI-SNR (dB) of a `1 x T` estimate against a constant reference.
    pub fn si_snr(&mut self, est: Var, reference: &[f64]) -> crate::Result<Var> {
        let e: Vec<f64> = self.value(est).iter().map(|v| v.to_f64_lossy()).collect();
        let r = objectives::si_snr_with_grad(&e, reference)?;
        let y = Array2::from_elem((1, 1), cst(r.value));
        Ok(self.push(y, Op::SiSnr { est, grad: r.grad }, &[est]))
    }

    /// `sum_i w_i x_i` over `1 x 1` inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut acc = T::zero();
        for &(v, w) in terms {
            acc += w * self.scalar(v);
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(
            Array2::from_elem((1, 1), acc),
            Op::WeightedSum(terms.to_vec()),
            &inputs,
        )
    }

    /// `sum(x * weights)` with constant weights; handy for probing gradients.
    pub fn dot_const(&mut self, x: Var, weights: Array2<T>) -> Var {
        assert_eq!(self.value(x).dim(), weights.dim());
        let acc = Zip::from(&self.value(x))
            .and(&weights)
            .fold(T::zero(), |a, &p, &q| a + p * q);
        self.push(Array2::from_elem((1, 1), acc), Op::Dot { x, weights }, &[x])
    }

    /// Cross-entropy of a `classes x 1` logit column against `label`.
    pub fn softmax_xent(&mut self, logits: Var, label: usize) -> Var {
        let lv = self.value(logits);
        let max = lv.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let exps: Vec<T> = lv.iter().map(|&v| (v - max).exp()).collect();
        let z: T = exps.iter().copied().sum();
        let probs: Vec<T> = exps.iter().map(|&e| e / z).collect();
        let loss = -(probs[label].max(cst(1e-30))).ln();
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::SoftmaxXent {
                logits,
                probs,
                label,
            },
            &[logits],
        )
    }

    /// Reverse sweep from a `1 x 1` root.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<T>>> = (0..n).map(|_| None).collect();
        let mut param_grads: Vec<Option<Array2<T>>> = (0..self.params.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem((1, 1), T::one()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Input => continue,
                Op::Param(pi) => {
                    if let Some(g) = grads[i].take() {
                        param_grads[*pi] = Some(g);
                    }
                    continue;
                }
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(i, g, &mut grads);
        }
        Gradients {
            nodes: grads,
            params: param_grads,
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn send(&self, grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
        if self.wants(v) {
            accumulate(&mut grads[v.0], g);
        }
    }

    fn backprop_node(&self, i: usize, g: Array2<T>, grads: &mut [Option<Array2<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(w, x) => {
                if self.wants(*w) {
                    let gw = g.dot(&self.value(*x).t());
                    self.send(grads, *w, gw);
                }
                if self.wants(*x) {
                    let gx = self.value(*w).t().dot(&g);
                    self.send(grads, *x, gx);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    self.send(grads, *a, g.clone());
                }
                self.send(grads, *b, g);
            }
            Op::AddCol(x, b) => {
                if self.wants(*b) {
                    self.send(grads, *b, row_sums(&g));
                }
                self.send(grads, *x, g);
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.send(grads, *a, &g * &self.value(*b));
                }
                if self.wants(*b) {
                    self.send(grads, *b, &g * &self.value(*a));
                }
            }
            Op::MulCol(x, v) => {
                if self.wants(*v) {
                    self.send(grads, *v, row_sums(&(&g * &self.value(*x))));
                }
                if self.wants(*x) {
                    self.send(grads, *x, &g * &self.value(*v));
                }
            }
            Op::Relu(x) => {
                let mut gx = g;
                let y = node.value.as_ref().expect("value");
                Zip::from(&mut gx).and(y).for_each(|d, &yv| {
                    if yv <= T::zero() {
                        *d = T::zero();
                    }
                });
                self.send(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let mut gx = g;
                let y = node.value.as_ref().expect("value");
                Zip::from(&mut gx)
                    .and(y)
                    .for_each(|d, &yv| *d = *d * yv * (T::one() - yv));
                self.send(grads, *x, gx);
            }
            Op::Prelu(x, slope) => {
                let a = self.scalar(*slope);
                let xv = self.value(*x);
                if self.wants(*slope) {
                    let ga = Zip::from(&g).and(&xv).fold(T::zero(), |acc, &d, &v| {
                        if v > T::zero() {
                            acc
                        } else {
                            acc + d * v
                        }
                    });
                    self.send(grads, *slope, Array2::from_elem((1, 1), ga));
                }
                let mut gx = g;
                Zip::from(&mut gx).and(&xv).for_each(|d, &v| {
                    if v <= T::zero() {
                        *d *= a;
                    }
                });
                self.send(grads, *x, gx);
            }
            Op::Log1p(x) => {
                let mut gx = g;
                Zip::from(&mut gx)
                    .and(&self.value(*x))
                    .for_each(|d, &v| *d = *d / (T::one() + v));
                self.send(grads, *x, gx);
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.wants(*gamma) {
                    self.send(grads, *gamma, row_sums(&(&g * xhat)));
                }
                if self.wants(*beta) {
                    self.send(grads, *beta, row_sums(&g));
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma);
                    let mut dxhat = g;
                    dxhat *= &gam;
                    let n = cst::<T>(dxhat.ncols() as f64);
                    for ((mut d, xh), &is) in dxhat
                        .axis_iter_mut(Axis(0))
                        .zip(xhat.axis_iter(Axis(0)))
                        .zip(inv_std)
                    {
                        let sum_d = d.sum();
                        let sum_dx = Zip::from(&d).and(&xh).fold(T::zero(), |a, &p, &q| a + p * q);
                        Zip::from(&mut d).and(&xh).for_each(|dv, &xv| {
                            *dv = is / n * (n * *dv - sum_d - xv * sum_dx);
                        });
                    }
                    self.send(grads, *x, dxhat);
                }
            }
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.wants(*gamma) {
                    self.send(grads, *gamma, row_sums(&(&g * xhat)));
                }
                if self.wants(*beta) {
                    self.send(grads, *beta, row_sums(&g));
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma);
                    let mut dxhat = g;
                    dxhat *= &gam;
                    let (rows, cols) = dxhat.dim();
                    let n = cst::<T>(rows as f64);
                    let mut sum_d = vec![T::zero(); cols];
                    let mut sum_dx = vec![T::zero(); cols];
                    for (d, xh) in dxhat.axis_iter(Axis(0)).zip(xhat.axis_iter(Axis(0))) {
                        for (((sd, sdx), &dv), &xv) in
                            sum_d.iter_mut().zip(sum_dx.iter_mut()).zip(d.iter()).zip(xh.iter())
                        {
                            *sd += dv;
                            *sdx += dv * xv;
                        }
                    }
                    for (mut d, xh) in dxhat.axis_iter_mut(Axis(0)).zip(xhat.axis_iter(Axis(0))) {
                        for ((((dv, &xv), &sd), &sdx), &is) in d
                            .iter_mut()
                            .zip(xh.iter())
                            .zip(&sum_d)
                            .zip(&sum_dx)
                            .zip(inv_std)
                        {
                            *dv = is / n * (n * *dv - sd - xv * sdx);
                        }
                    }
                    self.send(grads, *x, dxhat);
                }
            }
            Op::Depthwise {
                x,
                w,
                stride,
                dilation,
                pad,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (c, t) = xv.dim();
                let k = wv.ncols();
                let t_out = g.ncols();
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                let mut gx = Array2::<T>::zeros(if want_x { (c, t) } else { (0, 0) });
                let mut gw = Array2::<T>::zeros(if want_w { (c, k) } else { (0, 0) });
                for ch in 0..c {
                    let gr = g.row(ch);
                    let gs = gr.as_slice().expect("contiguous");
                    let xr = xv.row(ch);
                    let xs = xr.as_slice().expect("contiguous");
                    for j in 0..k {
                        let offset = (j * dilation) as isize - *pad as isize;
                        let (lo, hi) = valid_range(offset, *stride, t, t_out);
                        if want_w {
                            let mut acc = T::zero();
                            for (to, &gv) in gs.iter().enumerate().take(hi).skip(lo) {
                                acc += gv * xs[((to * stride) as isize + offset) as usize];
                            }
                            gw[[ch, j]] += acc;
                        }
                        if want_x {
                            let wj = wv[[ch, j]];
                            let mut gxr = gx.row_mut(ch);
                            let gxs = gxr.as_slice_mut().expect("contiguous");
                            for (to, &gv) in gs.iter().enumerate().take(hi).skip(lo) {
                                gxs[((to * stride) as isize + offset) as usize] += wj * gv;
                            }
                        }
                    }
                }
                if want_x {
                    self.send(grads, *x, gx);
                }
                if want_w {
                    self.send(grads, *w, gw);
                }
            }
            Op::Upsample(x) => {
                let (c, t) = self.shape(*x);
                let mut gx = Array2::<T>::zeros((c, t));
                for r in 0..c {
                    for (i, &gv) in g.row(r).iter().enumerate() {
                        gx[[r, i / 2]] += gv;
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::Frame { x, kernel, stride } => {
                if self.wants(*x) {
                    let (c, t) = self.shape(*x);
                    let mut gx = Array2::<T>::zeros((c, t));
                    for ch in 0..c {
                        for j in 0..*kernel {
                            for (f, &gv) in g.row(ch * kernel + j).iter().enumerate() {
                                gx[[ch, f * stride + j]] += gv;
                            }
                        }
                    }
                    self.send(grads, *x, gx);
                }
            }
            Op::OverlapAdd { x, stride } => {
                let (k, frames) = self.shape(*x);
                let gx = Array2::from_shape_fn((k, frames), |(j, f)| g[[0, f * stride + j]]);
                self.send(grads, *x, gx);
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    if self.wants(p) {
                        self.send(grads, p, g.slice(s![start..start + rows, ..]).to_owned());
                    }
                    start += rows;
                }
            }
            Op::SliceRows { x, start } => {
                let mut gx = Array2::zeros(self.value(*x).raw_dim());
                gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                self.send(grads, *x, gx);
            }
            Op::SliceCols { x, start } => {
                let mut gx = Array2::zeros(self.value(*x).raw_dim());
                gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                self.send(grads, *x, gx);
            }
            Op::PadCols(x) => {
                let c = self.shape(*x).1;
                self.send(grads, *x, g.slice(s![.., ..c]).to_owned());
            }
            Op::BroadcastCols(x) => {
                self.send(grads, *x, row_sums(&g));
            }
            Op::MeanCols(x) => {
                let (r, c) = self.shape(*x);
                let scale = T::one() / cst(c as f64);
                let gx = Array2::from_shape_fn((r, c), |(i, _)| g[[i, 0]] * scale);
                self.send(grads, *x, gx);
            }
            Op::SiSnr { est, grad } => {
                let g0 = g[[0, 0]];
                let gx = Array2::from_shape_fn((1, grad.len()), |(_, i)| g0 * cst(grad[i]));
                self.send(grads, *est, gx);
            }
            Op::WeightedSum(terms) => {
                let g0 = g[[0, 0]];
                for &(v, w) in terms {
                    self.send(grads, v, Array2::from_elem((1, 1), g0 * w));
                }
            }
            Op::Dot { x, weights } => {
                self.send(grads, *x, weights * g[[0, 0]]);
            }
            Op::SoftmaxXent {
                logits,
                probs,
                label,
            } => {
                let g0 = g[[0, 0]];
                let gx = Array2::from_shape_fn((probs.len(), 1), |(i, _)| {
                    let target = if i == *label { T::one() } else { T::zero() };
                    g0 * (probs[i] - target)
                });
                self.send(grads, *logits, gx);
            }
        }
    }
}

/// Output positions `[lo, hi)` whose tap at `offset` lands inside `[0, t)`.
fn valid_range(offset: isize, stride: usize, t: usize, t_out: usize) -> (usize, usize) {
    let s = stride as isize;
    // smallest to with to*s + offset >= 0
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    // largest to with to*s + offset <= t-1
    let last = t as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let lo = (lo as usize).min(t_out);
    let hi = (hi as usize).min(t_out);
    (lo, hi.max(lo))
}
