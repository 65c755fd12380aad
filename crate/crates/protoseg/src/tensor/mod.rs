//! Minimal dense-tensor arithmetic with reverse-mode automatic differentiation.
//!
//! The engine is define-by-run: every forward op appends a node to a [`Tape`],
//! and [`Tape::backward`] replays the nodes in reverse to accumulate adjoints.
//! A tape and its tensors belong to one worker at a time; parallelism happens
//! across independent episodes, each with its own tape.
//!
//! All arithmetic is generic over [`Scalar`] so the same graph code runs in
//! f32 for training and in f64 for finite-difference gradient checking.

mod gradcheck;

pub use gradcheck::{grad_check, grad_check_sampled};

use crate::error::{Error, Result};
use num_traits::{Float, FromPrimitive};

/// Element type the engine is generic over (f32 for training, f64 for checks).
pub trait Scalar:
    Float + FromPrimitive + Send + Sync + std::fmt::Debug + std::iter::Sum + 'static
{
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }
    fn to_f64_c(self) -> f64;
}

impl Scalar for f32 {
    fn to_f64_c(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn to_f64_c(self) -> f64 {
        self
    }
}

/// Dense row-major tensor value (no autodiff state).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> TensorData<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(TensorData { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        TensorData {
            shape,
            data: vec![F::zero(); numel],
        }
    }

    pub fn filled(shape: Vec<usize>, v: F) -> Self {
        let numel = shape.iter().product();
        TensorData {
            shape,
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: F) -> Self {
        TensorData {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> F {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map_into<G: Scalar>(&self) -> TensorData<G> {
        TensorData {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| G::from_f64_c(v.to_f64_c()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Matmul(Var, Var),
    Transpose(Var),
    /// Softmax over the last axis.
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: F,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        dilation: usize,
    },
    /// Bilinear resize (align-corners false) to this node's spatial shape.
    Resize(Var),
    /// Adaptive average pooling to this node's spatial shape.
    AvgPool(Var),
    ConcatAxis0(Vec<Var>),
    ConcatCols(Vec<Var>),
    NarrowCols {
        x: Var,
        start: usize,
        len: usize,
    },
    Reshape(Var),
    SumAll(Var),
    /// [C,h,w] -> [C], sum over the spatial axes.
    SumSpatial(Var),
    /// [C] -> [C,h,w].
    BroadcastChan(Var),
    /// [1,h,w] -> [C,h,w].
    BroadcastSpat(Var),
    /// x: [n,c] plus bias [c] added to every row.
    AddRowBias {
        x: Var,
        bias: Var,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: TensorData<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    op: Op<F>,
}

/// Define-by-run tape; rebuilt each forward pass.
#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: TensorData<F>, requires_grad: bool, op: Op<F>) -> Var {
        debug_assert!(value.all_finite(), "non-finite forward value");
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a leaf tensor. Gradients are tracked when `requires_grad`.
    pub fn leaf(&mut self, value: TensorData<F>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Registers a constant (detached) leaf.
    pub fn constant(&mut self, value: TensorData<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &TensorData<F> {
        &self.nodes[v.0].value
    }

    /// Gradient buffer of a node after `backward`, if any was accumulated.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise division. Callers must keep the denominator bounded away
    /// from zero (the pipeline always adds an epsilon first).
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let data = va
            .data
            .iter()
            .zip(vb.data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = TensorData {
            shape: va.shape.clone(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, op))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value = TensorData {
            shape: self.value(a).shape.clone(),
            data: self.value(a).data.iter().map(|&x| x * c).collect(),
        };
        let rg = self.rg(a);
        self.push(value, rg, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let value = TensorData {
            shape: self.value(a).shape.clone(),
            data: self.value(a).data.iter().map(|&x| x + c).collect(),
        };
        let rg = self.rg(a);
        self.push(value, rg, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = TensorData {
            shape: self.value(a).shape.clone(),
            data: self
                .value(a)
                .data
                .iter()
                .map(|&x| if x > F::zero() { x } else { F::zero() })
                .collect(),
        };
        let rg = self.rg(a);
        self.push(value, rg, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = F::one();
        let value = TensorData {
            shape: self.value(a).shape.clone(),
            data: self
                .value(a)
                .data
                .iter()
                .map(|&x| one / (one + (-x).exp()))
                .collect(),
        };
        let rg = self.rg(a);
        self.push(value, rg, Op::Sigmoid(a))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape.len() != 2 || vb.shape.len() != 2 || va.shape[1] != vb.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
        let mut out = vec![F::zero(); m * n];
        matmul_into(&va.data, &vb.data, &mut out, m, k, n);
        let value = TensorData {
            shape: vec![m, n],
            data: out,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.shape.len() != 2 {
            return Err(Error::contract(format!(
                "transpose expects a matrix, got {:?}",
                va.shape
            )));
        }
        let (m, n) = (va.shape[0], va.shape[1]);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = va.data[i * n + j];
            }
        }
        let value = TensorData {
            shape: vec![n, m],
            data: out,
        };
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::Transpose(a)))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vx.shape.len() != 2 || vb.shape.len() != 1 || vx.shape[1] != vb.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                lhs: vx.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let (n, c) = (vx.shape[0], vx.shape[1]);
        let mut out = vx.data.clone();
        for i in 0..n {
            for j in 0..c {
                out[i * c + j] = out[i * c + j] + vb.data[j];
            }
        }
        let value = TensorData {
            shape: vec![n, c],
            data: out,
        };
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, rg, Op::AddRowBias { x, bias }))
    }

    // ---- normalizations ----

    /// Softmax along the last axis, computed with max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let cols = *va.shape.last().unwrap_or(&1).max(&1);
        let mut out = va.data.clone();
        for row in out.chunks_mut(cols) {
            let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let value = TensorData {
            shape: va.shape.clone(),
            data: out,
        };
        let rg = self.rg(a);
        self.push(value, rg, Op::Softmax(a))
    }

    /// Layer normalization over the last axis with affine (gamma, beta).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = *vx.shape.last().ok_or_else(|| {
            Error::contract("layer_norm expects a tensor with at least one axis".to_string())
        })?;
        if vg.shape != [c] || vb.shape != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: vx.shape.clone(),
                rhs: vg.shape.clone(),
            });
        }
        let mut out = vx.data.clone();
        let cn = F::from_f64_c(c as f64);
        for row in out.chunks_mut(c) {
            let mean = row.iter().cloned().sum::<F>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cn;
            let inv = (var + eps).sqrt().recip();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * vg.data[j] + vb.data[j];
            }
        }
        let value = TensorData {
            shape: vx.shape.clone(),
            data: out,
        };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(value, rg, Op::LayerNorm { x, gamma, beta, eps }))
    }

    // ---- convolution ----

    /// 2-D cross-correlation with bias. Padding keeps the spatial size at
    /// stride 1 (`dilation * (k-1) / 2` per axis); odd kernel extents only.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        dilation: usize,
    ) -> Result<Var> {
        let (vx, vk, vb) = (self.value(x), self.value(kernel), self.value(bias));
        if vx.shape.len() != 3 || vk.shape.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: vx.shape.clone(),
                rhs: vk.shape.clone(),
            });
        }
        let (ci, h, w) = (vx.shape[0], vx.shape[1], vx.shape[2]);
        let (co, kci, kh, kw) = (vk.shape[0], vk.shape[1], vk.shape[2], vk.shape[3]);
        if ci != kci || vb.shape != [co] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: vx.shape.clone(),
                rhs: vk.shape.clone(),
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::contract(format!(
                "conv2d kernel extents must be odd, got {}x{}",
                kh, kw
            )));
        }
        let (ph, pw) = (dilation * (kh - 1) / 2, dilation * (kw - 1) / 2);
        let oh = (h + 2 * ph - dilation * (kh - 1) - 1) / stride + 1;
        let ow = (w + 2 * pw - dilation * (kw - 1) - 1) / stride + 1;
        let mut out = vec![F::zero(); co * oh * ow];
        for c_out in 0..co {
            let b = vb.data[c_out];
            let plane = &mut out[c_out * oh * ow..(c_out + 1) * oh * ow];
            for v in plane.iter_mut() {
                *v = b;
            }
            for c_in in 0..ci {
                let xin = &vx.data[c_in * h * w..(c_in + 1) * h * w];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wgt = vk.data[((c_out * ci + c_in) * kh + ki) * kw + kj];
                        if wgt == F::zero() {
                            continue;
                        }
                        for oi in 0..oh {
                            let ih = (oi * stride + ki * dilation) as isize - ph as isize;
                            if ih < 0 || ih as usize >= h {
                                continue;
                            }
                            let xrow = &xin[ih as usize * w..(ih as usize + 1) * w];
                            let orow = &mut plane[oi * ow..(oi + 1) * ow];
                            for oj in 0..ow {
                                let iw = (oj * stride + kj * dilation) as isize - pw as isize;
                                if iw < 0 || iw as usize >= w {
                                    continue;
                                }
                                orow[oj] = orow[oj] + wgt * xrow[iw as usize];
                            }
                        }
                    }
                }
            }
        }
        let value = TensorData {
            shape: vec![co, oh, ow],
            data: out,
        };
        let rg = self.rg(x) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                x,
                kernel,
                bias,
                stride,
                dilation,
            },
        ))
    }

    // ---- resampling ----

    /// Bilinear resize of a [C,h,w] map, align-corners false.
    pub fn bilinear_resize(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let va = self.value(a);
        if va.shape.len() != 3 {
            return Err(Error::contract(format!(
                "bilinear_resize expects [C,h,w], got {:?}",
                va.shape
            )));
        }
        let (c, h, w) = (va.shape[0], va.shape[1], va.shape[2]);
        let mut out = vec![F::zero(); c * out_h * out_w];
        let plan_h = resize_plan(h, out_h);
        let plan_w = resize_plan(w, out_w);
        for ch in 0..c {
            let src = &va.data[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
            for (oi, &(i0, i1, fi)) in plan_h.iter().enumerate() {
                for (oj, &(j0, j1, fj)) in plan_w.iter().enumerate() {
                    let (fi, fj) = (F::from_f64_c(fi), F::from_f64_c(fj));
                    let one = F::one();
                    let v = src[i0 * w + j0] * (one - fi) * (one - fj)
                        + src[i0 * w + j1] * (one - fi) * fj
                        + src[i1 * w + j0] * fi * (one - fj)
                        + src[i1 * w + j1] * fi * fj;
                    dst[oi * out_w + oj] = v;
                }
            }
        }
        let value = TensorData {
            shape: vec![c, out_h, out_w],
            data: out,
        };
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::Resize(a)))
    }

    /// Adaptive average pooling of a [C,h,w] map to (out_h, out_w).
    pub fn avg_pool_to(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let va = self.value(a);
        if va.shape.len() != 3 {
            return Err(Error::contract(format!(
                "avg_pool_to expects [C,h,w], got {:?}",
                va.shape
            )));
        }
        let (c, h, w) = (va.shape[0], va.shape[1], va.shape[2]);
        let mut out = vec![F::zero(); c * out_h * out_w];
        for ch in 0..c {
            let src = &va.data[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
            for oi in 0..out_h {
                let (h0, h1) = pool_bin(oi, h, out_h);
                for oj in 0..out_w {
                    let (w0, w1) = pool_bin(oj, w, out_w);
                    let mut s = F::zero();
                    for i in h0..h1 {
                        for j in w0..w1 {
                            s = s + src[i * w + j];
                        }
                    }
                    let count = F::from_f64_c(((h1 - h0) * (w1 - w0)) as f64);
                    dst[oi * out_w + oj] = s / count;
                }
            }
        }
        let value = TensorData {
            shape: vec![c, out_h, out_w],
            data: out,
        };
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::AvgPool(a)))
    }

    // ---- structural ----

    /// Concatenation along the first axis; trailing axes must agree.
    pub fn concat_axis0(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors".to_string()));
        }
        let tail = self.value(parts[0]).shape[1..].to_vec();
        let mut dim0 = 0;
        for &p in parts {
            let vp = self.value(p);
            if vp.shape[1..] != tail[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_axis0",
                    lhs: self.value(parts[0]).shape.clone(),
                    rhs: vp.shape.clone(),
                });
            }
            dim0 += vp.shape[0];
        }
        let mut shape = vec![dim0];
        shape.extend_from_slice(&tail);
        let mut data = Vec::with_capacity(shape.iter().product());
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(TensorData { shape, data }, rg, Op::ConcatAxis0(parts.to_vec())))
    }

    /// Concatenation of [n, c_i] matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors".to_string()));
        }
        let n = self.value(parts[0]).shape[0];
        let mut cols = 0;
        for &p in parts {
            let vp = self.value(p);
            if vp.shape.len() != 2 || vp.shape[0] != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape.clone(),
                    rhs: vp.shape.clone(),
                });
            }
            cols += vp.shape[1];
        }
        let mut data = vec![F::zero(); n * cols];
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            let c = vp.shape[1];
            for i in 0..n {
                data[i * cols + off..i * cols + off + c]
                    .copy_from_slice(&vp.data[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            TensorData {
                shape: vec![n, cols],
                data,
            },
            rg,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Column slice [n, len] of a [n, c] matrix.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape.len() != 2 || start + len > vx.shape[1] {
            return Err(Error::contract(format!(
                "narrow_cols {}..{} out of {:?}",
                start,
                start + len,
                vx.shape
            )));
        }
        let (n, c) = (vx.shape[0], vx.shape[1]);
        let mut data = vec![F::zero(); n * len];
        for i in 0..n {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&vx.data[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            TensorData {
                shape: vec![n, len],
                data,
            },
            rg,
            Op::NarrowCols { x, start, len },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let vx = self.value(x);
        if shape.iter().product::<usize>() != vx.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: vx.shape.clone(),
                rhs: shape,
            });
        }
        let value = TensorData {
            shape,
            data: vx.data.clone(),
        };
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    // ---- reductions and broadcasts ----

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().cloned().sum::<F>();
        let rg = self.rg(x);
        self.push(TensorData::scalar(s), rg, Op::SumAll(x))
    }

    /// [C,h,w] -> [C] spatial sum.
    pub fn sum_spatial(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape.len() != 3 {
            return Err(Error::contract(format!(
                "sum_spatial expects [C,h,w], got {:?}",
                vx.shape
            )));
        }
        let (c, hw) = (vx.shape[0], vx.shape[1] * vx.shape[2]);
        let data: Vec<F> = (0..c)
            .map(|ch| vx.data[ch * hw..(ch + 1) * hw].iter().cloned().sum())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            TensorData {
                shape: vec![c],
                data,
            },
            rg,
            Op::SumSpatial(x),
        ))
    }

    /// [C] -> [C,h,w] spatial broadcast.
    pub fn broadcast_chan(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape.len() != 1 {
            return Err(Error::contract(format!(
                "broadcast_chan expects [C], got {:?}",
                vx.shape
            )));
        }
        let c = vx.shape[0];
        let mut data = vec![F::zero(); c * h * w];
        for ch in 0..c {
            let v = vx.data[ch];
            for d in data[ch * h * w..(ch + 1) * h * w].iter_mut() {
                *d = v;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            TensorData {
                shape: vec![c, h, w],
                data,
            },
            rg,
            Op::BroadcastChan(x),
        ))
    }

    /// [1,h,w] -> [C,h,w] channel broadcast.
    pub fn broadcast_spat(&mut self, x: Var, c: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape.len() != 3 || vx.shape[0] != 1 {
            return Err(Error::contract(format!(
                "broadcast_spat expects [1,h,w], got {:?}",
                vx.shape
            )));
        }
        let (h, w) = (vx.shape[1], vx.shape[2]);
        let mut data = vec![F::zero(); c * h * w];
        for ch in 0..c {
            data[ch * h * w..(ch + 1) * h * w].copy_from_slice(&vx.data);
        }
        let rg = self.rg(x);
        Ok(self.push(
            TensorData {
                shape: vec![c, h, w],
                data,
            },
            rg,
            Op::BroadcastSpat(x),
        ))
    }

    // ---- reverse pass ----

    /// Accumulates adjoints of every `requires_grad` node reachable from a
    /// scalar loss. Gradients add (+=) along all paths.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.ensure_grad(loss);
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = F::one();
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            self.step_backward(i);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, v: Var) {
        let n = &mut self.nodes[v.0];
        if n.grad.is_none() {
            n.grad = Some(vec![F::zero(); n.value.numel()]);
        }
    }

    fn add_grad(&mut self, v: Var, delta: &[F]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        self.ensure_grad(v);
        let g = self.nodes[v.0].grad.as_mut().unwrap();
        for (gi, &d) in g.iter_mut().zip(delta.iter()) {
            *gi = *gi + d;
        }
    }

    fn step_backward(&mut self, i: usize) {
        // Inputs always precede node i, so values below i are final.
        let g = self.nodes[i].grad.clone().unwrap();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.add_grad(a, &g);
                self.add_grad(b, &g);
            }
            &Op::Sub(a, b) => {
                self.add_grad(a, &g);
                let neg: Vec<F> = g.iter().map(|&v| -v).collect();
                self.add_grad(b, &neg);
            }
            &Op::Mul(a, b) => {
                let da: Vec<F> = g
                    .iter()
                    .zip(self.value(b).data.iter())
                    .map(|(&gi, &bi)| gi * bi)
                    .collect();
                let db: Vec<F> = g
                    .iter()
                    .zip(self.value(a).data.iter())
                    .map(|(&gi, &ai)| gi * ai)
                    .collect();
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            &Op::Div(a, b) => {
                let da: Vec<F> = g
                    .iter()
                    .zip(self.value(b).data.iter())
                    .map(|(&gi, &bi)| gi / bi)
                    .collect();
                let db: Vec<F> = g
                    .iter()
                    .zip(self.value(a).data.iter().zip(self.value(b).data.iter()))
                    .map(|(&gi, (&ai, &bi))| -gi * ai / (bi * bi))
                    .collect();
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            &Op::Scale(a, c) => {
                let da: Vec<F> = g.iter().map(|&v| v * c).collect();
                self.add_grad(a, &da);
            }
            &Op::AddScalar(a) => {
                self.add_grad(a, &g);
            }
            &Op::Relu(a) => {
                let da: Vec<F> = g
                    .iter()
                    .zip(self.value(a).data.iter())
                    .map(|(&gi, &xi)| if xi > F::zero() { gi } else { F::zero() })
                    .collect();
                self.add_grad(a, &da);
            }
            &Op::Sigmoid(a) => {
                // derivative from the input, not the stored output: once the
                // output rounds to exactly 0 or 1 (|x| ~ 17 in f32) the
                // textbook y*(1-y) underflows to an exact zero and saturated
                // units can never recover; exp(-|x|)/(1+exp(-|x|))^2 stays
                // nonzero far deeper into saturation
                let xs = &self.value(a).data;
                let da: Vec<F> = g
                    .iter()
                    .zip(xs.iter())
                    .map(|(&gi, &xi)| {
                        let e = (-xi.abs()).exp();
                        let d = F::one() + e;
                        gi * e / (d * d)
                    })
                    .collect();
                self.add_grad(a, &da);
            }
            &Op::Matmul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
                // dA = g . B^T  ; dB = A^T . g
                let mut da = vec![F::zero(); m * k];
                for i2 in 0..m {
                    for j in 0..n {
                        let gij = g[i2 * n + j];
                        if gij == F::zero() {
                            continue;
                        }
                        for l in 0..k {
                            da[i2 * k + l] = da[i2 * k + l] + gij * vb.data[l * n + j];
                        }
                    }
                }
                let mut db = vec![F::zero(); k * n];
                for i2 in 0..m {
                    for l in 0..k {
                        let ail = va.data[i2 * k + l];
                        if ail == F::zero() {
                            continue;
                        }
                        for j in 0..n {
                            db[l * n + j] = db[l * n + j] + ail * g[i2 * n + j];
                        }
                    }
                }
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            &Op::Transpose(a) => {
                let (n, m) = (self.nodes[i].value.shape[0], self.nodes[i].value.shape[1]);
                let mut da = vec![F::zero(); n * m];
                for r in 0..n {
                    for c in 0..m {
                        da[c * n + r] = g[r * m + c];
                    }
                }
                self.add_grad(a, &da);
            }
            &Op::Softmax(a) => {
                let y = self.nodes[i].value.clone();
                let cols = *y.shape.last().unwrap_or(&1).max(&1);
                let mut da = vec![F::zero(); y.numel()];
                for (row, (yrow, grow)) in y
                    .data
                    .chunks(cols)
                    .zip(g.chunks(cols))
                    .enumerate()
                {
                    let dot: F = yrow.iter().zip(grow.iter()).map(|(&yi, &gi)| yi * gi).sum();
                    for j in 0..cols {
                        da[row * cols + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.add_grad(a, &da);
            }
            &Op::LayerNorm { x, gamma, beta, eps } => {
                let vx = self.value(x).clone();
                let vg = self.value(gamma).clone();
                let c = *vx.shape.last().unwrap();
                let cn = F::from_f64_c(c as f64);
                let rows = vx.numel() / c;
                let mut dx = vec![F::zero(); vx.numel()];
                let mut dg = vec![F::zero(); c];
                let mut db = vec![F::zero(); c];
                for r in 0..rows {
                    let xr = &vx.data[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let mean = xr.iter().cloned().sum::<F>() / cn;
                    let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cn;
                    let inv = (var + eps).sqrt().recip();
                    let xhat: Vec<F> = xr.iter().map(|&v| (v - mean) * inv).collect();
                    let gy: Vec<F> = gr
                        .iter()
                        .zip(vg.data.iter())
                        .map(|(&gi, &gam)| gi * gam)
                        .collect();
                    let mean_gy = gy.iter().cloned().sum::<F>() / cn;
                    let mean_gy_xhat =
                        gy.iter().zip(xhat.iter()).map(|(&a, &b)| a * b).sum::<F>() / cn;
                    for j in 0..c {
                        dx[r * c + j] = (gy[j] - mean_gy - xhat[j] * mean_gy_xhat) * inv;
                        dg[j] = dg[j] + gr[j] * xhat[j];
                        db[j] = db[j] + gr[j];
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(gamma, &dg);
                self.add_grad(beta, &db);
            }
            &Op::Conv2d {
                x,
                kernel,
                bias,
                stride,
                dilation,
            } => {
                let vx = self.value(x).clone();
                let vk = self.value(kernel).clone();
                let (ci, h, w) = (vx.shape[0], vx.shape[1], vx.shape[2]);
                let (co, kh, kw) = (vk.shape[0], vk.shape[2], vk.shape[3]);
                let (oh, ow) = (self.nodes[i].value.shape[1], self.nodes[i].value.shape[2]);
                let (ph, pw) = (dilation * (kh - 1) / 2, dilation * (kw - 1) / 2);
                let mut dx = vec![F::zero(); vx.numel()];
                let mut dk = vec![F::zero(); vk.numel()];
                let mut db = vec![F::zero(); co];
                for c_out in 0..co {
                    let gplane = &g[c_out * oh * ow..(c_out + 1) * oh * ow];
                    db[c_out] = db[c_out] + gplane.iter().cloned().sum::<F>();
                    for c_in in 0..ci {
                        let xin = &vx.data[c_in * h * w..(c_in + 1) * h * w];
                        let dxin = &mut dx[c_in * h * w..(c_in + 1) * h * w];
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let kidx = ((c_out * ci + c_in) * kh + ki) * kw + kj;
                                let wgt = vk.data[kidx];
                                let mut wsum = F::zero();
                                for oi in 0..oh {
                                    let ih =
                                        (oi * stride + ki * dilation) as isize - ph as isize;
                                    if ih < 0 || ih as usize >= h {
                                        continue;
                                    }
                                    let ih = ih as usize;
                                    let grow = &gplane[oi * ow..(oi + 1) * ow];
                                    for oj in 0..ow {
                                        let iw = (oj * stride + kj * dilation) as isize
                                            - pw as isize;
                                        if iw < 0 || iw as usize >= w {
                                            continue;
                                        }
                                        let iw = iw as usize;
                                        wsum = wsum + grow[oj] * xin[ih * w + iw];
                                        dxin[ih * w + iw] =
                                            dxin[ih * w + iw] + wgt * grow[oj];
                                    }
                                }
                                dk[kidx] = dk[kidx] + wsum;
                            }
                        }
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(kernel, &dk);
                self.add_grad(bias, &db);
            }
            &Op::Resize(a) => {
                let va_shape = self.value(a).shape.clone();
                let (c, h, w) = (va_shape[0], va_shape[1], va_shape[2]);
                let (oh, ow) = (self.nodes[i].value.shape[1], self.nodes[i].value.shape[2]);
                let plan_h = resize_plan(h, oh);
                let plan_w = resize_plan(w, ow);
                let mut da = vec![F::zero(); c * h * w];
                for ch in 0..c {
                    let gsrc = &g[ch * oh * ow..(ch + 1) * oh * ow];
                    let dst = &mut da[ch * h * w..(ch + 1) * h * w];
                    for (oi, &(i0, i1, fi)) in plan_h.iter().enumerate() {
                        for (oj, &(j0, j1, fj)) in plan_w.iter().enumerate() {
                            let gv = gsrc[oi * ow + oj];
                            let (fi, fj) = (F::from_f64_c(fi), F::from_f64_c(fj));
                            let one = F::one();
                            dst[i0 * w + j0] = dst[i0 * w + j0] + gv * (one - fi) * (one - fj);
                            dst[i0 * w + j1] = dst[i0 * w + j1] + gv * (one - fi) * fj;
                            dst[i1 * w + j0] = dst[i1 * w + j0] + gv * fi * (one - fj);
                            dst[i1 * w + j1] = dst[i1 * w + j1] + gv * fi * fj;
                        }
                    }
                }
                self.add_grad(a, &da);
            }
            &Op::AvgPool(a) => {
                let va_shape = self.value(a).shape.clone();
                let (c, h, w) = (va_shape[0], va_shape[1], va_shape[2]);
                let (oh, ow) = (self.nodes[i].value.shape[1], self.nodes[i].value.shape[2]);
                let mut da = vec![F::zero(); c * h * w];
                for ch in 0..c {
                    let gsrc = &g[ch * oh * ow..(ch + 1) * oh * ow];
                    let dst = &mut da[ch * h * w..(ch + 1) * h * w];
                    for oi in 0..oh {
                        let (h0, h1) = pool_bin(oi, h, oh);
                        for oj in 0..ow {
                            let (w0, w1) = pool_bin(oj, w, ow);
                            let count = F::from_f64_c(((h1 - h0) * (w1 - w0)) as f64);
                            let gv = gsrc[oi * ow + oj] / count;
                            for ii in h0..h1 {
                                for jj in w0..w1 {
                                    dst[ii * w + jj] = dst[ii * w + jj] + gv;
                                }
                            }
                        }
                    }
                }
                self.add_grad(a, &da);
            }
            Op::ConcatAxis0(parts) => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let n = self.value(p).numel();
                    let slice = g[off..off + n].to_vec();
                    self.add_grad(p, &slice);
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let n = self.value(parts[0]).shape[0];
                let cols = self.nodes[i].value.shape[1];
                let mut off = 0;
                for p in parts {
                    let c = self.value(p).shape[1];
                    let mut dp = vec![F::zero(); n * c];
                    for r in 0..n {
                        dp[r * c..(r + 1) * c]
                            .copy_from_slice(&g[r * cols + off..r * cols + off + c]);
                    }
                    self.add_grad(p, &dp);
                    off += c;
                }
            }
            &Op::NarrowCols { x, start, len } => {
                let (n, c) = (self.value(x).shape[0], self.value(x).shape[1]);
                let mut dx = vec![F::zero(); n * c];
                for r in 0..n {
                    dx[r * c + start..r * c + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.add_grad(x, &dx);
            }
            &Op::Reshape(x) => {
                self.add_grad(x, &g);
            }
            &Op::SumAll(x) => {
                let gv = g[0];
                let dx = vec![gv; self.value(x).numel()];
                self.add_grad(x, &dx);
            }
            &Op::SumSpatial(x) => {
                let vx_shape = self.value(x).shape.clone();
                let (c, hw) = (vx_shape[0], vx_shape[1] * vx_shape[2]);
                let mut dx = vec![F::zero(); c * hw];
                for ch in 0..c {
                    let gv = g[ch];
                    for v in dx[ch * hw..(ch + 1) * hw].iter_mut() {
                        *v = gv;
                    }
                }
                self.add_grad(x, &dx);
            }
            &Op::BroadcastChan(x) => {
                let sh = &self.nodes[i].value.shape;
                let (c, hw) = (sh[0], sh[1] * sh[2]);
                let dx: Vec<F> = (0..c)
                    .map(|ch| g[ch * hw..(ch + 1) * hw].iter().cloned().sum())
                    .collect();
                self.add_grad(x, &dx);
            }
            &Op::BroadcastSpat(x) => {
                let sh = &self.nodes[i].value.shape;
                let (c, hw) = (sh[0], sh[1] * sh[2]);
                let mut dx = vec![F::zero(); hw];
                for ch in 0..c {
                    for (d, &gv) in dx.iter_mut().zip(g[ch * hw..(ch + 1) * hw].iter()) {
                        *d = *d + gv;
                    }
                }
                self.add_grad(x, &dx);
            }
            &Op::AddRowBias { x, bias } => {
                let (n, c) = (self.value(x).shape[0], self.value(x).shape[1]);
                self.add_grad(x, &g);
                let mut db = vec![F::zero(); c];
                for r in 0..n {
                    for j in 0..c {
                        db[j] = db[j] + g[r * c + j];
                    }
                }
                self.add_grad(bias, &db);
            }
        }
    }
}

fn matmul_into<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for l in 0..k {
            let ail = a[i * k + l];
            if ail == F::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + ail * brow[j];
            }
        }
    }
}

/// Per output index: (lo index, hi index, hi weight), align-corners false.
fn resize_plan(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let f = (src - i0 as f64).clamp(0.0, 1.0);
            (i0, i1, f)
        })
        .collect()
}

/// Adaptive-pool bin [start, end) for output cell `o`.
fn pool_bin(o: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let start = o * in_len / out_len;
    let end = ((o + 1) * in_len).div_ceil(out_len);
    (start, end.max(start + 1).min(in_len))
}
