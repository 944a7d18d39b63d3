//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and the handles
//! of its operands. Operands always precede their consumers, so walking the
//! tape backwards from the loss visits nodes in reverse topological order.

use crate::error::{Error, Result};
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output extent `ceil(in / stride)`; zero padding split evenly, with the
    /// odd pixel on the trailing side.
    Same,
    /// No padding.
    Valid,
}

/// Resolved spatial geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn resolve(
        in_h: usize,
        in_w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        dilation: usize,
        padding: Padding,
    ) -> Result<Self> {
        if stride == 0 || dilation == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d: stride ({stride}) and dilation ({dilation}) must be >= 1"
            )));
        }
        let eff_h = dilation * (kh - 1) + 1;
        let eff_w = dilation * (kw - 1) + 1;
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Same => {
                if kh.is_multiple_of(2) || kw.is_multiple_of(2) {
                    return Err(Error::InvalidArgument(format!(
                        "conv2d: same padding needs odd kernel extents, got {kh}x{kw}"
                    )));
                }
                let oh = in_h.div_ceil(stride);
                let ow = in_w.div_ceil(stride);
                let ph = ((oh - 1) * stride + eff_h).saturating_sub(in_h);
                let pw = ((ow - 1) * stride + eff_w).saturating_sub(in_w);
                (oh, ow, ph / 2, pw / 2)
            }
            Padding::Valid => {
                if in_h < eff_h || in_w < eff_w {
                    return Err(Error::InvalidArgument(format!(
                        "conv2d: valid padding with effective kernel {eff_h}x{eff_w} \
                         larger than input {in_h}x{in_w}"
                    )));
                }
                ((in_h - eff_h) / stride + 1, (in_w - eff_w) / stride + 1, 0, 0)
            }
        };
        Ok(Self {
            kh,
            kw,
            stride,
            dilation,
            pad_top,
            pad_left,
            in_h,
            in_w,
            out_h,
            out_w,
        })
    }

    /// Input row read by output row `oy` at kernel row `ky`, if inside the image.
    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let y = (oy * self.stride + ky * self.dilation) as isize - self.pad_top as isize;
        (y >= 0 && (y as usize) < self.in_h).then_some(y as usize)
    }

    #[inline]
    fn in_col(&self, ox: usize, kx: usize) -> Option<usize> {
        let x = (ox * self.stride + kx * self.dilation) as isize - self.pad_left as isize;
        (x >= 0 && (x as usize) < self.in_w).then_some(x as usize)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Pow(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Clamp(Var, f64, f64),
    Reshape(Var),
    ReduceSum { x: Var, axis: usize },
    ReduceMean { x: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    Softmax(Var),
    Upsample2x(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Depthwise {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    /// Per-channel normalization over all leading axes with batch statistics.
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Per-channel affine with fixed statistics (batch norm in inference mode).
    FrozenNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Normalization over the last axis at every position.
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm, for running
/// average updates by the caller.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    conv_macs: u64,
}

/// Gradients of a scalar loss with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn mismatch(op: &'static str, expected: &[usize], got: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
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

    /// Multiply-accumulates spent in dense and depthwise convolutions so far.
    pub fn conv_macs(&self) -> u64 {
        self.conv_macs
    }

    /// Which piece of each piecewise-linear op (relu, leaky relu, clamp)
    /// every input element falls on. Two evaluations with equal patterns lie
    /// on the same differentiable piece.
    pub fn kink_pattern(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(x) => out.extend(self.value(x).data().iter().map(|&v| u8::from(v > 0.0))),
                Op::LeakyRelu(x, _) => out.extend(self.value(x).data().iter().map(|&v| u8::from(v >= 0.0))),
                Op::Clamp(x, lo, hi) => out.extend(self.value(x).data().iter().map(|&v| {
                    if v < lo {
                        0
                    } else if v > hi {
                        2
                    } else {
                        1
                    }
                })),
                _ => {}
            }
        }
        out
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    // ---- elementwise -------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            ta.zip_map(tb, f)?
        } else {
            let shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
                Error::NotBroadcastable {
                    op: name,
                    a: ta.shape().to_vec(),
                    b: tb.shape().to_vec(),
                }
            })?;
            let sa = broadcast_strides(ta.shape(), &shape);
            let sb = broadcast_strides(tb.shape(), &shape);
            let mut out = Tensor::zeros(&shape);
            let (da, db) = (ta.data(), tb.data());
            let od = out.data_mut();
            for_each_broadcast(&shape, &sa, &sb, |o, ia, ib| od[o] = f(da[ia], db[ib]));
            out
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn powf(&mut self, x: Var, e: f64) -> Var {
        self.unary(x, |v| v.powf(e), Op::Pow(x, e))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(
            x,
            |v| if v >= 0.0 { v } else { slope * v },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    // ---- shape and reductions ----------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    fn reduce_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(Tensor, usize)> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::AxisOutOfRange {
                op,
                axis,
                rank: t.rank(),
            });
        }
        let shape = t.shape();
        let (outer, n, inner) = split_axis(shape, axis);
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let mut out = vec![0.0; outer * inner];
        let d = t.data();
        for o in 0..outer {
            for k in 0..n {
                let src = &d[(o * n + k) * inner..][..inner];
                for (acc, v) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        Ok((Tensor::new(&out_shape, out)?, n))
    }

    pub fn reduce_sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (value, _) = self.reduce_axis("reduce_sum", x, axis)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::ReduceSum { x, axis }, rg))
    }

    /// Mean over `axis`; the axis is removed from the result.
    pub fn reduce_mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (value, n) = self.reduce_axis("reduce_mean", x, axis)?;
        let value = value.map(|v| v / n as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::ReduceMean { x, axis }, rg))
    }

    /// Mean over `axis` that sums each fibre in ascending order, so the
    /// result is bit-identical under any permutation along the axis.
    pub fn symmetric_mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::AxisOutOfRange {
                op: "symmetric_mean",
                axis,
                rank: t.rank(),
            });
        }
        let shape = t.shape();
        let (outer, n, inner) = split_axis(shape, axis);
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let d = t.data();
        let mut fibre = vec![0.0; n];
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                for (k, v) in fibre.iter_mut().enumerate() {
                    *v = d[(o * n + k) * inner + i];
                }
                fibre.sort_by(f64::total_cmp);
                out.push(fibre.iter().sum::<f64>() / n as f64);
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::ReduceMean { x, axis }, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(&[x]);
        self.push(value, Op::MeanAll(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = *t.shape().last().unwrap_or(&1);
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Nearest-neighbour 2x upsampling of a `B×H×W×C` tensor.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [b, h, w, c] = rank4("upsample2x", t.shape())?;
        let src = t.data();
        let mut out = vec![0.0; b * 4 * h * w * c];
        for n in 0..b {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let s = ((n * h + y / 2) * w + xx / 2) * c;
                    let o = ((n * 2 * h + y) * 2 * w + xx) * c;
                    out[o..o + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
        let value = Tensor::new(&[b, 2 * h, 2 * w, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Upsample2x(x), rg))
    }

    // ---- convolutions ------------------------------------------------

    /// Dense 2-D convolution. `input` is `B×H×W×Cin`, `kernel` is
    /// `kh×kw×Cin×Cout`, `bias` is `Cout`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        dilation: usize,
        padding: Padding,
    ) -> Result<Var> {
        let xs = rank4("conv2d", self.shape(input))?;
        let ks = self.shape(kernel);
        if ks.len() != 4 || ks[2] != xs[3] {
            return Err(mismatch(
                "conv2d kernel",
                &[ks.first().copied().unwrap_or(0), ks.get(1).copied().unwrap_or(0), xs[3], ks.get(3).copied().unwrap_or(0)],
                ks,
            ));
        }
        let (kh, kw, cin, cout) = (ks[0], ks[1], ks[2], ks[3]);
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(mismatch("conv2d bias", &[cout], self.shape(bv)));
            }
        }
        let geom = ConvGeometry::resolve(xs[1], xs[2], kh, kw, stride, dilation, padding)?;
        let [b, h, w, _] = xs;
        let (oh, ow) = (geom.out_h, geom.out_w);
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let bias_v = bias.map(|bv| self.value(bv).data());
        let mut out = vec![0.0; b * oh * ow * cout];
        for n in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = &mut out[((n * oh + oy) * ow + ox) * cout..][..cout];
                    if let Some(bv) = bias_v {
                        o.copy_from_slice(bv);
                    }
                    for ky in 0..kh {
                        let Some(iy) = geom.in_row(oy, ky) else { continue };
                        for kx in 0..kw {
                            let Some(ix) = geom.in_col(ox, kx) else { continue };
                            let xin = &x[((n * h + iy) * w + ix) * cin..][..cin];
                            let kt = &k[(ky * kw + kx) * cin * cout..][..cin * cout];
                            for (&xv, krow) in xin.iter().zip(kt.chunks_exact(cout)) {
                                for (ov, &kv) in o.iter_mut().zip(krow) {
                                    *ov += xv * kv;
                                }
                            }
                        }
                    }
                }
            }
        }
        self.conv_macs += (b * oh * ow * kh * kw * cin * cout) as u64;
        let value = Tensor::new(&[b, oh, ow, cout], out)?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                x: input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Per-channel (depthwise) convolution with stride 1 and same padding.
    /// `kernel` is `kh×kw×C`, `bias` is `C`.
    pub fn depthwise_conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let xs = rank4("depthwise_conv2d", self.shape(input))?;
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 3 || ks[2] != xs[3] {
            return Err(mismatch("depthwise_conv2d kernel", &[3, 3, xs[3]], &ks));
        }
        let c = xs[3];
        if let Some(bv) = bias {
            if self.shape(bv) != [c] {
                return Err(mismatch("depthwise_conv2d bias", &[c], self.shape(bv)));
            }
        }
        let geom = ConvGeometry::resolve(xs[1], xs[2], ks[0], ks[1], 1, 1, Padding::Same)?;
        let [b, h, w, _] = xs;
        let (kh, kw) = (ks[0], ks[1]);
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let bias_v = bias.map(|bv| self.value(bv).data());
        let mut out = vec![0.0; b * h * w * c];
        for n in 0..b {
            for oy in 0..h {
                for ox in 0..w {
                    let o = &mut out[((n * h + oy) * w + ox) * c..][..c];
                    if let Some(bv) = bias_v {
                        o.copy_from_slice(bv);
                    }
                    for ky in 0..kh {
                        let Some(iy) = geom.in_row(oy, ky) else { continue };
                        for kx in 0..kw {
                            let Some(ix) = geom.in_col(ox, kx) else { continue };
                            let xin = &x[((n * h + iy) * w + ix) * c..][..c];
                            let kt = &k[(ky * kw + kx) * c..][..c];
                            for ((ov, &xv), &kv) in o.iter_mut().zip(xin).zip(kt) {
                                *ov += xv * kv;
                            }
                        }
                    }
                }
            }
        }
        self.conv_macs += (b * h * w * kh * kw * c) as u64;
        let value = Tensor::new(&[b, h, w, c], out)?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            value,
            Op::Depthwise {
                x: input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    // ---- normalization -----------------------------------------------

    fn check_affine(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let c = *self.shape(x).last().unwrap_or(&1);
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(mismatch(op, &[c], self.shape(p)));
            }
        }
        Ok(c)
    }

    /// Training-mode batch normalization over every axis but the last.
    /// Returns the normalized tensor and the batch statistics used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let c = self.check_affine("batch_norm", x, gamma, beta)?;
        let t = self.value(x);
        let count = (t.len() / c) as f64;
        let mut mean = vec![0.0; c];
        for row in t.data().chunks_exact(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; c];
        for row in t.data().chunks_exact(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= count);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (value, xhat) = self.normalize_channels(x, gamma, beta, &mean, &inv_std);
        let rg = self.rg(&[x, gamma, beta]);
        let out = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((out, BatchStats { mean, var }))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn frozen_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let c = self.check_affine("frozen_norm", x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(mismatch("frozen_norm statistics", &[c], &[mean.len()]));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (value, xhat) = self.normalize_channels(x, gamma, beta, mean, &inv_std);
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::FrozenNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    fn normalize_channels(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
    ) -> (Tensor, Vec<f64>) {
        let t = self.value(x);
        let c = mean.len();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = t.data().to_vec();
        let mut out = t.clone();
        for (xr, or) in xhat.chunks_exact_mut(c).zip(out.data_mut().chunks_exact_mut(c)) {
            for i in 0..c {
                xr[i] = (xr[i] - mean[i]) * inv_std[i];
                or[i] = g[i] * xr[i] + be[i];
            }
        }
        (out, xhat)
    }

    /// Normalization over the last axis at every position, with per-channel
    /// affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = self.check_affine("layer_norm", x, gamma, beta)?;
        let t = self.value(x);
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let rows = t.len() / c;
        let mut xhat = t.data().to_vec();
        let mut inv_std = vec![0.0; rows];
        let mut out = t.clone();
        for (r, (xr, or)) in xhat
            .chunks_exact_mut(c)
            .zip(out.data_mut().chunks_exact_mut(c))
            .enumerate()
        {
            let m = xr.iter().sum::<f64>() / c as f64;
            let v = xr.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / c as f64;
            let is = 1.0 / (v + eps).sqrt();
            inv_std[r] = is;
            for i in 0..c {
                xr[i] = (xr[i] - m) * is;
                or[i] = g[i] * xr[i] + be[i];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ---- reverse pass ------------------------------------------------

    /// Propagates d`loss`/d(node) to every node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (v, contrib) in self.node_backward(i, &g) {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut out = Vec::new();
        let mut push = |v: Var, t: Tensor| {
            if self.wants(v) {
                out.push((v, t));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                push(*a, self.unbroadcast(g, *a, |gv, _, _| gv, *b));
                push(*b, self.unbroadcast_rhs(g, *a, *b, |gv, _, _| gv));
            }
            Op::Sub(a, b) => {
                push(*a, self.unbroadcast(g, *a, |gv, _, _| gv, *b));
                push(*b, self.unbroadcast_rhs(g, *a, *b, |gv, _, _| -gv));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    push(*a, self.unbroadcast(g, *a, |gv, _, bv| gv * bv, *b));
                }
                if self.wants(*b) {
                    push(*b, self.unbroadcast_rhs(g, *a, *b, |gv, av, _| gv * av));
                }
            }
            Op::Div(a, b) => {
                if self.wants(*a) {
                    push(*a, self.unbroadcast(g, *a, |gv, _, bv| gv / bv, *b));
                }
                if self.wants(*b) {
                    push(
                        *b,
                        self.unbroadcast_rhs(g, *a, *b, |gv, av, bv| -gv * av / (bv * bv)),
                    );
                }
            }
            Op::Neg(x) => push(*x, g.map(|v| -v)),
            Op::Scale(x, s) => push(*x, g.map(|v| v * s)),
            Op::AddScalar(x) | Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                push(*x, g.reshape(&shape).expect("same element count"));
            }
            Op::Exp(x) => push(*x, g.zip_map(y, |gv, yv| gv * yv).unwrap()),
            Op::Log(x) => push(*x, g.zip_map(self.value(*x), |gv, xv| gv / xv).unwrap()),
            Op::Pow(x, e) => push(
                *x,
                g.zip_map(self.value(*x), |gv, xv| gv * e * xv.powf(e - 1.0))
                    .unwrap(),
            ),
            Op::Sigmoid(x) => push(*x, g.zip_map(y, |gv, s| gv * s * (1.0 - s)).unwrap()),
            Op::Relu(x) => push(
                *x,
                g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })
                    .unwrap(),
            ),
            Op::LeakyRelu(x, slope) => push(
                *x,
                g.zip_map(self.value(*x), |gv, xv| if xv >= 0.0 { gv } else { gv * slope })
                    .unwrap(),
            ),
            Op::Clamp(x, lo, hi) => push(
                *x,
                g.zip_map(self.value(*x), |gv, xv| {
                    if xv >= *lo && xv <= *hi {
                        gv
                    } else {
                        0.0
                    }
                })
                .unwrap(),
            ),
            Op::ReduceSum { x, axis } | Op::ReduceMean { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                let scale = if matches!(node.op, Op::ReduceMean { .. }) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                let mut gx = Tensor::zeros(&shape);
                let gd = g.data();
                for (chunk_i, chunk) in gx.data_mut().chunks_exact_mut(inner).enumerate() {
                    let o = chunk_i / n;
                    for (dst, src) in chunk.iter_mut().zip(&gd[o * inner..][..inner]) {
                        *dst = src * scale;
                    }
                }
                debug_assert_eq!(outer * n * inner, gx.len());
                push(*x, gx);
            }
            Op::SumAll(x) => push(*x, Tensor::full(self.shape(*x), g.item())),
            Op::MeanAll(x) => {
                let n = self.value(*x).len() as f64;
                push(*x, Tensor::full(self.shape(*x), g.item() / n));
            }
            Op::Softmax(x) => {
                let c = *y.shape().last().unwrap_or(&1);
                let mut gx = g.clone();
                for (gr, yr) in gx.data_mut().chunks_exact_mut(c).zip(y.data().chunks_exact(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (gv, yv) in gr.iter_mut().zip(yr) {
                        *gv = yv * (*gv - dot);
                    }
                }
                push(*x, gx);
            }
            Op::Upsample2x(x) => {
                let shape = self.shape(*x).to_vec();
                let [b, h, w, c] = [shape[0], shape[1], shape[2], shape[3]];
                let mut gx = Tensor::zeros(&shape);
                let gd = g.data();
                let dst = gx.data_mut();
                for n in 0..b {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            let s = ((n * 2 * h + yy) * 2 * w + xx) * c;
                            let d = ((n * h + yy / 2) * w + xx / 2) * c;
                            for k in 0..c {
                                dst[d + k] += gd[s + k];
                            }
                        }
                    }
                }
                push(*x, gx);
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
            } => {
                let (gx, gk) = self.conv2d_backward(*x, *kernel, geom, g);
                if let Some(gx) = gx {
                    push(*x, gx);
                }
                if let Some(gk) = gk {
                    push(*kernel, gk);
                }
                if let Some(bv) = bias {
                    if self.wants(*bv) {
                        push(*bv, sum_to_channels(g));
                    }
                }
            }
            Op::Depthwise {
                x,
                kernel,
                bias,
                geom,
            } => {
                let (gx, gk) = self.depthwise_backward(*x, *kernel, geom, g);
                if let Some(gx) = gx {
                    push(*x, gx);
                }
                if let Some(gk) = gk {
                    push(*kernel, gk);
                }
                if let Some(bv) = bias {
                    if self.wants(*bv) {
                        push(*bv, sum_to_channels(g));
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let gam = self.value(*gamma).data();
                let (sum_g, sum_gx) = channel_sums(g.data(), xhat, c);
                if self.wants(*x) {
                    let count = (xhat.len() / c) as f64;
                    let mut gx = g.clone();
                    for (gr, xr) in gx.data_mut().chunks_exact_mut(c).zip(xhat.chunks_exact(c)) {
                        for k in 0..c {
                            gr[k] = gam[k] * inv_std[k] / count
                                * (count * gr[k] - sum_g[k] - xr[k] * sum_gx[k]);
                        }
                    }
                    push(*x, gx);
                }
                push(*gamma, Tensor::new(&[c], sum_gx).unwrap());
                push(*beta, Tensor::new(&[c], sum_g).unwrap());
            }
            Op::FrozenNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let gam = self.value(*gamma).data();
                let (sum_g, sum_gx) = channel_sums(g.data(), xhat, c);
                if self.wants(*x) {
                    let mut gx = g.clone();
                    for gr in gx.data_mut().chunks_exact_mut(c) {
                        for k in 0..c {
                            gr[k] *= gam[k] * inv_std[k];
                        }
                    }
                    push(*x, gx);
                }
                push(*gamma, Tensor::new(&[c], sum_gx).unwrap());
                push(*beta, Tensor::new(&[c], sum_g).unwrap());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = self.value(*gamma).len();
                let gam = self.value(*gamma).data();
                let (sum_g, sum_gx) = channel_sums(g.data(), xhat, c);
                if self.wants(*x) {
                    let mut gx = g.clone();
                    let cf = c as f64;
                    for ((gr, xr), is) in gx
                        .data_mut()
                        .chunks_exact_mut(c)
                        .zip(xhat.chunks_exact(c))
                        .zip(inv_std)
                    {
                        let mut dh = vec![0.0; c];
                        for k in 0..c {
                            dh[k] = gr[k] * gam[k];
                        }
                        let m1 = dh.iter().sum::<f64>() / cf;
                        let m2 = dh.iter().zip(xr.iter()).map(|(a, b)| a * b).sum::<f64>() / cf;
                        for k in 0..c {
                            gr[k] = is * (dh[k] - m1 - xr[k] * m2);
                        }
                    }
                    push(*x, gx);
                }
                push(*gamma, Tensor::new(&[c], sum_gx).unwrap());
                push(*beta, Tensor::new(&[c], sum_g).unwrap());
            }
        }
        out
    }

    /// Gradient for the left operand of a broadcast binary op. `f` receives
    /// (upstream, a value, b value).
    fn unbroadcast(&self, g: &Tensor, a: Var, f: impl Fn(f64, f64, f64) -> f64, b: Var) -> Tensor {
        self.unbroadcast_to(g, a, b, true, f)
    }

    fn unbroadcast_rhs(&self, g: &Tensor, a: Var, b: Var, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        self.unbroadcast_to(g, a, b, false, f)
    }

    fn unbroadcast_to(
        &self,
        g: &Tensor,
        a: Var,
        b: Var,
        to_lhs: bool,
        f: impl Fn(f64, f64, f64) -> f64,
    ) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let target = if to_lhs { ta.shape() } else { tb.shape() };
        let mut out = Tensor::zeros(target);
        let (da, db, gd) = (ta.data(), tb.data(), g.data());
        if ta.shape() == tb.shape() {
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                *o = f(gd[i], da[i], db[i]);
            }
            return out;
        }
        let shape = g.shape();
        let sa = broadcast_strides(ta.shape(), shape);
        let sb = broadcast_strides(tb.shape(), shape);
        let od = out.data_mut();
        for_each_broadcast(shape, &sa, &sb, |o, ia, ib| {
            let v = f(gd[o], da[ia], db[ib]);
            od[if to_lhs { ia } else { ib }] += v;
        });
        out
    }

    fn conv2d_backward(
        &self,
        x: Var,
        kernel: Var,
        geom: &ConvGeometry,
        g: &Tensor,
    ) -> (Option<Tensor>, Option<Tensor>) {
        let (want_x, want_k) = (self.wants(x), self.wants(kernel));
        if !want_x && !want_k {
            return (None, None);
        }
        let xt = self.value(x);
        let kt = self.value(kernel);
        let [b, h, w, cin] = [xt.shape()[0], xt.shape()[1], xt.shape()[2], xt.shape()[3]];
        let ks = kt.shape();
        let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
        let (oh, ow) = (geom.out_h, geom.out_w);
        let xd = xt.data();
        let kd = kt.data();
        let gd = g.data();
        let mut gx = want_x.then(|| vec![0.0; xt.len()]);
        let mut gk = want_k.then(|| vec![0.0; kt.len()]);
        for n in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = &gd[((n * oh + oy) * ow + ox) * cout..][..cout];
                    for ky in 0..kh {
                        let Some(iy) = geom.in_row(oy, ky) else { continue };
                        for kx in 0..kw {
                            let Some(ix) = geom.in_col(ox, kx) else { continue };
                            let xo = ((n * h + iy) * w + ix) * cin;
                            let ko = (ky * kw + kx) * cin * cout;
                            if let Some(gx) = gx.as_mut() {
                                let gxs = &mut gx[xo..xo + cin];
                                for (gv, krow) in gxs.iter_mut().zip(kd[ko..ko + cin * cout].chunks_exact(cout)) {
                                    *gv += krow.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                                }
                            }
                            if let Some(gk) = gk.as_mut() {
                                let xin = &xd[xo..xo + cin];
                                for (&xv, gkrow) in xin.iter().zip(gk[ko..ko + cin * cout].chunks_exact_mut(cout)) {
                                    for (a, &b) in gkrow.iter_mut().zip(go) {
                                        *a += xv * b;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (
            gx.map(|d| Tensor::new(xt.shape(), d).unwrap()),
            gk.map(|d| Tensor::new(kt.shape(), d).unwrap()),
        )
    }

    fn depthwise_backward(
        &self,
        x: Var,
        kernel: Var,
        geom: &ConvGeometry,
        g: &Tensor,
    ) -> (Option<Tensor>, Option<Tensor>) {
        let (want_x, want_k) = (self.wants(x), self.wants(kernel));
        if !want_x && !want_k {
            return (None, None);
        }
        let xt = self.value(x);
        let kt = self.value(kernel);
        let [b, h, w, c] = [xt.shape()[0], xt.shape()[1], xt.shape()[2], xt.shape()[3]];
        let (kh, kw) = (kt.shape()[0], kt.shape()[1]);
        let xd = xt.data();
        let kd = kt.data();
        let gd = g.data();
        let mut gx = want_x.then(|| vec![0.0; xt.len()]);
        let mut gk = want_k.then(|| vec![0.0; kt.len()]);
        for n in 0..b {
            for oy in 0..h {
                for ox in 0..w {
                    let go = &gd[((n * h + oy) * w + ox) * c..][..c];
                    for ky in 0..kh {
                        let Some(iy) = geom.in_row(oy, ky) else { continue };
                        for kx in 0..kw {
                            let Some(ix) = geom.in_col(ox, kx) else { continue };
                            let xo = ((n * h + iy) * w + ix) * c;
                            let ko = (ky * kw + kx) * c;
                            if let Some(gx) = gx.as_mut() {
                                for k in 0..c {
                                    gx[xo + k] += go[k] * kd[ko + k];
                                }
                            }
                            if let Some(gk) = gk.as_mut() {
                                for k in 0..c {
                                    gk[ko + k] += go[k] * xd[xo + k];
                                }
                            }
                        }
                    }
                }
            }
        }
        (
            gx.map(|d| Tensor::new(xt.shape(), d).unwrap()),
            gk.map(|d| Tensor::new(kt.shape(), d).unwrap()),
        )
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn rank4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[b, h, w, c] => Ok([b, h, w, c]),
        other => Err(Error::ShapeMismatch {
            op,
            expected: vec![0, 0, 0, 0],
            got: other.to_vec(),
        }),
    }
}

fn sum_to_channels(g: &Tensor) -> Tensor {
    let c = *g.shape().last().unwrap();
    let mut s = vec![0.0; c];
    for row in g.data().chunks_exact(c) {
        for (a, b) in s.iter_mut().zip(row) {
            *a += b;
        }
    }
    Tensor::new(&[c], s).unwrap()
}

fn channel_sums(g: &[f64], xhat: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sg = vec![0.0; c];
    let mut sgx = vec![0.0; c];
    for (gr, xr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for k in 0..c {
            sg[k] += gr[k];
            sgx[k] += gr[k] * xr[k];
        }
    }
    (sg, sgx)
}
