//! Differentiable layer primitives: convolutions, normalizations, the
//! convolutional gated linear unit and the fuzzy membership module.

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::graph::{Padding, Var};
use crate::params::{Forward, ParamStore};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-3;
pub const BATCH_NORM_MOMENTUM: f64 = 0.99;
/// Lower bound for fuzzy membership widths, enforced after every update.
pub const SIGMA_MIN: f64 = 1e-3;

/// Something that owns named parameters and maps one activation to another.
pub trait Layer {
    fn init(&self, store: &mut ParamStore, rng: &mut dyn RngCore);
    fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var>;
}

/// He-uniform initialization: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut dyn RngCore) -> Tensor {
    let limit = (6.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(-limit..limit);
    }
    t
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, k: usize, cin: usize, cout: usize) -> Self {
        Self::rect(name, k, k, cin, cout)
    }

    pub fn rect(name: impl Into<String>, kh: usize, kw: usize, cin: usize, cout: usize) -> Self {
        Self {
            name: name.into(),
            kh,
            kw,
            cin,
            cout,
            stride: 1,
            dilation: 1,
        }
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn kernel_name(&self) -> String {
        format!("{}.kernel", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn param_count(&self) -> usize {
        self.kh * self.kw * self.cin * self.cout + self.cout
    }
}

impl Layer for Conv2d {
    fn init(&self, store: &mut ParamStore, rng: &mut dyn RngCore) {
        let shape = [self.kh, self.kw, self.cin, self.cout];
        store.insert(self.kernel_name(), he_uniform(&shape, self.kh * self.kw * self.cin, rng));
        store.insert(self.bias_name(), Tensor::zeros(&[self.cout]));
    }

    fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let k = f.param(&self.kernel_name())?;
        let b = f.param(&self.bias_name())?;
        f.graph
            .conv2d(x, k, Some(b), self.stride, self.dilation, Padding::Same)
    }
}

/// Per-channel 2-D convolution, stride 1, same padding.
#[derive(Clone, Debug)]
pub struct DepthwiseConv2d {
    pub name: String,
    pub k: usize,
    pub channels: usize,
}

impl Layer for DepthwiseConv2d {
    fn init(&self, store: &mut ParamStore, rng: &mut dyn RngCore) {
        let shape = [self.k, self.k, self.channels];
        store.insert(format!("{}.kernel", self.name), he_uniform(&shape, self.k * self.k, rng));
        store.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.channels]));
    }

    fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let k = f.param(&format!("{}.kernel", self.name))?;
        let b = f.param(&format!("{}.bias", self.name))?;
        f.graph.depthwise_conv2d(x, k, Some(b))
    }
}

/// Batch normalization over `B, H, W` per channel. Training mode normalizes
/// with batch statistics and reports them for the running averages;
/// inference mode uses the running averages.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
            eps: BATCH_NORM_EPS,
        }
    }
}

impl Layer for BatchNorm {
    fn init(&self, store: &mut ParamStore, _rng: &mut dyn RngCore) {
        let c = self.channels;
        store.insert(format!("{}.gamma", self.name), Tensor::ones(&[c]));
        store.insert(format!("{}.beta", self.name), Tensor::zeros(&[c]));
        store.insert_buffer(format!("{}.running_mean", self.name), Tensor::zeros(&[c]));
        store.insert_buffer(format!("{}.running_var", self.name), Tensor::ones(&[c]));
    }

    fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        if f.graph.shape(x).len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                expected: vec![0, 0, 0, self.channels],
                got: f.graph.shape(x).to_vec(),
            });
        }
        let gamma = f.param(&format!("{}.gamma", self.name))?;
        let beta = f.param(&format!("{}.beta", self.name))?;
        if f.training() {
            let (y, stats) = f.graph.batch_norm(x, gamma, beta, self.eps)?;
            f.record_stats(&self.name, stats);
            Ok(y)
        } else {
            let mean = f.store().buffer(&format!("{}.running_mean", self.name))?.data().to_vec();
            let var = f.store().buffer(&format!("{}.running_var", self.name))?.data().to_vec();
            f.graph.frozen_norm(x, gamma, beta, &mean, &var, self.eps)
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
            eps: LAYER_NORM_EPS,
        }
    }
}

impl Layer for LayerNorm {
    fn init(&self, store: &mut ParamStore, _rng: &mut dyn RngCore) {
        store.insert(format!("{}.gamma", self.name), Tensor::ones(&[self.channels]));
        store.insert(format!("{}.beta", self.name), Tensor::zeros(&[self.channels]));
    }

    fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let gamma = f.param(&format!("{}.gamma", self.name))?;
        let beta = f.param(&format!("{}.beta", self.name))?;
        f.graph.layer_norm(x, gamma, beta, self.eps)
    }
}

/// `x` where `x >= 0`, `slope * x` elsewhere.
pub fn leaky_relu(f: &mut Forward<'_>, x: Var, slope: f64) -> Result<Var> {
    if !(slope > 0.0 && slope < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "leaky_relu slope must lie in (0, 1), got {slope}"
        )));
    }
    Ok(f.graph.leaky_relu(x, slope))
}

/// Gaussian fuzzy membership module.
///
/// For input `B×H×W×C`:
/// 1. `x = w ⊙ x + b` with per-position `w`, `b` of shape `H×W×C`;
/// 2. layer normalization over channels;
/// 3. LeakyReLU;
/// 4. the activation is replicated across `n` fuzzy sets (`B×H×W×n×C`);
/// 5. membership `exp(-(x - μ_i)² / (2σ_i²))` for each set `i`;
/// 6. mean over the `n` sets, giving `B×H×W×C`;
/// 7. with `channel_mean`, a further mean over channels gives `B×H×W×1`.
///
/// Every output lies in `(0, 1]`.
#[derive(Clone, Debug)]
pub struct FuzzyModule {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub sets: usize,
    pub channel_mean: bool,
}

impl FuzzyModule {
    pub fn out_channels(&self) -> usize {
        if self.channel_mean {
            1
        } else {
            self.channels
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        ["w", "b", "ln.gamma", "ln.beta", "mu", "sigma"]
            .iter()
            .map(|s| format!("{}.{s}", self.name))
            .collect()
    }

    fn layer_norm(&self) -> LayerNorm {
        LayerNorm::new(format!("{}.ln", self.name), self.channels)
    }

    /// Evenly spaced centres over `[-1, 1]`; a single set sits at 0.
    pub fn initial_centres(n: usize) -> Vec<f64> {
        if n == 1 {
            return vec![0.0];
        }
        (0..n)
            .map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64)
            .collect()
    }
}

impl Layer for FuzzyModule {
    fn init(&self, store: &mut ParamStore, rng: &mut dyn RngCore) {
        let hwc = [self.height, self.width, self.channels];
        let set_shape = [1, 1, 1, self.sets, 1];
        store.insert(format!("{}.w", self.name), Tensor::ones(&hwc));
        store.insert(format!("{}.b", self.name), Tensor::zeros(&hwc));
        self.layer_norm().init(store, rng);
        store.insert(
            format!("{}.mu", self.name),
            Tensor::new(&set_shape, Self::initial_centres(self.sets)).expect("set shape"),
        );
        store.insert(format!("{}.sigma", self.name), Tensor::ones(&set_shape));
    }

    fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let shape = f.graph.shape(x).to_vec();
        let expected = [shape.first().copied().unwrap_or(1), self.height, self.width, self.channels];
        if shape.len() != 4 || shape[1..] != expected[1..] {
            return Err(Error::ShapeMismatch {
                op: "fuzzy_module",
                expected: expected.to_vec(),
                got: shape,
            });
        }
        let b = shape[0];
        let w = f.param(&format!("{}.w", self.name))?;
        let bias = f.param(&format!("{}.b", self.name))?;
        let mu = f.param(&format!("{}.mu", self.name))?;
        let sigma = f.param(&format!("{}.sigma", self.name))?;

        let scaled = f.graph.mul(x, w)?;
        let shifted = f.graph.add(scaled, bias)?;
        let normed = self.layer_norm().forward(f, shifted)?;
        let act = f.graph.leaky_relu(normed, LEAKY_SLOPE);
        let per_set = f
            .graph
            .reshape(act, &[b, self.height, self.width, 1, self.channels])?;
        let diff = f.graph.sub(per_set, mu)?;
        let sq = f.graph.mul(diff, diff)?;
        let var = f.graph.mul(sigma, sigma)?;
        let two_var = f.graph.scale(var, 2.0);
        let z = f.graph.div(sq, two_var)?;
        let neg = f.graph.neg(z);
        let membership = f.graph.exp(neg);
        let mean_sets = f.graph.symmetric_mean(membership, 3)?;
        if !self.channel_mean {
            return Ok(mean_sets);
        }
        let mean_channels = f.graph.reduce_mean(mean_sets, 3)?;
        f.graph
            .reshape(mean_channels, &[b, self.height, self.width, 1])
    }
}

/// Clamps every fuzzy width (`*.sigma`) in `store` to at least [`SIGMA_MIN`].
pub fn clamp_sigmas(store: &mut ParamStore) {
    for (name, t) in store.iter_mut() {
        if name.ends_with(".sigma") {
            for v in t.data_mut() {
                if !(*v >= SIGMA_MIN) {
                    *v = SIGMA_MIN;
                }
            }
        }
    }
}

/// Convolutional gated linear unit.
///
/// Two pointwise projections of the input give a value path `V` and a gate
/// path; the gate passes through a 3×3 depthwise convolution and a sigmoid,
/// and a final pointwise projection maps `V ⊙ G` to the output channels.
#[derive(Clone, Debug)]
pub struct ConvGlu {
    pub name: String,
    pub cin: usize,
    pub hidden: usize,
    pub cout: usize,
}

impl ConvGlu {
    /// Expansion ratio 1: the hidden width equals the input width.
    pub fn new(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            hidden: cin,
            cout,
        }
    }

    pub fn value_proj(&self) -> Conv2d {
        Conv2d::new(format!("{}.value", self.name), 1, self.cin, self.hidden)
    }

    pub fn gate_proj(&self) -> Conv2d {
        Conv2d::new(format!("{}.gate", self.name), 1, self.cin, self.hidden)
    }

    pub fn depthwise(&self) -> DepthwiseConv2d {
        DepthwiseConv2d {
            name: format!("{}.dw", self.name),
            k: 3,
            channels: self.hidden,
        }
    }

    pub fn out_proj(&self) -> Conv2d {
        Conv2d::new(format!("{}.out", self.name), 1, self.hidden, self.cout)
    }
}

impl Layer for ConvGlu {
    fn init(&self, store: &mut ParamStore, rng: &mut dyn RngCore) {
        self.value_proj().init(store, rng);
        self.gate_proj().init(store, rng);
        self.depthwise().init(store, rng);
        self.out_proj().init(store, rng);
    }

    fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let v = self.value_proj().forward(f, x)?;
        let g = self.gate_proj().forward(f, x)?;
        let g = self.depthwise().forward(f, g)?;
        let g = f.graph.sigmoid(g);
        let gated = f.graph.mul(v, g)?;
        self.out_proj().forward(f, gated)
    }
}

/// `1×N` followed by `N×1` convolution, same padding, approximating an
/// `N×N` kernel.
#[derive(Clone, Debug)]
pub struct SeparableConv2d {
    pub name: String,
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
}

impl SeparableConv2d {
    pub fn new(name: impl Into<String>, n: usize, cin: usize, cout: usize) -> Result<Self> {
        if n.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "separable kernel size must be odd, got {n}"
            )));
        }
        Ok(Self {
            name: name.into(),
            n,
            cin,
            cout,
        })
    }

    pub fn row(&self) -> Conv2d {
        Conv2d::rect(format!("{}.row", self.name), 1, self.n, self.cin, self.cout)
    }

    pub fn col(&self) -> Conv2d {
        Conv2d::rect(format!("{}.col", self.name), self.n, 1, self.cout, self.cout)
    }
}

impl Layer for SeparableConv2d {
    fn init(&self, store: &mut ParamStore, rng: &mut dyn RngCore) {
        self.row().init(store, rng);
        self.col().init(store, rng);
    }

    fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let r = self.row().forward(f, x)?;
        self.col().forward(f, r)
    }
}
