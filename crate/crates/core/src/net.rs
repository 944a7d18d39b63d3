//! Branch blocks, the fuzzy-convolutional (FC) module and the encoder-decoder
//! segmentation network.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{sigmoid, Var};
use crate::layers::{BatchNorm, Conv2d, ConvGlu, FuzzyModule, Layer};
use crate::params::{Forward, ParamStore};
use crate::tensor::Tensor;

/// Architecture of a network; fully determines parameter shapes and cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub base_filters: usize,
    /// Number of encoder stages (and of 2x downsampling steps).
    pub depth: usize,
    pub fuzzy_sets: usize,
    /// Parallel residual paths inside every FC module; path `p` chains `p`
    /// residual blocks. 1 is the reduced configuration, 3 the full baseline.
    pub resnet_paths: usize,
    /// 1 for binary segmentation, otherwise the number of classes.
    pub classes: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub separable_n: usize,
    pub bottleneck_blocks: usize,
    /// Fuzzy membership module inside the fifth branch.
    pub fuzzy: bool,
    /// Gated unit inside the fifth branch.
    pub conv_glu: bool,
    /// Average the fuzzy output over channels as well as over fuzzy sets.
    pub fuzzy_channel_mean: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            base_filters: 17,
            depth: 5,
            fuzzy_sets: 3,
            resnet_paths: 1,
            classes: 1,
            in_channels: 3,
            height: 352,
            width: 352,
            separable_n: 5,
            bottleneck_blocks: 2,
            fuzzy: true,
            conv_glu: true,
            fuzzy_channel_mean: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.base_filters == 0 {
            return fail("base_filters must be >= 1".into());
        }
        if self.depth == 0 {
            return fail("depth must be >= 1".into());
        }
        if self.fuzzy_sets == 0 {
            return fail("fuzzy_sets must be >= 1".into());
        }
        if !(1..=3).contains(&self.resnet_paths) {
            return fail(format!("resnet_paths must be 1, 2 or 3, got {}", self.resnet_paths));
        }
        if self.classes == 0 || self.in_channels == 0 {
            return fail("classes and in_channels must be >= 1".into());
        }
        if self.separable_n.is_multiple_of(2) {
            return fail(format!("separable_n must be odd, got {}", self.separable_n));
        }
        let step = 1usize
            .checked_shl(self.depth as u32)
            .filter(|s| *s <= self.height.max(self.width).max(1))
            .ok_or_else(|| Error::InvalidConfig(format!("depth {} too large", self.depth)))?;
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(step) || !self.width.is_multiple_of(step) {
            return fail(format!(
                "input {}x{} is not divisible by 2^depth = {step}",
                self.height, self.width
            ));
        }
        Ok(())
    }

    /// Filters of encoder/decoder stage `i`.
    pub fn filters(&self, stage: usize) -> usize {
        self.base_filters << stage
    }

    pub fn stage_size(&self, stage: usize) -> (usize, usize) {
        (self.height >> stage, self.width >> stage)
    }

    /// Names of the recorded FC-module activations, encoder first.
    pub fn stage_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.depth).map(|i| format!("enc{i}")).collect();
        names.push("bottleneck".into());
        names.extend((0..self.depth).rev().map(|i| format!("dec{i}")));
        names
    }
}

/// Convolution, batch normalization, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new(conv: Conv2d) -> Self {
        let bn = BatchNorm::new(format!("{}.bn", conv.name), conv.cout);
        Self { conv, bn }
    }
}

impl Layer for ConvBnRelu {
    fn init(&self, store: &mut ParamStore, rng: &mut dyn RngCore) {
        self.conv.init(store, rng);
        self.bn.init(store, rng);
    }

    fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(f, x)?;
        let y = self.bn.forward(f, y)?;
        Ok(f.graph.relu(y))
    }
}

/// A chain of conv-BN-ReLU stages.
#[derive(Clone, Debug)]
pub struct ConvChain {
    pub stages: Vec<ConvBnRelu>,
}

impl ConvChain {
    /// 3×3 then 3×3 with dilation 2: a 7×7 receptive field.
    pub fn midscope(name: &str, cin: usize, filters: usize) -> Self {
        Self::dilated(name, cin, filters, &[1, 2])
    }

    /// Three 3×3 convolutions with dilations 1, 2, 3: a 13×13 receptive field.
    pub fn widescope(name: &str, cin: usize, filters: usize) -> Self {
        Self::dilated(name, cin, filters, &[1, 2, 3])
    }

    fn dilated(name: &str, cin: usize, filters: usize, dilations: &[usize]) -> Self {
        let stages = dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let c = if i == 0 { cin } else { filters };
                ConvBnRelu::new(Conv2d::new(format!("{name}.conv{}", i + 1), 3, c, filters).dilation(d))
            })
            .collect();
        Self { stages }
    }

    /// `1×N` then `N×1`, each followed by BN and ReLU.
    pub fn separable(name: &str, cin: usize, filters: usize, n: usize) -> Result<Self> {
        if n.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "separable kernel size must be odd, got {n}"
            )));
        }
        Ok(Self {
            stages: vec![
                ConvBnRelu::new(Conv2d::rect(format!("{name}.row"), 1, n, cin, filters)),
                ConvBnRelu::new(Conv2d::rect(format!("{name}.col"), n, 1, filters, filters)),
            ],
        })
    }

    /// Side of the square window that can influence one output.
    pub fn receptive_field(&self) -> (usize, usize) {
        let mut rf = (1, 1);
        for s in &self.stages {
            rf.0 += s.conv.dilation * (s.conv.kh - 1);
            rf.1 += s.conv.dilation * (s.conv.kw - 1);
        }
        rf
    }
}

impl Layer for ConvChain {
    fn init(&self, store: &mut ParamStore, rng: &mut dyn RngCore) {
        for s in &self.stages {
            s.init(store, rng);
        }
    }

    fn forward(&self, f: &mut Forward<'_>, mut x: Var) -> Result<Var> {
        for s in &self.stages {
            x = s.forward(f, x)?;
        }
        Ok(x)
    }
}

/// Residual unit: `BN(ReLU(main(x) + shortcut(x)))` with
/// `main = conv3×3 → BN → ReLU → conv3×3 → BN` and a 1×1 shortcut.
#[derive(Clone, Debug)]
pub struct ResnetBlock {
    pub shortcut: Conv2d,
    pub conv1: ConvBnRelu,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
    pub bn_out: BatchNorm,
}

impl ResnetBlock {
    pub fn new(name: &str, cin: usize, filters: usize) -> Self {
        Self {
            shortcut: Conv2d::new(format!("{name}.shortcut"), 1, cin, filters),
            conv1: ConvBnRelu::new(Conv2d::new(format!("{name}.conv1"), 3, cin, filters)),
            conv2: Conv2d::new(format!("{name}.conv2"), 3, filters, filters),
            bn2: BatchNorm::new(format!("{name}.conv2.bn"), filters),
            bn_out: BatchNorm::new(format!("{name}.bn_out"), filters),
        }
    }
}

impl Layer for ResnetBlock {
    fn init(&self, store: &mut ParamStore, rng: &mut dyn RngCore) {
        self.shortcut.init(store, rng);
        self.conv1.init(store, rng);
        self.conv2.init(store, rng);
        self.bn2.init(store, rng);
        self.bn_out.init(store, rng);
    }

    fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let skip = self.shortcut.forward(f, x)?;
        let m = self.conv1.forward(f, x)?;
        let m = self.conv2.forward(f, m)?;
        let m = self.bn2.forward(f, m)?;
        let s = f.graph.add(m, skip)?;
        let s = f.graph.relu(s);
        self.bn_out.forward(f, s)
    }
}

/// `paths` parallel chains of residual blocks (chain `p` has `p` blocks),
/// summed.
#[derive(Clone, Debug)]
pub struct ResnetPaths {
    pub paths: Vec<Vec<ResnetBlock>>,
}

impl ResnetPaths {
    pub fn new(name: &str, cin: usize, filters: usize, paths: usize) -> Self {
        let paths = (1..=paths)
            .map(|p| {
                (0..p)
                    .map(|k| {
                        let c = if k == 0 { cin } else { filters };
                        ResnetBlock::new(&format!("{name}.p{p}.b{k}"), c, filters)
                    })
                    .collect()
            })
            .collect();
        Self { paths }
    }
}

impl Layer for ResnetPaths {
    fn init(&self, store: &mut ParamStore, rng: &mut dyn RngCore) {
        for b in self.paths.iter().flatten() {
            b.init(store, rng);
        }
    }

    fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let mut total: Option<Var> = None;
        for path in &self.paths {
            let mut y = x;
            for b in path {
                y = b.forward(f, y)?;
            }
            total = Some(match total {
                Some(t) => f.graph.add(t, y)?,
                None => y,
            });
        }
        total.ok_or_else(|| Error::InvalidConfig("zero residual paths".into()))
    }
}

/// Fifth FC branch: fuzzy module followed by a gated unit lifting its output
/// to `filters` channels.
///
/// Ablations: without the gated unit a 1×1 convolution does the lifting;
/// without the fuzzy module the gated unit reads the input summarized the
/// same way the fuzzy module would (channel mean), so its parameter shapes
/// do not change.
#[derive(Clone, Debug)]
pub struct FuzzyBranch {
    pub fuzzy: Option<FuzzyModule>,
    pub glu: Option<ConvGlu>,
    pub lift: Option<Conv2d>,
    pub channel_mean: bool,
}

impl FuzzyBranch {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        height: usize,
        width: usize,
        cin: usize,
        filters: usize,
        sets: usize,
        use_fuzzy: bool,
        use_glu: bool,
        channel_mean: bool,
    ) -> Option<Self> {
        if !use_fuzzy && !use_glu {
            return None;
        }
        let summary = if channel_mean { 1 } else { cin };
        let fuzzy = use_fuzzy.then(|| FuzzyModule {
            name: format!("{name}.fuzzy"),
            height,
            width,
            channels: cin,
            sets,
            channel_mean,
        });
        let glu = use_glu.then(|| ConvGlu::new(format!("{name}.glu"), summary, filters));
        let lift = (!use_glu).then(|| Conv2d::new(format!("{name}.lift"), 1, summary, filters));
        Some(Self {
            fuzzy,
            glu,
            lift,
            channel_mean,
        })
    }
}

impl Layer for FuzzyBranch {
    fn init(&self, store: &mut ParamStore, rng: &mut dyn RngCore) {
        if let Some(fz) = &self.fuzzy {
            fz.init(store, rng);
        }
        if let Some(g) = &self.glu {
            g.init(store, rng);
        }
        if let Some(l) = &self.lift {
            l.init(store, rng);
        }
    }

    fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let z = match &self.fuzzy {
            Some(fz) => fz.forward(f, x)?,
            None if self.channel_mean => {
                let s = f.graph.shape(x).to_vec();
                let m = f.graph.reduce_mean(x, 3)?;
                f.graph.reshape(m, &[s[0], s[1], s[2], 1])?
            }
            None => x,
        };
        match (&self.glu, &self.lift) {
            (Some(g), _) => g.forward(f, z),
            (None, Some(l)) => l.forward(f, z),
            (None, None) => unreachable!("branch without output projection"),
        }
    }
}

/// Fuzzy-convolutional module: `BN(x)` feeds five parallel branches
/// (midscope, widescope, separable, residual, fuzzy) whose outputs are summed
/// and normalized.
#[derive(Clone, Debug)]
pub struct FcModule {
    pub name: String,
    pub bn_in: BatchNorm,
    pub midscope: ConvChain,
    pub widescope: ConvChain,
    pub separable: ConvChain,
    pub resnet: ResnetPaths,
    pub fuzzy: Option<FuzzyBranch>,
    pub bn_out: BatchNorm,
}

impl FcModule {
    pub fn new(name: &str, cfg: &NetworkConfig, stage: usize, cin: usize, filters: usize) -> Result<Self> {
        let (h, w) = cfg.stage_size(stage);
        Ok(Self {
            name: name.to_string(),
            bn_in: BatchNorm::new(format!("{name}.bn_in"), cin),
            midscope: ConvChain::midscope(&format!("{name}.mid"), cin, filters),
            widescope: ConvChain::widescope(&format!("{name}.wide"), cin, filters),
            separable: ConvChain::separable(&format!("{name}.sep"), cin, filters, cfg.separable_n)?,
            resnet: ResnetPaths::new(&format!("{name}.res"), cin, filters, cfg.resnet_paths),
            fuzzy: FuzzyBranch::new(
                &format!("{name}.fz"),
                h,
                w,
                cin,
                filters,
                cfg.fuzzy_sets,
                cfg.fuzzy,
                cfg.conv_glu,
                cfg.fuzzy_channel_mean,
            ),
            bn_out: BatchNorm::new(format!("{name}.bn_out"), filters),
        })
    }

    /// Normalized input and each branch output, in branch order.
    pub fn branches(&self, f: &mut Forward<'_>, x: Var) -> Result<Vec<Var>> {
        let xn = self.bn_in.forward(f, x)?;
        let mut outs = vec![
            self.midscope.forward(f, xn)?,
            self.widescope.forward(f, xn)?,
            self.separable.forward(f, xn)?,
            self.resnet.forward(f, xn)?,
        ];
        if let Some(fz) = &self.fuzzy {
            outs.push(fz.forward(f, xn)?);
        }
        Ok(outs)
    }
}

impl Layer for FcModule {
    fn init(&self, store: &mut ParamStore, rng: &mut dyn RngCore) {
        self.bn_in.init(store, rng);
        self.midscope.init(store, rng);
        self.widescope.init(store, rng);
        self.separable.init(store, rng);
        self.resnet.init(store, rng);
        if let Some(fz) = &self.fuzzy {
            fz.init(store, rng);
        }
        self.bn_out.init(store, rng);
    }

    fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let outs = self.branches(f, x)?;
        let mut total = outs[0];
        for &o in &outs[1..] {
            total = f.graph.add(total, o)?;
        }
        self.bn_out.forward(f, total)
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    fc: FcModule,
    down: Conv2d,
    scale: Conv2d,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: Conv2d,
    fc: FcModule,
}

/// Encoder-decoder segmentation network.
///
/// Encoder stage `i` applies an FC module with `F·2^i` filters, then a
/// stride-2 convolution; a parallel downscaling path of stride-2
/// convolutions from the input is added after every stage. Residual blocks
/// form the bottleneck. Decoder stages upsample 2x (nearest neighbour plus a
/// 3×3 convolution), add the matching encoder output and apply an FC module.
/// A 1×1 convolution produces the class logits.
#[derive(Clone, Debug)]
pub struct ClfSeg {
    config: NetworkConfig,
    encoder: Vec<EncoderStage>,
    bottleneck: Vec<ResnetBlock>,
    decoder: Vec<DecoderStage>,
    head: Conv2d,
}

impl ClfSeg {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let depth = config.depth;
        let mut encoder = Vec::with_capacity(depth);
        for i in 0..depth {
            let cin = if i == 0 { config.in_channels } else { config.filters(i) };
            let scale_in = if i == 0 { config.in_channels } else { config.filters(i) };
            encoder.push(EncoderStage {
                fc: FcModule::new(&format!("enc{i}"), &config, i, cin, config.filters(i))?,
                down: Conv2d::new(format!("enc{i}.down"), 3, config.filters(i), config.filters(i + 1)).stride(2),
                scale: Conv2d::new(format!("enc{i}.scale"), 3, scale_in, config.filters(i + 1)).stride(2),
            });
        }
        let bottleneck = (0..config.bottleneck_blocks)
            .map(|k| ResnetBlock::new(&format!("bottleneck.b{k}"), config.filters(depth), config.filters(depth)))
            .collect();
        let mut decoder = Vec::with_capacity(depth);
        for i in (0..depth).rev() {
            decoder.push(DecoderStage {
                up: Conv2d::new(format!("dec{i}.up"), 3, config.filters(i + 1), config.filters(i)),
                fc: FcModule::new(&format!("dec{i}"), &config, i, config.filters(i), config.filters(i))?,
            });
        }
        let head = Conv2d::new("head", 1, config.filters(0), config.classes);
        Ok(Self {
            config,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Fresh parameters from a seeded generator.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.init(&mut store, &mut rng);
        store
    }

    /// Logits `B×H×W×classes` for input `B×H×W×Cin`.
    pub fn logits(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let s = f.graph.shape(x).to_vec();
        let c = &self.config;
        if s.len() != 4 || s[1] != c.height || s[2] != c.width || s[3] != c.in_channels {
            return Err(Error::ShapeMismatch {
                op: "clfseg_forward",
                expected: vec![s.first().copied().unwrap_or(1), c.height, c.width, c.in_channels],
                got: s,
            });
        }
        let mut skips = Vec::with_capacity(c.depth);
        let mut h = x;
        let mut scaled = x;
        for (i, st) in self.encoder.iter().enumerate() {
            let e = st.fc.forward(f, h)?;
            f.tap(format!("enc{i}"), e);
            skips.push(e);
            let d = st.down.forward(f, e)?;
            scaled = st.scale.forward(f, scaled)?;
            h = f.graph.add(d, scaled)?;
        }
        for b in &self.bottleneck {
            h = b.forward(f, h)?;
        }
        f.tap("bottleneck", h);
        for (st, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            let u = f.graph.upsample2x(h)?;
            let u = st.up.forward(f, u)?;
            let u = f.graph.add(u, *skip)?;
            h = st.fc.forward(f, u)?;
            f.tap(st.fc.name.clone(), h);
        }
        self.head.forward(f, h)
    }
}

impl Layer for ClfSeg {
    fn init(&self, store: &mut ParamStore, rng: &mut dyn RngCore) {
        for st in &self.encoder {
            st.fc.init(store, rng);
            st.down.init(store, rng);
            st.scale.init(store, rng);
        }
        for b in &self.bottleneck {
            b.init(store, rng);
        }
        for st in &self.decoder {
            st.up.init(store, rng);
            st.fc.init(store, rng);
        }
        self.head.init(store, rng);
    }

    fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        self.logits(f, x)
    }
}

/// Hard labels from logits: `B×H×W×1` holding 0/1 for binary heads
/// (sigmoid ≥ 0.5 is foreground) or the arg-max class index, lowest index
/// on ties.
pub fn predict_mask(logits: &Tensor, classes: usize) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 4 || s[3] != classes {
        return Err(Error::ShapeMismatch {
            op: "predict_mask",
            expected: vec![s.first().copied().unwrap_or(1), s.get(1).copied().unwrap_or(1), s.get(2).copied().unwrap_or(1), classes],
            got: s.to_vec(),
        });
    }
    let data = if classes == 1 {
        logits
            .data()
            .iter()
            .map(|&z| if sigmoid(z) >= 0.5 { 1.0 } else { 0.0 })
            .collect()
    } else {
        logits
            .data()
            .chunks_exact(classes)
            .map(|row| {
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best as f64
            })
            .collect()
    };
    Tensor::new(&[s[0], s[1], s[2], 1], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Mode;

    fn tiny(depth: usize, f: usize, size: usize, cin: usize) -> NetworkConfig {
        NetworkConfig {
            base_filters: f,
            depth,
            in_channels: cin,
            height: size,
            width: size,
            fuzzy_sets: 2,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(tiny(2, 2, 16, 1).validate().is_ok());
        assert!(tiny(3, 2, 20, 1).validate().is_err());
        assert!(NetworkConfig { base_filters: 0, ..tiny(2, 2, 16, 1) }.validate().is_err());
        assert!(NetworkConfig { resnet_paths: 4, ..tiny(2, 2, 16, 1) }.validate().is_err());
        assert!(NetworkConfig { separable_n: 4, ..tiny(2, 2, 16, 1) }.validate().is_err());
        assert!(NetworkConfig { depth: 70, ..tiny(2, 2, 16, 1) }.validate().is_err());
        assert!(ClfSeg::new(tiny(3, 2, 20, 1)).is_err());
    }

    #[test]
    fn output_matches_input_resolution() {
        for (cfg, classes) in [(tiny(2, 2, 16, 1), 1), (tiny(1, 3, 8, 3), 4), (tiny(3, 2, 24, 2), 2)] {
            let cfg = NetworkConfig { classes, ..cfg };
            let net = ClfSeg::new(cfg.clone()).unwrap();
            let store = net.init_params(1);
            let mut f = Forward::new(&store, Mode::Train);
            let x = f.input(Tensor::full(&[2, cfg.height, cfg.width, cfg.in_channels], 0.3));
            let y = net.logits(&mut f, x).unwrap();
            assert_eq!(f.graph.shape(y), &[2, cfg.height, cfg.width, classes]);
            let names: Vec<&str> = f.taps().iter().map(|(n, _)| n.as_str()).collect();
            assert_eq!(names, cfg.stage_names().iter().map(String::as_str).collect::<Vec<_>>());
        }
    }

    #[test]
    fn rejects_wrong_input_size() {
        let net = ClfSeg::new(tiny(2, 2, 16, 1)).unwrap();
        let store = net.init_params(1);
        let mut f = Forward::new(&store, Mode::Eval);
        let x = f.input(Tensor::zeros(&[1, 8, 8, 1]));
        assert!(net.logits(&mut f, x).is_err());
    }

    #[test]
    fn predict_mask_conventions() {
        let z = Tensor::new(&[1, 1, 3, 1], vec![0.0, -1e-9, 2.0]).unwrap();
        assert_eq!(predict_mask(&z, 1).unwrap().data(), &[1.0, 0.0, 1.0]);
        let z = Tensor::new(&[1, 1, 2, 4], vec![2.0, -1.0, 0.5, 0.5, 0.0, 1.0, 1.0, -3.0]).unwrap();
        assert_eq!(predict_mask(&z, 4).unwrap().data(), &[0.0, 1.0]);
        let shifted = z.map(|v| v + 17.25);
        assert_eq!(predict_mask(&shifted, 4).unwrap(), predict_mask(&z, 4).unwrap());
        assert!(predict_mask(&z, 3).is_err());
    }

    #[test]
    fn initialization_is_seeded() {
        let net = ClfSeg::new(tiny(2, 2, 16, 1)).unwrap();
        assert_eq!(net.init_params(5), net.init_params(5));
        assert_ne!(net.init_params(5), net.init_params(6));
    }
}
