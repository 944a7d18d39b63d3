//! Central finite differences as an oracle for the reverse-mode rules, and a
//! suite that checks every layer, block, loss and a small full network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::Var;
use crate::layers::{
    leaky_relu, BatchNorm, Conv2d, ConvGlu, DepthwiseConv2d, FuzzyModule, Layer, LayerNorm, SeparableConv2d,
};
use crate::losses::{self, LossConfig, LossKind};
use crate::net::{ClfSeg, ConvChain, FcModule, FuzzyBranch, NetworkConfig, ResnetBlock, ResnetPaths};
use crate::params::{Forward, Mode, ParamStore};
use crate::tensor::Tensor;

pub const FD_EPS: f64 = 1e-5;

/// Denominator floor of [`rel_error`] relative to the largest gradient
/// component of the objective, so that components that are zero up to
/// rounding compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// One scalar inside a parameter store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Coord {
    pub name: String,
    pub index: usize,
}

/// `(f(θ + eps·e) - f(θ - eps·e)) / (2·eps)` for each coordinate `e`.
pub fn finite_difference_grad<F>(mut f: F, params: &ParamStore, coords: &[Coord], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut work = params.clone();
    let mut out = Vec::with_capacity(coords.len());
    for c in coords {
        let orig = work.get(&c.name)?.data()[c.index];
        work.get_mut(&c.name)?.data_mut()[c.index] = orig + eps;
        let up = f(&work)?;
        work.get_mut(&c.name)?.data_mut()[c.index] = orig - eps;
        let down = f(&work)?;
        work.get_mut(&c.name)?.data_mut()[c.index] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}

/// Every coordinate of every parameter, in store order.
pub fn all_coords(params: &ParamStore) -> Vec<Coord> {
    params
        .iter()
        .flat_map(|(name, t)| {
            (0..t.len()).map(move |index| Coord {
                name: name.to_string(),
                index,
            })
        })
        .collect()
}

type LossFn = Box<dyn Fn(&mut Forward<'_>) -> Result<Var>>;

/// A scalar function of a parameter store, evaluated on a fresh tape.
pub struct Objective {
    pub params: ParamStore,
    pub mode: Mode,
    loss: LossFn,
    /// Check this many randomly chosen coordinates instead of all of them.
    pub sample: Option<usize>,
}

impl Objective {
    pub fn new(params: ParamStore, loss: impl Fn(&mut Forward<'_>) -> Result<Var> + 'static) -> Self {
        Self {
            params,
            mode: Mode::Train,
            loss: Box::new(loss),
            sample: None,
        }
    }

    pub fn eval(&self, params: &ParamStore) -> Result<f64> {
        Ok(self.eval_with_pattern(params)?.0)
    }

    fn eval_with_pattern(&self, params: &ParamStore) -> Result<(f64, Vec<u8>)> {
        let mut f = Forward::new(params, self.mode);
        let v = (self.loss)(&mut f)?;
        Ok((f.value(v).item(), f.graph.kink_pattern()))
    }

    /// Compares backward() with central differences. Coordinates whose two
    /// probes land on different pieces of a relu or clamp are not
    /// differentiable at the probe scale and are skipped.
    pub fn check(&self, rng: &mut ChaCha8Rng) -> Result<Outcome> {
        let mut f = Forward::new(&self.params, self.mode);
        let v = (self.loss)(&mut f)?;
        let grads = f.graph.backward(v)?;
        let analytic = f.param_grads(&grads);
        let scale = analytic.values().map(Tensor::max_abs).fold(1.0, f64::max);
        let floor = REL_FLOOR * scale;
        let mut coords = all_coords(&self.params);
        if let Some(n) = self.sample {
            let picked = rand::seq::index::sample(rng, coords.len(), n.min(coords.len()));
            coords = picked.into_iter().map(|i| coords[i].clone()).collect();
        }
        let mut out = Outcome::default();
        let mut work = self.params.clone();
        for c in coords {
            let orig = work.get(&c.name)?.data()[c.index];
            work.get_mut(&c.name)?.data_mut()[c.index] = orig + FD_EPS;
            let (up, up_kinks) = self.eval_with_pattern(&work)?;
            work.get_mut(&c.name)?.data_mut()[c.index] = orig - FD_EPS;
            let (down, down_kinks) = self.eval_with_pattern(&work)?;
            work.get_mut(&c.name)?.data_mut()[c.index] = orig;
            if up_kinks != down_kinks {
                out.skipped += 1;
                continue;
            }
            out.checked += 1;
            let numeric = (up - down) / (2.0 * FD_EPS);
            let a = analytic[&c.name].data()[c.index];
            let e = rel_error(a, numeric, floor);
            if out.worst.as_ref().is_none_or(|w| e > w.rel_error) {
                out.worst = Some(Mismatch {
                    coord: c,
                    analytic: a,
                    numeric,
                    rel_error: e,
                });
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outcome {
    pub worst: Option<Mismatch>,
    pub checked: usize,
    pub skipped: usize,
}

impl Outcome {
    pub fn max_rel_error(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.rel_error)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub coord: Coord,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    pub seeds: usize,
    pub checked: usize,
    /// Coordinates whose probes straddled a kink.
    pub skipped: usize,
}

pub type Builder = fn(u64) -> Result<Objective>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Moves every parameter off its structured initial value.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
}

/// Layer `layer` on input `input`, reduced to `Σ out ⊙ r` for a fixed random
/// `r` so that normalizing layers still have informative gradients.
fn layer_objective<L: Layer + 'static>(seed: u64, layer: L, input: &[usize], out: &[usize]) -> Objective {
    let mut rng = rng(seed);
    let mut store = ParamStore::new();
    layer.init(&mut store, &mut rng);
    jitter(&mut store, &mut rng);
    store.insert("input", uniform(input, -1.0, 1.0, &mut rng));
    let r = uniform(out, -1.0, 1.0, &mut rng);
    Objective::new(store, move |f| {
        let x = f.param("input")?;
        let y = layer.forward(f, x)?;
        weighted_sum(f, y, &r)
    })
}

fn weighted_sum(f: &mut Forward<'_>, y: Var, r: &Tensor) -> Result<Var> {
    let rv = f.graph.constant(r.clone());
    let p = f.graph.mul(y, rv)?;
    Ok(f.graph.sum_all(p))
}

fn conv2d(seed: u64) -> Result<Objective> {
    Ok(layer_objective(seed, Conv2d::new("c", 3, 2, 3), &[2, 5, 5, 2], &[2, 5, 5, 3]))
}

fn conv2d_dilated(seed: u64) -> Result<Objective> {
    Ok(layer_objective(seed, Conv2d::new("c", 3, 2, 2).dilation(2), &[1, 6, 6, 2], &[1, 6, 6, 2]))
}

fn conv2d_strided(seed: u64) -> Result<Objective> {
    Ok(layer_objective(seed, Conv2d::new("c", 3, 2, 2).stride(2), &[1, 7, 6, 2], &[1, 4, 3, 2]))
}

fn depthwise(seed: u64) -> Result<Objective> {
    let layer = DepthwiseConv2d {
        name: "dw".into(),
        k: 3,
        channels: 3,
    };
    Ok(layer_objective(seed, layer, &[1, 5, 5, 3], &[1, 5, 5, 3]))
}

fn separable(seed: u64) -> Result<Objective> {
    let layer = SeparableConv2d::new("sep", 5, 2, 3)?;
    Ok(layer_objective(seed, layer, &[1, 6, 6, 2], &[1, 6, 6, 3]))
}

fn batch_norm(seed: u64) -> Result<Objective> {
    Ok(layer_objective(seed, BatchNorm::new("bn", 3), &[2, 3, 3, 3], &[2, 3, 3, 3]))
}

fn batch_norm_eval(seed: u64) -> Result<Objective> {
    let mut obj = layer_objective(seed, BatchNorm::new("bn", 3), &[2, 3, 3, 3], &[2, 3, 3, 3]);
    let mut rng = rng(seed ^ 0xb17);
    obj.params.insert_buffer("bn.running_mean", uniform(&[3], -0.5, 0.5, &mut rng));
    obj.params.insert_buffer("bn.running_var", uniform(&[3], 0.5, 2.0, &mut rng));
    obj.mode = Mode::Eval;
    Ok(obj)
}

fn layer_norm(seed: u64) -> Result<Objective> {
    Ok(layer_objective(seed, LayerNorm::new("ln", 4), &[1, 3, 3, 4], &[1, 3, 3, 4]))
}

fn leaky(seed: u64) -> Result<Objective> {
    let mut rng = rng(seed);
    let mut store = ParamStore::new();
    store.insert("input", uniform(&[1, 4, 4, 2], -1.0, 1.0, &mut rng));
    let r = uniform(&[1, 4, 4, 2], -1.0, 1.0, &mut rng);
    Ok(Objective::new(store, move |f| {
        let x = f.param("input")?;
        let y = leaky_relu(f, x, 0.01)?;
        weighted_sum(f, y, &r)
    }))
}

fn fuzzy_module(seed: u64) -> Result<Objective> {
    let layer = FuzzyModule {
        name: "fz".into(),
        height: 3,
        width: 3,
        channels: 3,
        sets: 3,
        channel_mean: true,
    };
    Ok(layer_objective(seed, layer, &[2, 3, 3, 3], &[2, 3, 3, 1]))
}

fn fuzzy_module_per_channel(seed: u64) -> Result<Objective> {
    let layer = FuzzyModule {
        name: "fz".into(),
        height: 2,
        width: 3,
        channels: 2,
        sets: 4,
        channel_mean: false,
    };
    Ok(layer_objective(seed, layer, &[1, 2, 3, 2], &[1, 2, 3, 2]))
}

fn conv_glu(seed: u64) -> Result<Objective> {
    Ok(layer_objective(seed, ConvGlu::new("glu", 2, 3), &[1, 4, 4, 2], &[1, 4, 4, 3]))
}

fn midscope(seed: u64) -> Result<Objective> {
    Ok(layer_objective(seed, ConvChain::midscope("mid", 2, 2), &[2, 5, 5, 2], &[2, 5, 5, 2]))
}

fn widescope(seed: u64) -> Result<Objective> {
    Ok(layer_objective(seed, ConvChain::widescope("wide", 2, 2), &[2, 5, 5, 2], &[2, 5, 5, 2]))
}

fn separable_chain(seed: u64) -> Result<Objective> {
    let layer = ConvChain::separable("sep", 2, 2, 5)?;
    Ok(layer_objective(seed, layer, &[2, 5, 5, 2], &[2, 5, 5, 2]))
}

fn resnet_block(seed: u64) -> Result<Objective> {
    Ok(layer_objective(seed, ResnetBlock::new("res", 2, 3), &[2, 4, 4, 2], &[2, 4, 4, 3]))
}

fn resnet_paths(seed: u64) -> Result<Objective> {
    Ok(layer_objective(seed, ResnetPaths::new("res", 2, 2, 3), &[2, 4, 4, 2], &[2, 4, 4, 2]))
}

fn fuzzy_branch(seed: u64) -> Result<Objective> {
    let layer = FuzzyBranch::new("fz", 4, 4, 2, 3, 3, true, true, true).expect("branch enabled");
    Ok(layer_objective(seed, layer, &[2, 4, 4, 2], &[2, 4, 4, 3]))
}

fn fc_module(seed: u64) -> Result<Objective> {
    let cfg = NetworkConfig {
        base_filters: 4,
        depth: 1,
        in_channels: 2,
        height: 8,
        width: 8,
        ..NetworkConfig::default()
    };
    let layer = FcModule::new("fc", &cfg, 0, 2, 4)?;
    let mut obj = layer_objective(seed, layer, &[1, 8, 8, 2], &[1, 8, 8, 4]);
    obj.sample = Some(96);
    Ok(obj)
}

/// Loss of `sigmoid(z)` (or softmax over the last axis) against a random
/// target, checked with respect to the logits `z`.
fn loss_objective(seed: u64, kind: Option<LossKind>, which: fn(&mut Forward<'_>, Var, Var) -> Result<Var>, classes: usize) -> Objective {
    let mut rng = rng(seed);
    let mut store = ParamStore::new();
    let shape = [2, 3, 3, classes];
    store.insert("logits", uniform(&shape, -2.0, 2.0, &mut rng));
    let target = if classes == 1 {
        Tensor::from_fn(&shape, |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
    } else {
        let mut t = Tensor::zeros(&shape);
        for px in 0..shape[0] * shape[1] * shape[2] {
            let k = rng.gen_range(0..classes);
            t.data_mut()[px * classes + k] = 1.0;
        }
        t
    };
    Objective::new(store, move |f| {
        let z = f.param("logits")?;
        let t = f.graph.constant(target.clone());
        match kind {
            Some(kind) => {
                let cfg = LossConfig { kind, ..LossConfig::default() };
                cfg.from_logits(&mut f.graph, z, t, classes)
            }
            None => {
                let p = losses::probabilities(&mut f.graph, z, classes);
                which(f, p, t)
            }
        }
    })
}

fn no_loss(_: &mut Forward<'_>, _: Var, _: Var) -> Result<Var> {
    unreachable!("configured loss is used")
}

fn bce(seed: u64) -> Result<Objective> {
    Ok(loss_objective(seed, None, |f, p, t| losses::bce_loss(&mut f.graph, p, t), 1))
}

fn dice(seed: u64) -> Result<Objective> {
    Ok(loss_objective(seed, None, |f, p, t| losses::dice_loss(&mut f.graph, p, t, 1.0), 1))
}

fn hybrid(seed: u64) -> Result<Objective> {
    Ok(loss_objective(seed, None, |f, p, t| losses::hybrid_loss(&mut f.graph, p, t, 1.0), 1))
}

fn focal(seed: u64) -> Result<Objective> {
    Ok(loss_objective(seed, None, |f, p, t| losses::focal_loss(&mut f.graph, p, t, 2.0, 0.25), 1))
}

fn focal_dice(seed: u64) -> Result<Objective> {
    Ok(loss_objective(seed, Some(LossKind::FocalDice), no_loss, 1))
}

fn multiclass_hybrid(seed: u64) -> Result<Objective> {
    Ok(loss_objective(seed, Some(LossKind::BceDice), no_loss, 3))
}

fn multiclass_focal_dice(seed: u64) -> Result<Objective> {
    Ok(loss_objective(seed, Some(LossKind::FocalDice), no_loss, 3))
}

/// Element-wise and shape operations composed into one scalar.
fn graph_ops(seed: u64) -> Result<Objective> {
    let mut rng = rng(seed);
    let mut store = ParamStore::new();
    store.insert("a", uniform(&[1, 2, 3, 2], -1.0, 1.0, &mut rng));
    store.insert("b", uniform(&[2], 0.5, 1.5, &mut rng));
    let r = uniform(&[1, 2, 3, 2], -1.0, 1.0, &mut rng);
    let r_up = uniform(&[1, 4, 6, 2], -1.0, 1.0, &mut rng);
    Ok(Objective::new(store, move |f| {
        let a = f.param("a")?;
        let b = f.param("b")?;
        let g = &mut f.graph;
        let e = g.exp(a);
        let q = g.div(e, b)?;
        let s = g.sigmoid(a);
        let m = g.mul(q, s)?;
        let d = g.sub(m, a)?;
        let sq = g.mul(a, a)?;
        let sq = g.add_scalar(sq, 0.5);
        let pw = g.powf(sq, 1.5);
        let lg = g.log(pw);
        let n = g.neg(lg);
        let sm = g.softmax(a);
        let sm = g.scale(sm, 3.0);
        let rl = g.relu(a);
        let lk = g.leaky_relu(a, 0.1);
        let cl = g.clamp(a, -2.0, 2.0);
        let acc = [n, sm, rl, lk, cl].into_iter().try_fold(d, |acc, v| g.add(acc, v))?;
        let rv = g.constant(r.clone());
        let w = g.mul(acc, rv)?;
        let up = g.upsample2x(w)?;
        let ru = g.constant(r_up.clone());
        let up = g.mul(up, ru)?;
        let rs = g.reduce_sum(up, 1)?;
        let rm = g.reduce_mean(rs, 1)?;
        let flat = g.reshape(rm, &[2])?;
        let bb = g.mul(flat, b)?;
        let t1 = g.sum_all(bb);
        let t2 = g.mean_all(w);
        g.add(t1, t2)
    }))
}

/// Hybrid loss of the full network on a single-channel input.
fn network(seed: u64) -> Result<Objective> {
    let cfg = NetworkConfig {
        base_filters: 2,
        depth: 2,
        in_channels: 1,
        height: 16,
        width: 16,
        ..NetworkConfig::default()
    };
    let net = ClfSeg::new(cfg)?;
    let mut rng = rng(seed);
    let mut store = net.init_params(seed);
    jitter(&mut store, &mut rng);
    let x = uniform(&[1, 16, 16, 1], 0.0, 1.0, &mut rng);
    let target = Tensor::from_fn(&[1, 16, 16, 1], |i| {
        let (r, c) = (i[1], i[2]);
        if (r as f64 - 8.0).powi(2) + (c as f64 - 7.0).powi(2) < 20.0 {
            1.0
        } else {
            0.0
        }
    });
    let mut obj = Objective::new(store, move |f| {
        let xv = f.input(x.clone());
        let z = net.logits(f, xv)?;
        let t = f.graph.constant(target.clone());
        LossConfig::default().from_logits(&mut f.graph, z, t, 1)
    });
    obj.sample = Some(64);
    Ok(obj)
}

/// Every check of the suite, by name.
pub fn cases() -> Vec<(&'static str, Builder)> {
    vec![
        ("graph_ops", graph_ops as Builder),
        ("conv2d", conv2d),
        ("conv2d_dilated", conv2d_dilated),
        ("conv2d_strided", conv2d_strided),
        ("depthwise_conv2d", depthwise),
        ("separable_conv2d", separable),
        ("batch_norm", batch_norm),
        ("batch_norm_eval", batch_norm_eval),
        ("layer_norm", layer_norm),
        ("leaky_relu", leaky),
        ("fuzzy_module", fuzzy_module),
        ("fuzzy_module_per_channel", fuzzy_module_per_channel),
        ("conv_glu", conv_glu),
        ("midscope", midscope),
        ("widescope", widescope),
        ("separable_branch", separable_chain),
        ("resnet_block", resnet_block),
        ("resnet_paths", resnet_paths),
        ("fuzzy_branch", fuzzy_branch),
        ("fc_module", fc_module),
        ("bce_loss", bce),
        ("dice_loss", dice),
        ("hybrid_loss", hybrid),
        ("focal_loss", focal),
        ("focal_dice_loss", focal_dice),
        ("multiclass_hybrid_loss", multiclass_hybrid),
        ("multiclass_focal_dice_loss", multiclass_focal_dice),
        ("network_depth2_f2", network),
    ]
}

/// Runs one check over `seeds`, keeping the worst error.
pub fn run_case(name: &'static str, build: Builder, seeds: std::ops::Range<u64>) -> Result<CheckReport> {
    let mut report = CheckReport {
        name,
        max_rel_error: 0.0,
        worst: None,
        seeds: 0,
        checked: 0,
        skipped: 0,
    };
    for seed in seeds {
        let obj = build(seed)?;
        let mut pick = rng(seed.wrapping_add(0x5eed));
        let out = obj.check(&mut pick)?;
        if out.max_rel_error() > report.max_rel_error {
            report.max_rel_error = out.max_rel_error();
            report.worst = out.worst;
        }
        report.seeds += 1;
        report.checked += out.checked;
        report.skipped += out.skipped;
    }
    Ok(report)
}

pub fn run_suite(seeds: std::ops::Range<u64>) -> Result<Vec<CheckReport>> {
    cases()
        .into_iter()
        .map(|(name, build)| run_case(name, build, seeds.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("t", Tensor::new(&[1], vec![v]).unwrap());
        s
    }

    #[test]
    fn square_and_exp() {
        let c = [Coord { name: "t".into(), index: 0 }];
        let sq = finite_difference_grad(|p| Ok(p.get("t")?.data()[0].powi(2)), &scalar_store(1.0), &c, FD_EPS).unwrap();
        assert!((sq[0] - 2.0).abs() < 1e-8);
        let ex = finite_difference_grad(|p| Ok(p.get("t")?.data()[0].exp()), &scalar_store(0.0), &c, FD_EPS).unwrap();
        assert!((ex[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(0.0, 0.0, 1e-5), 0.0);
        assert!((rel_error(1.0, 1.1, 1e-5) - 0.1 / 1.1).abs() < 1e-15);
        assert!((rel_error(0.0, 1e-8, 1e-6) - 1e-2).abs() < 1e-15);
    }

    #[test]
    fn every_case_passes_on_one_seed() {
        for (name, build) in cases() {
            let r = run_case(name, build, 0..1).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(r.max_rel_error < 1e-4, "{name}: {}", r.max_rel_error);
        }
    }
}
