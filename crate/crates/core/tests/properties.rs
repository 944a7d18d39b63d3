use clfseg_core::graph::Padding;
use clfseg_core::layers::{clamp_sigmas, FuzzyModule, Layer};
use clfseg_core::losses;
use clfseg_core::metrics::{self, BinaryMask};
use clfseg_core::net::ConvChain;
use clfseg_core::{Forward, Graph, Mode, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn mask(h: usize, w: usize, seed: u64, density: f64) -> BinaryMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(density))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn broadcast_add_commutes(h in 1usize..5, w in 1usize..5, c in 1usize..4, seed in any::<u64>()) {
        let mut g = Graph::new();
        let a = g.constant(random(&[2, h, w, c], seed));
        let b = g.constant(random(&[c], seed ^ 1));
        let ab = g.add(a, b).unwrap();
        let ba = g.add(b, a).unwrap();
        prop_assert_eq!(g.value(ab), g.value(ba));
        prop_assert_eq!(g.value(ab).shape(), &[2, h, w, c]);
    }

    #[test]
    fn same_padding_keeps_extent(
        h in 1usize..9, w in 1usize..9, k in prop::sample::select(vec![1usize, 3, 5]),
        d in 1usize..4, cin in 1usize..3, cout in 1usize..3, seed in any::<u64>(),
    ) {
        let mut g = Graph::new();
        let x = g.constant(random(&[1, h, w, cin], seed));
        let kk = g.constant(random(&[k, k, cin, cout], seed ^ 2));
        let y = g.conv2d(x, kk, None, 1, d, Padding::Same).unwrap();
        prop_assert_eq!(g.shape(y), &[1, h, w, cout]);
    }

    #[test]
    fn strided_same_padding_rounds_up(h in 1usize..12, w in 1usize..12, s in 1usize..4, seed in any::<u64>()) {
        let mut g = Graph::new();
        let x = g.constant(random(&[1, h, w, 1], seed));
        let kk = g.constant(random(&[3, 3, 1, 1], seed ^ 3));
        let y = g.conv2d(x, kk, None, s, 1, Padding::Same).unwrap();
        prop_assert_eq!(g.shape(y), &[1, h.div_ceil(s), w.div_ceil(s), 1]);
    }

    #[test]
    fn depthwise_channels_are_isolated(c in 2usize..5, target in 0usize..5, seed in any::<u64>()) {
        let target = target % c;
        let x = random(&[1, 5, 5, c], seed);
        let k = random(&[3, 3, c], seed ^ 4);
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let kv = g.constant(k.clone());
            let y = g.depthwise_conv2d(xv, kv, None).unwrap();
            g.value(y).clone()
        };
        let base = run(&x);
        let mut bumped = x.clone();
        for r in 0..5 {
            for col in 0..5 {
                let v = bumped.at(&[0, r, col, target]);
                bumped.set(&[0, r, col, target], v + 1.0);
            }
        }
        let moved = run(&bumped);
        for (i, (a, b)) in base.data().iter().zip(moved.data()).enumerate() {
            if i % c != target {
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>()) {
        let chain = ConvChain::widescope("w", 2, 3);
        let mut store = ParamStore::new();
        chain.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        let x = random(&[2, 6, 6, 2], seed);
        let run = || {
            let mut f = Forward::new(&store, Mode::Train);
            let xv = f.input(x.clone());
            let y = chain.forward(&mut f, xv).unwrap();
            f.value(y).clone()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn branch_blocks_preserve_spatial_size(h in 1usize..8, w in 1usize..8, seed in any::<u64>()) {
        let blocks = [
            ConvChain::midscope("m", 2, 3),
            ConvChain::widescope("w", 2, 3),
            ConvChain::separable("s", 2, 3, 5).unwrap(),
        ];
        for b in &blocks {
            let mut store = ParamStore::new();
            b.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
            let mut f = Forward::new(&store, Mode::Train);
            let xv = f.input(random(&[2, h, w, 2], seed));
            let y = b.forward(&mut f, xv).unwrap();
            prop_assert_eq!(f.value(y).shape(), &[2, h, w, 3]);
        }
    }

    #[test]
    fn fuzzy_output_in_unit_interval(
        n in 1usize..5, c in 1usize..4, channel_mean in any::<bool>(),
        scale in 0.1f64..100.0, seed in any::<u64>(),
    ) {
        let layer = FuzzyModule { name: "fz".into(), height: 2, width: 3, channels: c, sets: n, channel_mean };
        let mut store = ParamStore::new();
        layer.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut f = Forward::new(&store, Mode::Train);
        let x = random(&[2, 2, 3, c], seed).map(|v| v * scale);
        let xv = f.input(x);
        let y = layer.forward(&mut f, xv).unwrap();
        prop_assert_eq!(f.value(y).shape(), &[2, 2, 3, layer.out_channels()]);
        prop_assert!(f.value(y).data().iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn sigma_clamp_never_yields_nan(values in prop::collection::vec(-10.0f64..10.0, 3), seed in any::<u64>()) {
        let layer = FuzzyModule { name: "fz".into(), height: 1, width: 2, channels: 2, sets: 3, channel_mean: true };
        let mut store = ParamStore::new();
        layer.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut sig = values.clone();
        sig[0] = f64::NAN;
        *store.get_mut("fz.sigma").unwrap() = Tensor::new(&[1, 1, 1, 3, 1], sig).unwrap();
        clamp_sigmas(&mut store);
        prop_assert!(store.get("fz.sigma").unwrap().data().iter().all(|&s| s >= 1e-3));
        let mut f = Forward::new(&store, Mode::Train);
        let xv = f.input(random(&[1, 1, 2, 2], seed));
        let y = layer.forward(&mut f, xv).unwrap();
        prop_assert!(f.value(y).all_finite());
    }

    #[test]
    fn overlap_metrics_bounded(h in 1usize..12, w in 1usize..12, dp in 0.0f64..1.0, dg in 0.0f64..1.0, seed in any::<u64>()) {
        let p = mask(h, w, seed, dp);
        let g = mask(h, w, seed ^ 5, dg);
        let c = metrics::confusion(&p, &g).unwrap();
        prop_assert_eq!(c.total() as usize, h * w);
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        prop_assert!(unit(c.dsc()) && unit(c.iou()) && unit(c.accuracy()));
        prop_assert!(c.precision().is_none_or(unit) && c.recall().is_none_or(unit));
        prop_assert!((c.iou() - c.dsc() / (2.0 - c.dsc())).abs() < 1e-12);
    }

    #[test]
    fn hd95_symmetric_and_zero_on_self(h in 1usize..14, w in 1usize..14, seed in any::<u64>()) {
        let a = mask(h, w, seed, 0.3);
        let b = mask(h, w, seed ^ 6, 0.3);
        prop_assert_eq!(metrics::hd95(&a, &b, (1.0, 1.0)).unwrap(), metrics::hd95(&b, &a, (1.0, 1.0)).unwrap());
        if !a.is_empty() {
            prop_assert_eq!(metrics::hd95(&a, &a, (1.0, 1.0)).unwrap(), Some(0.0));
        }
    }

    #[test]
    fn thresholding_is_consistent(h in 1usize..10, w in 1usize..10, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probs = Tensor::from_fn(&[h, w, 1], |_| if rng.gen_bool(0.1) { 0.5 } else { rng.gen_range(0.0..1.0) });
        let hard = probs.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        let gt = mask(h, w, seed ^ 7, 0.4);
        let a = metrics::confusion(&BinaryMask::threshold(&probs, 0.5).unwrap(), &gt).unwrap();
        let b = metrics::confusion(&BinaryMask::from_tensor(&hard).unwrap(), &gt).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn losses_are_bounded_below(seed in any::<u64>(), smooth in 0.1f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_fn(&[2, 3, 3, 1], |_| rng.gen_range(0.0..1.0)));
        let t = g.constant(Tensor::from_fn(&[2, 3, 3, 1], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }));
        let bce = losses::bce_loss(&mut g, p, t).unwrap();
        let dice = losses::dice_loss(&mut g, p, t, smooth).unwrap();
        let focal = losses::focal_loss(&mut g, p, t, 2.0, 0.25).unwrap();
        prop_assert!(g.value(bce).item() >= 0.0);
        prop_assert!((0.0..=1.0).contains(&g.value(dice).item()));
        prop_assert!(g.value(focal).item() >= 0.0);
    }
}
