use clfseg_core::layers::clamp_sigmas;
use clfseg_core::metrics::{self, BinaryMask};
use clfseg_core::{ClfSeg, NetworkConfig, ParamStore, Tensor};
use clfseg_data::{synth, Sample};
use clfseg_harness::eval;
use clfseg_harness::HarnessError;

fn net(classes: usize) -> (ClfSeg, ParamStore) {
    let cfg = NetworkConfig {
        base_filters: 4,
        depth: 2,
        height: 16,
        width: 16,
        classes,
        ..NetworkConfig::default()
    };
    let m = ClfSeg::new(cfg).unwrap();
    let p = m.init_params(1);
    (m, p)
}

/// Every parameter zero, widths at their floor, head bias `bias`.
fn constant_net(bias: f64) -> (ClfSeg, ParamStore) {
    let (m, mut p) = net(1);
    for (_, t) in p.iter_mut() {
        *t = Tensor::zeros(t.shape());
    }
    clamp_sigmas(&mut p);
    *p.get_mut("head.bias").unwrap() = Tensor::full(&[1], bias);
    (m, p)
}

fn uniform_set(fill: f64) -> Vec<Sample> {
    synth::synth_dataset(3, 16, 4, 0.5)
        .into_iter()
        .map(|s| Sample {
            mask: Tensor::full(&[16, 16, 1], fill),
            ..s
        })
        .collect()
}

#[test]
fn crafted_checkpoints_score_perfectly() {
    let (m, p) = constant_net(8.0);
    let r = eval::evaluate(&m, &p, &uniform_set(1.0)).unwrap();
    assert_eq!((r.summary.dsc, r.summary.iou, r.summary.accuracy), (1.0, 1.0, 1.0));

    let (m, p) = constant_net(-8.0);
    let r = eval::evaluate(&m, &p, &uniform_set(0.0)).unwrap();
    assert_eq!(r.summary.dsc, 1.0);
    assert_eq!(r.summary.hd95, None);
}

#[test]
fn report_matches_recomputation() {
    let (m, p) = net(1);
    let set = synth::synth_dataset(4, 16, 8, 0.5);
    let r = eval::evaluate(&m, &p, &set).unwrap();
    let mut dsc = 0.0;
    for (row, s) in r.rows.iter().zip(&set) {
        assert_eq!(row.id, s.id);
        let pred = BinaryMask::from_tensor(&eval::predict(&m, &p, &s.image).unwrap()).unwrap();
        let gt = BinaryMask::from_tensor(&s.mask).unwrap();
        let c = metrics::confusion(&pred, &gt).unwrap();
        assert_eq!(row.confusion, c);
        assert_eq!(row.hd95, metrics::hd95(&pred, &gt, (1.0, 1.0)).unwrap());
        dsc += c.dsc();
    }
    assert!((r.summary.dsc - dsc / 4.0).abs() < 1e-12);
}

#[test]
fn evaluation_ignores_sample_order() {
    let (m, p) = net(1);
    let set = synth::synth_dataset(5, 16, 3, 0.5);
    let mut rev = set.clone();
    rev.reverse();
    assert_eq!(eval::evaluate(&m, &p, &set).unwrap(), eval::evaluate(&m, &p, &rev).unwrap());
}

#[test]
fn empty_dataset_is_an_error() {
    let (m, p) = net(1);
    assert!(matches!(eval::evaluate(&m, &p, &[]), Err(HarnessError::EmptyDataset)));
}

#[test]
fn multiclass_foreground_is_any_non_background_class() {
    let one_hot = Tensor::from_fn(&[1, 3, 3], |i| match (i[1], i[2]) {
        (0, 0) | (1, 1) => 1.0,
        (2, 2) => 1.0,
        _ => 0.0,
    });
    assert_eq!(eval::foreground(&one_hot).bits(), &[false, true, true]);
    let labels = Tensor::new(&[1, 3, 1], vec![0.0, 2.0, 1.0]).unwrap();
    assert_eq!(eval::foreground(&labels).bits(), &[false, true, true]);

    let (m, p) = net(3);
    let s = &synth::synth_dataset(1, 16, 1, 0.5)[0];
    let labels = eval::predict(&m, &p, &s.image).unwrap();
    assert_eq!(labels.shape(), &[16, 16, 1]);
    assert!(labels.data().iter().all(|&v| v == 0.0 || v == 1.0 || v == 2.0));
}

#[test]
fn activation_maps() {
    let (m, p) = constant_net(0.0);
    let zero = Tensor::zeros(&[16, 16, 3]);
    let stages: Vec<String> = ["enc0", "enc1", "bottleneck", "dec0"].iter().map(|s| s.to_string()).collect();
    let maps = eval::activation_maps(&m, &p, &zero, &stages).unwrap();
    let sizes: Vec<_> = maps.iter().map(|(_, t)| t.shape().to_vec()).collect();
    assert_eq!(sizes, vec![vec![16, 16, 1], vec![8, 8, 1], vec![4, 4, 1], vec![16, 16, 1]]);
    for (_, t) in &maps {
        let first = t.data()[0];
        assert!(t.data().iter().all(|&v| v == first));
    }

    let (m, p) = net(1);
    let img = synth::synth_dataset(1, 16, 2, 0.5).remove(0).image;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let written = eval::export_activations(&m, &p, &img, &stages, a.path()).unwrap();
    eval::export_activations(&m, &p, &img, &stages, b.path()).unwrap();
    for f in &written {
        let name = f.file_name().unwrap();
        assert_eq!(std::fs::read(f).unwrap(), std::fs::read(b.path().join(name)).unwrap());
    }
    let (_, t) = &eval::activation_maps(&m, &p, &img, &stages[..1]).unwrap()[0];
    let lo = t.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!((lo, hi), (0.0, 1.0));

    let err = eval::activation_maps(&m, &p, &img, &["nope".to_string()]).unwrap_err();
    assert!(err.to_string().contains("enc0"), "{err}");
}
