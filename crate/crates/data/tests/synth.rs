use clfseg_data::io;
use clfseg_data::synth::{self, MAX_FOREGROUND, MID_DIFFICULTY, MIN_FOREGROUND};

#[test]
fn easy_set_is_solved_by_threshold() {
    let set = synth::synth_dataset(64, 64, 11, 0.0);
    let dsc = synth::baseline_dsc(&set);
    assert!(dsc > 0.9, "baseline dsc {dsc}");
}

#[test]
fn mid_set_defeats_threshold() {
    let set = synth::synth_dataset(64, 64, 7, MID_DIFFICULTY);
    let dsc = synth::baseline_dsc(&set);
    assert!(dsc < 0.9, "baseline dsc {dsc}");
}

#[test]
fn foreground_fraction_bounded() {
    for s in synth::synth_dataset(1000, 32, 3, MID_DIFFICULTY) {
        let f = s.foreground_fraction();
        assert!((MIN_FOREGROUND..=MAX_FOREGROUND).contains(&f), "{} {f}", s.id);
    }
}

#[test]
fn samples_depend_only_on_seed_and_index() {
    let a = synth::synth_dataset(6, 32, 5, 0.3);
    assert_eq!(a, synth::synth_dataset(6, 32, 5, 0.3));
    assert_eq!(a[4], synth::synth_sample(4, 32, 5, 0.3));
    assert_ne!(a[0].mask, synth::synth_dataset(1, 32, 6, 0.3)[0].mask);
    for s in &a {
        assert_eq!(s.image.shape(), &[32, 32, 3]);
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn written_datasets_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    io::write_dataset(a.path(), &synth::synth_dataset(4, 32, 1, 0.5)).unwrap();
    io::write_dataset(b.path(), &synth::synth_dataset(4, 32, 1, 0.5)).unwrap();
    let ids = io::list_ids(a.path()).unwrap();
    assert_eq!(ids.len(), 4);
    assert_eq!(ids, io::list_ids(b.path()).unwrap());
    for id in ids {
        for sub in ["images", "masks"] {
            let p = format!("{sub}/{id}.png");
            assert_eq!(std::fs::read(a.path().join(&p)).unwrap(), std::fs::read(b.path().join(&p)).unwrap());
        }
    }
}
