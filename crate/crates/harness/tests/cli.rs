use std::path::Path;
use std::process::Command;

use clfseg_harness::cli;
use clfseg_harness::config::TrainConfig;

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn clfseg(args: &[&str]) -> Out {
    let (mut o, mut e) = (Vec::new(), Vec::new());
    let code = cli::run(std::iter::once("clfseg").chain(args.iter().copied()), &mut o, &mut e);
    Out {
        code,
        stdout: String::from_utf8(o).unwrap(),
        stderr: String::from_utf8(e).unwrap(),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["images", "masks"] {
        let mut names: Vec<_> = std::fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            out.push((format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()), std::fs::read(p).unwrap()));
        }
    }
    out
}

#[test]
fn usage_errors_and_help() {
    let r = clfseg(&["train"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("--config"), "{}", r.stderr);
    assert_eq!(clfseg(&["frobnicate"]).code, 2);
    let r = clfseg(&["--help"]);
    assert_eq!(r.code, 0);
    assert!(r.stdout.contains("gradcheck"));
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_clfseg");
    assert_eq!(Command::new(bin).arg("--version").status().unwrap().code(), Some(0));
    assert_eq!(Command::new(bin).arg("eval").status().unwrap().code(), Some(2));
    let missing = Command::new(bin)
        .args(["eval", "--checkpoint", "/nonexistent/x.ckpt", "--data", "/nonexistent"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error: "));
}

#[test]
fn flops_reports_the_path_ratio() {
    let r = clfseg(&["flops", "--filters", "17,24"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let ratios: Vec<f64> = r
        .stdout
        .lines()
        .filter_map(|l| l.split("ratio ").nth(1))
        .map(|v| v.trim().parse().unwrap())
        .collect();
    assert_eq!(ratios.len(), 2);
    assert!(ratios.iter().all(|&v| v > 0.0 && v <= 0.75), "{ratios:?}");
    assert_eq!(r.stdout.lines().count(), 1 + 2 * 4);
}

#[test]
fn synth_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        let r = clfseg(&["synth", "--count", "3", "--size", "16", "--seed", "9", "--out", s(d)]);
        assert_eq!(r.code, 0, "{}", r.stderr);
    }
    let ta = tree(a.path());
    assert_eq!(ta.len(), 6);
    assert_eq!(ta, tree(b.path()));
    assert_eq!(clfseg(&["synth", "--count", "1", "--difficulty", "2", "--out", s(a.path())]).code, 1);
}

#[test]
fn gradcheck_single_case() {
    let r = clfseg(&["gradcheck", "--case", "conv2d", "--seeds", "2"]);
    assert_eq!(r.code, 0, "{}{}", r.stdout, r.stderr);
    assert!(r.stdout.contains("max relative error"));
    let r = clfseg(&["gradcheck", "--case", "nope"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("conv2d"));
}

#[test]
fn train_eval_predict_export() {
    let work = tempfile::tempdir().unwrap();
    let w = work.path();
    let cfg = TrainConfig {
        base_filters: 4,
        depth: 2,
        height: 16,
        width: 16,
        epochs: 2,
        synth_count: 4,
        synth_val_count: 2,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    cfg.save(&w.join("cfg.toml")).unwrap();
    let run_dir = w.join("run");
    let r = clfseg(&["train", "--config", s(&w.join("cfg.toml")), "--out", s(&run_dir)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.contains("best val DSC"));
    let ckpt = run_dir.join("best.ckpt");

    let data = w.join("data");
    assert_eq!(clfseg(&["synth", "--count", "2", "--size", "16", "--out", s(&data)]).code, 0);
    let report = w.join("report.tsv");
    let r = clfseg(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--report", s(&report), "--config", s(&w.join("cfg.toml"))]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.contains("dsc"), "{}", r.stdout);
    let tsv = std::fs::read_to_string(&report).unwrap();
    assert_eq!(tsv.lines().count(), 4);
    assert!(tsv.lines().last().unwrap().starts_with("mean\t"));

    let other = TrainConfig { base_filters: 6, ..cfg.clone() };
    other.save(&w.join("other.toml")).unwrap();
    let r = clfseg(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--config", s(&w.join("other.toml"))]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("base_filters: 4 != 6"), "{}", r.stderr);

    let img = std::fs::read_dir(data.join("images")).unwrap().next().unwrap().unwrap().path();
    let pred = w.join("pred");
    let r = clfseg(&["predict", "--checkpoint", s(&ckpt), "--out", s(&pred), s(&img)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(std::fs::read_dir(&pred).unwrap().count(), 1);

    let act = w.join("act");
    let r = clfseg(&["export-activations", "--checkpoint", s(&ckpt), "--image", s(&img), "--stage", "enc0", "--stage", "bottleneck", "--out", s(&act)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(act.join("enc0.png").exists() && act.join("bottleneck.png").exists());
    let r = clfseg(&["export-activations", "--checkpoint", s(&ckpt), "--image", s(&img), "--stage", "enc9", "--out", s(&act)]);
    assert_eq!(r.code, 1);

    let resumed = clfseg(&["train", "--config", s(&w.join("other.toml")), "--out", s(&w.join("r2")), "--resume", s(&ckpt)]);
    assert_eq!(resumed.code, 1);
}
