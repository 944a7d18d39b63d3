//! The `clfseg` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use clfseg_core::flops::count_flops;
use clfseg_core::gradcheck;
use clfseg_core::{ClfSeg, NetworkConfig};
use clfseg_data::io::{self, MaskKind};
use clfseg_data::synth;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::error::{io_err, HarnessError, Result};
use crate::eval;
use crate::train::{self, Control};

/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "clfseg", version, about = "Fuzzy-convolutional segmentation: train, evaluate, inspect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory for train.log, checkpoints and the split manifest.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint saved for the same network.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `max_steps` from the config.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Evaluate a checkpoint on a directory of image/mask pairs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the per-image report (tab-separated) here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Reject the checkpoint unless it matches this config's network.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write a predicted mask PNG for every input image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = synth::MID_DIFFICULTY)]
        difficulty: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic forward cost of 1-, 2- and 3-path configurations.
    Flops {
        #[arg(long, value_delimiter = ',', default_value = "17")]
        filters: Vec<usize>,
        #[arg(long, default_value_t = 352)]
        size: usize,
        #[arg(long, default_value_t = 5)]
        depth: usize,
        /// Take every other network field from this config file.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare reverse-mode gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        seeds: u64,
        /// Run only the named case.
        #[arg(long)]
        case: Option<String>,
    },
    /// Write channel-mean activation maps of named stages.
    ExportActivations {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "stage", required = true)]
        stages: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code: 0 on success, 1 on failure, 2 on usage
/// errors.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                2
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    match execute(cli.command, out) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn load_model(path: &std::path::Path) -> Result<(ClfSeg, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    Ok((ClfSeg::new(ckpt.network.clone())?, ckpt))
}

fn say(out: &mut dyn Write, text: std::fmt::Arguments<'_>) {
    let _ = out.write_fmt(text);
    let _ = out.write_all(b"\n");
}

/// `Ok(false)` signals a check that ran but failed.
fn execute(cmd: Command, out: &mut dyn Write) -> Result<bool> {
    match cmd {
        Command::Train {
            config,
            out: dir,
            resume,
            max_steps,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(m) = max_steps {
                cfg.max_steps = m;
            }
            let data = train::load_datasets(&cfg)?;
            let resume = resume.as_deref().map(Checkpoint::load).transpose()?;
            let outcome = train::train(&cfg, &data, Some(&dir), resume, &mut |_| Control::Continue)?;
            for row in &outcome.log {
                say(out, format_args!("{}", row.to_line()));
            }
            say(
                out,
                format_args!(
                    "steps {} epochs {} best val DSC {}",
                    outcome.trainer.step, outcome.trainer.epoch, outcome.trainer.best_val_dsc
                ),
            );
            Ok(true)
        }
        Command::Eval {
            checkpoint,
            data,
            report,
            config,
        } => {
            let (model, ckpt) = load_model(&checkpoint)?;
            if let Some(c) = config {
                ckpt.check_network(&TrainConfig::load(&c)?.network())?;
            }
            let net = model.config();
            let samples = io::load_dir(&data, (net.height, net.width), net.in_channels, MaskKind::from_classes(net.classes))?;
            let r = eval::evaluate(&model, &ckpt.params, &samples)?;
            if let Some(p) = report {
                std::fs::write(&p, r.to_tsv()).map_err(io_err(&p))?;
            }
            say(out, format_args!("{}", r.to_kv().trim_end()));
            Ok(true)
        }
        Command::Predict {
            checkpoint,
            out: dir,
            inputs,
        } => {
            let (model, ckpt) = load_model(&checkpoint)?;
            for p in eval::predict_files(&model, &ckpt.params, &inputs, &dir)? {
                say(out, format_args!("{}", p.display()));
            }
            Ok(true)
        }
        Command::Synth {
            count,
            size,
            seed,
            difficulty,
            out: dir,
        } => {
            if !(0.0..=1.0).contains(&difficulty) {
                return Err(HarnessError::Invalid(format!("difficulty must lie in [0, 1], got {difficulty}")));
            }
            let samples = synth::synth_dataset(count, size, seed, difficulty);
            io::write_dataset(&dir, &samples)?;
            say(out, format_args!("wrote {count} samples to {}", dir.display()));
            Ok(true)
        }
        Command::Flops {
            filters,
            size,
            depth,
            config,
        } => {
            let base = match config {
                Some(p) => TrainConfig::load(&p)?.network(),
                None => NetworkConfig {
                    height: size,
                    width: size,
                    depth,
                    ..Default::default()
                },
            };
            say(out, format_args!("filters\tpaths\tconv_macs\ttotal_ops\tparams"));
            let mut ok = true;
            for &f in &filters {
                let mut totals = [0u64; 3];
                let mut params = [0u64; 3];
                for paths in 1..=3 {
                    let cfg = NetworkConfig {
                        base_filters: f,
                        resnet_paths: paths,
                        ..base.clone()
                    };
                    let r = count_flops(&cfg)?;
                    totals[paths - 1] = r.total();
                    params[paths - 1] = r.params;
                    say(out, format_args!("{f}\t{paths}\t{}\t{}\t{}", r.conv_macs, r.total(), r.params));
                }
                let ratio = totals[0] as f64 / totals[2] as f64;
                say(out, format_args!("filters {f}: 1-path / 3-path ops ratio {ratio:.4}"));
                ok &= params[0] < params[2];
            }
            Ok(ok)
        }
        Command::Gradcheck { seeds, case } => {
            let cases: Vec<_> = gradcheck::cases()
                .into_iter()
                .filter(|(n, _)| case.as_deref().is_none_or(|c| c == *n))
                .collect();
            if cases.is_empty() {
                let names: Vec<_> = gradcheck::cases().into_iter().map(|(n, _)| n).collect();
                return Err(HarnessError::Invalid(format!(
                    "unknown case `{}`; available: {}",
                    case.unwrap_or_default(),
                    names.join(", ")
                )));
            }
            let mut worst: f64 = 0.0;
            for (name, build) in cases {
                let r = gradcheck::run_case(name, build, 0..seeds)?;
                say(
                    out,
                    format_args!(
                        "{name:<24} max rel error {:.3e}  ({} coords, {} skipped at kinks)",
                        r.max_rel_error, r.checked, r.skipped
                    ),
                );
                worst = worst.max(r.max_rel_error);
            }
            say(out, format_args!("max relative error {worst:.3e}"));
            Ok(worst < GRADCHECK_TOLERANCE)
        }
        Command::ExportActivations {
            checkpoint,
            image,
            stages,
            out: dir,
        } => {
            let (model, ckpt) = load_model(&checkpoint)?;
            let net = model.config();
            let img = io::load_image(&image, (net.height, net.width), net.in_channels)?;
            for p in eval::export_activations(&model, &ckpt.params, &img, &stages, &dir)? {
                say(out, format_args!("{}", p.display()));
            }
            Ok(true)
        }
    }
}
