//! Inference: metric reports, mask prediction and activation maps.

use std::path::{Path, PathBuf};

use clfseg_core::metrics::{BinaryMask, ImageMetrics, MetricReport};
use clfseg_core::net::predict_mask;
use clfseg_core::{ClfSeg, Forward, Mode, ParamStore, Tensor};
use clfseg_data::io;
use clfseg_data::Sample;

use crate::error::{HarnessError, Result};

fn batch_of_one(image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    Ok(image.reshape(&[1, s[0], s[1], s[2]])?)
}

/// Eval-mode logits `1×H×W×K` for one `H×W×C` image.
pub fn logits(model: &ClfSeg, params: &ParamStore, image: &Tensor) -> Result<Tensor> {
    let mut f = Forward::new(params, Mode::Eval);
    let x = f.input(batch_of_one(image)?);
    let y = model.logits(&mut f, x)?;
    Ok(f.value(y).clone())
}

/// Hard label map `H×W×1` (0/1, or class index).
pub fn predict(model: &ClfSeg, params: &ParamStore, image: &Tensor) -> Result<Tensor> {
    let z = logits(model, params, image)?;
    let m = predict_mask(&z, model.config().classes)?;
    let s = m.shape().to_vec();
    Ok(m.reshape(&[s[1], s[2], 1])?)
}

/// Foreground of a label map or of a (binary or one-hot) ground-truth mask:
/// everything that is not class 0.
pub fn foreground(mask: &Tensor) -> BinaryMask {
    let s = mask.shape();
    let (h, w, k) = (s[0], s[1], s[2]);
    let d = mask.data();
    if k == 1 {
        BinaryMask::from_fn(h, w, |r, c| d[r * w + c] >= 0.5)
    } else {
        BinaryMask::from_fn(h, w, |r, c| {
            let px = &d[(r * w + c) * k..(r * w + c + 1) * k];
            px[1..].iter().any(|&v| v > px[0])
        })
    }
}

/// Per-image metrics of foreground-vs-background, rows sorted by id so the
/// report does not depend on the order of `samples`.
pub fn evaluate(model: &ClfSeg, params: &ParamStore, samples: &[Sample]) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    let mut rows = samples
        .iter()
        .map(|s| {
            let pred = foreground(&predict(model, params, &s.image)?);
            Ok(ImageMetrics::compute(s.id.clone(), &pred, &foreground(&s.mask), (1.0, 1.0))?)
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(MetricReport::from_rows(rows)?)
}

/// Writes `out_dir/<stem>.png` holding the predicted mask of every input
/// image (binary masks as 0/255, label maps as grey level = class).
pub fn predict_files(model: &ClfSeg, params: &ParamStore, inputs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let cfg = model.config();
    let mut written = Vec::new();
    for path in inputs {
        let image = io::load_image(path, (cfg.height, cfg.width), cfg.in_channels)?;
        let labels = predict(model, params, &image)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let out = out_dir.join(format!("{stem}.png"));
        if cfg.classes == 1 {
            io::save_mask(&labels, &out)?;
        } else {
            io::save_labels(&labels, &out)?;
        }
        written.push(out);
    }
    Ok(written)
}

/// Channel-mean activation of each named stage for one image, min-max
/// normalised to `[0, 1]` (all zeros when the map is constant).
pub fn activation_maps(model: &ClfSeg, params: &ParamStore, image: &Tensor, stages: &[String]) -> Result<Vec<(String, Tensor)>> {
    let mut f = Forward::new(params, Mode::Eval);
    let x = f.input(batch_of_one(image)?);
    model.logits(&mut f, x)?;
    let available: Vec<String> = f.taps().iter().map(|(n, _)| n.clone()).collect();
    stages
        .iter()
        .map(|name| {
            let v = f
                .taps()
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| HarnessError::UnknownStage {
                    name: name.clone(),
                    available: available.clone(),
                })?;
            let t = f.value(v);
            let s = t.shape();
            let (h, w, c) = (s[1], s[2], s[3]);
            let mean: Vec<f64> = t.data().chunks(c).map(|p| p.iter().sum::<f64>() / c as f64).collect();
            let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let norm = mean
                .iter()
                .map(|&v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
                .collect();
            Ok((name.clone(), Tensor::new(&[h, w, 1], norm)?))
        })
        .collect()
}

/// Writes `out_dir/<stage>.png` for each requested stage.
pub fn export_activations(
    model: &ClfSeg,
    params: &ParamStore,
    image: &Tensor,
    stages: &[String],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let maps = activation_maps(model, params, image, stages)?;
    maps.into_iter()
        .map(|(name, t)| {
            let p = out_dir.join(format!("{name}.png"));
            io::save_image(&t, &p)?;
            Ok(p)
        })
        .collect()
}
