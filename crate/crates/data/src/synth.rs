//! Synthetic polyp-like task: bright soft-edged ellipses on a textured,
//! unevenly lit background.

use clfseg_core::metrics::{self, BinaryMask};
use clfseg_core::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::io::Sample;

pub const MIN_FOREGROUND: f64 = 0.02;
pub const MAX_FOREGROUND: f64 = 0.4;
pub const MID_DIFFICULTY: f64 = 0.5;

const TINT_BG: [f64; 3] = [1.0, 0.78, 0.72];
const TINT_FG: [f64; 3] = [1.0, 0.85, 0.7];
/// Width of the blended rim in pixels.
const EDGE_SOFTNESS: f64 = 0.6;

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    /// Normalised radius: `<= 1` inside.
    fn radius(&self, y: f64, x: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt()
    }

    /// Blend weight; 0.5 on the mask boundary.
    fn weight(&self, y: f64, x: f64) -> f64 {
        let r = self.radius(y, x);
        let dist = (1.0 - r) * self.rx.min(self.ry);
        1.0 / (1.0 + (-dist / EDGE_SOFTNESS).exp())
    }
}

fn draw_ellipses(rng: &mut ChaCha8Rng, size: usize) -> Vec<Ellipse> {
    let s = size as f64;
    let n = rng.gen_range(1..=3);
    (0..n)
        .map(|_| Ellipse {
            cy: rng.gen_range(0.2 * s..0.8 * s),
            cx: rng.gen_range(0.2 * s..0.8 * s),
            ry: rng.gen_range(0.08 * s..0.22 * s),
            rx: rng.gen_range(0.08 * s..0.22 * s),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
        })
        .collect()
}

fn render_mask(ellipses: &[Ellipse], size: usize) -> Vec<bool> {
    let mut m = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            m[y * size + x] = ellipses.iter().any(|e| e.radius(y as f64, x as f64) <= 1.0);
        }
    }
    m
}

/// Renders sample `index` of the set identified by `seed`.
pub fn synth_sample(index: usize, size: usize, seed: u64, difficulty: f64) -> Sample {
    let d = difficulty.clamp(0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);

    let (ellipses, mask) = loop {
        let e = draw_ellipses(&mut rng, size);
        let m = render_mask(&e, size);
        let frac = m.iter().filter(|&&b| b).count() as f64 / (size * size) as f64;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
            break (e, m);
        }
    };

    let contrast = 0.35 * (1.0 - 0.6 * d);
    let gradient = 0.3 * d;
    let texture = 0.02 + 0.06 * d;
    let noise = 0.01 + 0.08 * d;

    let base = rng.gen_range(0.3..0.4);
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let (gy, gx) = (theta.sin(), theta.cos());
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.1..0.6),
                rng.gen_range(0.1..0.6),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();

    let s = size as f64;
    let mut image = Tensor::zeros(&[size, size, 3]);
    let data = image.data_mut();
    for y in 0..size {
        for x in 0..size {
            let (yf, xf) = (y as f64, x as f64);
            let ramp = ((yf / s - 0.5) * gy + (xf / s - 0.5) * gx) * 2.0 * gradient;
            let tex: f64 = waves.iter().map(|(fy, fx, ph)| (fy * yf + fx * xf + ph).sin()).sum::<f64>() / 3.0;
            let bg = base + ramp + texture * tex;
            let w = ellipses.iter().map(|e| e.weight(yf, xf)).fold(0.0, f64::max);
            for ch in 0..3 {
                let bgc = bg * TINT_BG[ch];
                let fgc = (bg + contrast) * TINT_FG[ch];
                let n: f64 = rng.gen_range(-1.0..1.0) * noise * 3f64.sqrt();
                data[(y * size + x) * 3 + ch] = ((1.0 - w) * bgc + w * fgc + n).clamp(0.0, 1.0);
            }
        }
    }
    let mask = Tensor::new(&[size, size, 1], mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
        .expect("mask buffer matches");
    Sample {
        id: format!("synth_{seed}_{index:05}"),
        image,
        mask,
    }
}

/// `count` samples, each reproducible from `(seed, index)` alone.
pub fn synth_dataset(count: usize, size: usize, seed: u64, difficulty: f64) -> Vec<Sample> {
    (0..count).map(|i| synth_sample(i, size, seed, difficulty)).collect()
}

/// Thresholds the channel-mean intensity halfway between its minimum and
/// maximum.
pub fn threshold_baseline(image: &Tensor) -> BinaryMask {
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let gray: Vec<f64> = image.data().chunks(c).map(|p| p.iter().sum::<f64>() / c as f64).collect();
    let lo = gray.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = gray.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let t = (lo + hi) / 2.0;
    BinaryMask::from_fn(h, w, |y, x| gray[y * w + x] >= t)
}

/// Mean per-image Dice of [`threshold_baseline`] over binary samples.
pub fn baseline_dsc(samples: &[Sample]) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|s| {
            let gt = BinaryMask::from_tensor(&s.mask).expect("binary sample mask");
            metrics::confusion(&threshold_baseline(&s.image), &gt)
                .expect("same extent")
                .dsc()
        })
        .sum();
    total / samples.len().max(1) as f64
}
