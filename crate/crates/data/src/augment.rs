//! Flips, colour jitter and a small affine warp, drawn from a seeded rng.

use clfseg_core::Tensor;
use rand::Rng;

use crate::io::Sample;

pub const JITTER_RANGE: (f64, f64) = (0.8, 1.2);
pub const MAX_ROTATION_DEG: f64 = 15.0;
pub const MAX_SHIFT: f64 = 0.05;

/// One concrete draw of every augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    pub brightness: f64,
    pub contrast: f64,
    /// Radians, counter-clockwise.
    pub angle: f64,
    /// Translation as a fraction of (height, width).
    pub shift: (f64, f64),
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            hflip: false,
            vflip: false,
            brightness: 1.0,
            contrast: 1.0,
            angle: 0.0,
            shift: (0.0, 0.0),
        }
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        let (lo, hi) = JITTER_RANGE;
        let max_angle = MAX_ROTATION_DEG.to_radians();
        Self {
            hflip: rng.gen_bool(0.5),
            vflip: rng.gen_bool(0.5),
            brightness: rng.gen_range(lo..=hi),
            contrast: rng.gen_range(lo..=hi),
            angle: rng.gen_range(-max_angle..=max_angle),
            shift: (rng.gen_range(-MAX_SHIFT..=MAX_SHIFT), rng.gen_range(-MAX_SHIFT..=MAX_SHIFT)),
        }
    }

    fn is_rigid_identity(&self) -> bool {
        self.angle == 0.0 && self.shift == (0.0, 0.0)
    }

    /// Source coordinates (row, col) read for output pixel `(y, x)` of an
    /// `h×w` warp. Rotation is about the image centre.
    pub fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (f64, f64) {
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let dy = y as f64 - cy - self.shift.0 * h as f64;
        let dx = x as f64 - cx - self.shift.1 * w as f64;
        let (s, c) = self.angle.sin_cos();
        // inverse rotation
        (cy + c * dy + s * dx, cx - s * dy + c * dx)
    }
}

/// Draws parameters from `rng` and applies them.
pub fn augment(sample: &Sample, rng: &mut impl Rng) -> Sample {
    apply(sample, &AugmentParams::sample(rng))
}

pub fn apply(sample: &Sample, p: &AugmentParams) -> Sample {
    let mut image = flip(&sample.image, p.hflip, p.vflip);
    let mut mask = flip(&sample.mask, p.hflip, p.vflip);
    jitter(&mut image, p.brightness, p.contrast);
    if !p.is_rigid_identity() {
        image = warp_bilinear(&image, p);
        mask = warp_nearest(&mask, p);
    }
    Sample {
        id: sample.id.clone(),
        image,
        mask,
    }
}

pub fn flip(t: &Tensor, horizontal: bool, vertical: bool) -> Tensor {
    if !horizontal && !vertical {
        return t.clone();
    }
    let s = t.shape();
    let (h, w) = (s[0], s[1]);
    Tensor::from_fn(s, |i| {
        let y = if vertical { h - 1 - i[0] } else { i[0] };
        let x = if horizontal { w - 1 - i[1] } else { i[1] };
        t.at(&[y, x, i[2]])
    })
}

/// Scales contrast about the image mean, then brightness, then clamps.
pub fn jitter(t: &mut Tensor, brightness: f64, contrast: f64) {
    if brightness == 1.0 && contrast == 1.0 {
        return;
    }
    let mean = t.mean();
    for v in t.data_mut() {
        *v = (((*v - mean) * contrast + mean) * brightness).clamp(0.0, 1.0);
    }
}

/// Out-of-bounds reads contribute zero.
fn warp_bilinear(t: &Tensor, p: &AugmentParams) -> Tensor {
    let s = t.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros(s);
    let data = t.data();
    let o = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = p.source(y, x, h, w);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let taps = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x0 + 1.0, (1.0 - fy) * fx),
                (y0 + 1.0, x0, fy * (1.0 - fx)),
                (y0 + 1.0, x0 + 1.0, fy * fx),
            ];
            let base = (y * w + x) * c;
            for (ty, tx, wt) in taps {
                if wt == 0.0 || ty < 0.0 || tx < 0.0 || ty >= h as f64 || tx >= w as f64 {
                    continue;
                }
                let src = (ty as usize * w + tx as usize) * c;
                for ch in 0..c {
                    o[base + ch] += wt * data[src + ch];
                }
            }
        }
    }
    out
}

/// Out-of-bounds pixels become background (class 0).
fn warp_nearest(t: &Tensor, p: &AugmentParams) -> Tensor {
    let s = t.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros(s);
    let data = t.data();
    let o = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = p.source(y, x, h, w);
            let (ry, rx) = (sy.round(), sx.round());
            let base = (y * w + x) * c;
            if ry < 0.0 || rx < 0.0 || ry >= h as f64 || rx >= w as f64 {
                if c > 1 {
                    o[base] = 1.0;
                }
                continue;
            }
            let src = (ry as usize * w + rx as usize) * c;
            o[base..base + c].copy_from_slice(&data[src..src + c]);
        }
    }
    out
}
