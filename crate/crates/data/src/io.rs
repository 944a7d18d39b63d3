//! PNG image/mask pairs and the on-disk dataset layout
//! (`images/<id>.png`, `masks/<id>.png`).

use std::fs;
use std::path::{Path, PathBuf};

use clfseg_core::Tensor;
use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{DataError, Result};

/// Mask pixels strictly above this 8-bit value are foreground.
pub const MASK_THRESHOLD: u8 = 127;

/// One image with its ground truth: `image` is `H×W×Cin` in `[0, 1]`,
/// `mask` is `H×W×1` in `{0, 1}` or `H×W×K` one-hot.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub mask: Tensor,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn classes(&self) -> usize {
        self.mask.shape()[2]
    }

    /// Foreground fraction of a binary mask, or of non-background classes.
    pub fn foreground_fraction(&self) -> f64 {
        let k = self.classes();
        let px = self.height() * self.width();
        if k == 1 {
            self.mask.sum() / px as f64
        } else {
            let bg: f64 = self.mask.data().iter().step_by(k).sum();
            1.0 - bg / px as f64
        }
    }
}

/// How mask files encode the ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    /// Grey levels above [`MASK_THRESHOLD`] are foreground.
    Binary,
    /// The grey level is the class index, `0..classes`.
    Labels { classes: usize },
}

impl MaskKind {
    pub fn from_classes(classes: usize) -> Self {
        if classes <= 1 {
            Self::Binary
        } else {
            Self::Labels { classes }
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Self::Binary => 1,
            Self::Labels { classes } => *classes,
        }
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    image::load_from_memory(&bytes).map_err(|source| DataError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads an image and its mask, resizing the image bilinearly and the mask
/// by nearest neighbour to `size = (height, width)`.
pub fn load_pair(
    image_path: &Path,
    mask_path: &Path,
    size: (usize, usize),
    channels: usize,
    kind: MaskKind,
) -> Result<Sample> {
    let img = open(image_path)?;
    let mask = open(mask_path)?.to_luma8();
    let (iw, ih) = (img.width(), img.height());
    if (iw, ih) != mask.dimensions() {
        return Err(DataError::SizeMismatch {
            image: image_path.to_path_buf(),
            mask: mask_path.to_path_buf(),
            image_size: (iw, ih),
            mask_size: mask.dimensions(),
        });
    }
    let image = image_tensor(&img, size, channels)?;
    let mask = resize(&mask, size.0, size.1, FilterType::Nearest);
    let mask = mask_tensor(&mask, kind, mask_path)?;
    let id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Sample { id, image, mask })
}

/// Loads one image, bilinearly resized to `size = (height, width)`.
pub fn load_image(path: &Path, size: (usize, usize), channels: usize) -> Result<Tensor> {
    image_tensor(&open(path)?, size, channels)
}

fn image_tensor(img: &image::DynamicImage, (h, w): (usize, usize), channels: usize) -> Result<Tensor> {
    match channels {
        1 => Ok(luma_tensor(&resize(&img.to_luma8(), h, w, FilterType::Triangle))),
        3 => Ok(rgb_tensor(&resize(&img.to_rgb8(), h, w, FilterType::Triangle))),
        c => Err(clfseg_core::Error::InvalidArgument(format!("images must have 1 or 3 channels, got {c}")).into()),
    }
}

fn resize<P>(img: &ImageBuffer<P, Vec<u8>>, h: usize, w: usize, filter: FilterType) -> ImageBuffer<P, Vec<u8>>
where
    P: image::Pixel<Subpixel = u8> + 'static,
{
    if img.dimensions() == (w as u32, h as u32) {
        return img.clone();
    }
    imageops::resize(img, w as u32, h as u32, filter)
}

fn luma_tensor(img: &GrayImage) -> Tensor {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 1], data).expect("image has nonzero size")
}

fn rgb_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data).expect("image has nonzero size")
}

fn mask_tensor(img: &GrayImage, kind: MaskKind, path: &Path) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let (h, w) = (h as usize, w as usize);
    match kind {
        MaskKind::Binary => {
            let data = img
                .as_raw()
                .iter()
                .map(|&v| if v > MASK_THRESHOLD { 1.0 } else { 0.0 })
                .collect();
            Ok(Tensor::new(&[h, w, 1], data)?)
        }
        MaskKind::Labels { classes } => {
            let mut t = Tensor::zeros(&[h, w, classes]);
            for (px, &v) in img.as_raw().iter().enumerate() {
                if v as usize >= classes {
                    return Err(DataError::BadLabel {
                        path: path.to_path_buf(),
                        value: v,
                        classes,
                    });
                }
                t.data_mut()[px * classes + v as usize] = 1.0;
            }
            Ok(t)
        }
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save(img: impl FnOnce(&Path) -> image::ImageResult<()>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| DataError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    img(path).map_err(|source| DataError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes an `H×W×1` or `H×W×3` tensor in `[0, 1]` as an 8-bit PNG.
pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    let s = t.shape();
    let (h, w, c) = (s[0] as u32, s[1] as u32, s[2]);
    let bytes: Vec<u8> = t.data().iter().map(|&v| to_u8(v)).collect();
    match c {
        1 => {
            let img: ImageBuffer<Luma<u8>, _> = ImageBuffer::from_raw(w, h, bytes).expect("buffer size");
            save(|p| img.save(p), path)
        }
        3 => {
            let img: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(w, h, bytes).expect("buffer size");
            save(|p| img.save(p), path)
        }
        _ => Err(clfseg_core::Error::InvalidArgument(format!("cannot save {c}-channel image")).into()),
    }
}

/// Writes a mask: binary masks as 0/255, one-hot masks as class-index grey
/// levels.
pub fn save_mask(mask: &Tensor, path: &Path) -> Result<()> {
    let s = mask.shape();
    let (h, w, k) = (s[0] as u32, s[1] as u32, s[2]);
    let bytes: Vec<u8> = if k == 1 {
        mask.data().iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect()
    } else {
        mask.data()
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best as u8
            })
            .collect()
    };
    let img: GrayImage = ImageBuffer::from_raw(w, h, bytes).expect("buffer size");
    save(|p| img.save(p), path)
}

/// Writes an `H×W×1` label map (class indices) as grey levels.
pub fn save_labels(labels: &Tensor, path: &Path) -> Result<()> {
    let s = labels.shape();
    let bytes: Vec<u8> = labels.data().iter().map(|&v| v.clamp(0.0, 255.0) as u8).collect();
    let img: GrayImage = ImageBuffer::from_raw(s[1] as u32, s[0] as u32, bytes).expect("buffer size");
    save(|p| img.save(p), path)
}

/// Writes samples under `root/images` and `root/masks`.
pub fn write_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    for s in samples {
        save_image(&s.image, &root.join("images").join(format!("{}.png", s.id)))?;
        save_mask(&s.mask, &root.join("masks").join(format!("{}.png", s.id)))?;
    }
    Ok(())
}

/// Ids of `root/images/*.png`, sorted.
pub fn list_ids(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("images");
    let entries = fs::read_dir(&dir).map_err(|source| DataError::Io {
        path: dir.clone(),
        source,
    })?;
    let mut ids = Vec::new();
    for e in entries {
        let e = e.map_err(|source| DataError::Io {
            path: dir.clone(),
            source,
        })?;
        let p = e.path();
        if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            if let Some(stem) = p.file_stem() {
                ids.push(stem.to_string_lossy().into_owned());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn pair_paths(root: &Path, id: &str) -> (PathBuf, PathBuf) {
    (
        root.join("images").join(format!("{id}.png")),
        root.join("masks").join(format!("{id}.png")),
    )
}

/// Loads every pair of a dataset directory, in id order.
pub fn load_dir(root: &Path, size: (usize, usize), channels: usize, kind: MaskKind) -> Result<Vec<Sample>> {
    let ids = list_ids(root)?;
    if ids.is_empty() {
        return Err(DataError::Empty(root.to_path_buf()));
    }
    ids.iter()
        .map(|id| {
            let (img, mask) = pair_paths(root, id);
            if !mask.exists() {
                return Err(DataError::MissingMask { id: id.clone(), mask });
            }
            load_pair(&img, &mask, size, channels, kind)
        })
        .collect()
}
