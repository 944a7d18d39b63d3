use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("{image} is {image_size:?} but its mask {mask} is {mask_size:?}")]
    SizeMismatch {
        image: PathBuf,
        mask: PathBuf,
        image_size: (u32, u32),
        mask_size: (u32, u32),
    },
    #[error("{path}: label {value} is outside 0..{classes}")]
    BadLabel { path: PathBuf, value: u8, classes: usize },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("dataset at {0} is empty")]
    Empty(PathBuf),
    #[error("image `{id}` has no mask at {mask}")]
    MissingMask { id: String, mask: PathBuf },
    #[error(transparent)]
    Core(#[from] clfseg_core::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;
