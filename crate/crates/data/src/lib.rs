//! Dataset handling for CLFSeg: PNG pairs, augmentation, splits, batching
//! and a synthetic task.

pub mod augment;
pub mod error;
pub mod io;
pub mod split;
pub mod synth;

use clfseg_core::Tensor;

pub use augment::{augment, AugmentParams};
pub use error::{DataError, Result};
pub use io::{load_dir, load_pair, MaskKind, Sample};
pub use split::{epoch_order, split, Split, SplitSpec};
pub use synth::{synth_dataset, threshold_baseline};

/// Stacks the selected samples into `B×H×W×C` image and mask batches.
pub fn stack_batch(samples: &[Sample], indices: &[usize]) -> Result<(Tensor, Tensor)> {
    let images: Vec<&Tensor> = indices.iter().map(|&i| &samples[i].image).collect();
    let masks: Vec<&Tensor> = indices.iter().map(|&i| &samples[i].mask).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}
