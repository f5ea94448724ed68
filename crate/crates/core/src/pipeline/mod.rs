//! Preprocessing, patching, training, inference and weight persistence.

pub mod infer;
pub mod patches;
pub mod predictions;
pub mod preprocess;
pub mod train;
pub mod weights;

pub use infer::{crop_probabilities, infer_scan, infer_volume, scan_probabilities, InferOptions, ScanPrediction, StageTimes};
pub use predictions::{load_boundaries, save_predictions, truth_boundaries, PredictionManifest};
pub use patches::{extract_patches, stitch, PatchLayout};
pub use preprocess::{estimate_baseline, flatten_and_crop, flatten_mask, FlattenRecord};
pub use train::{train_rnet, train_snet, EpochStats, Sample, Schedule, TrainResult};
pub use weights::{load_network, save_network, WeightStore};

use crate::error::Result;
use crate::tensor::Tensor;
use crate::topology::LabelMask;

/// Flattens a full B-scan and its mask the way inference does and cuts both
/// into training patches.
pub fn training_samples(
    image: &Tensor<f32>,
    mask: &LabelMask,
    patch_width: usize,
    patch_count: usize,
    target_row: usize,
) -> Result<Vec<Sample>> {
    let baseline = estimate_baseline(image)?;
    let (crop, record) = flatten_and_crop(image, &baseline.rows, target_row)?;
    let flat_mask = flatten_mask(mask, &record)?;
    let layout = PatchLayout::new(crop.shape()[2], patch_width, patch_count)?;
    layout
        .starts
        .iter()
        .map(|&s| {
            Ok(Sample {
                image: patches::crop_columns(&crop, s, patch_width)?,
                mask: flat_mask.crop_columns(s, patch_width)?,
            })
        })
        .collect()
}

/// Training patches of every `(image, mask)` pair, in order.
pub fn dataset_samples(
    items: &[(Tensor<f32>, LabelMask)],
    patch_width: usize,
    patch_count: usize,
    target_row: usize,
) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (image, mask) in items {
        out.extend(training_samples(image, mask, patch_width, patch_count, target_row)?);
    }
    Ok(out)
}
