//! Predicted boundaries on disk: one container per B-scan plus a JSON
//! manifest, mirroring the dataset layout.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::phantom::{load_dataset, MANIFEST_FILE};
use crate::tensor::Tensor;
use crate::topology::{mask_to_thickness, thickness_to_boundaries, BoundarySet, LabelMask};

pub const PREDICTIONS_FORMAT: &str = "laminet-predictions";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub items: Vec<String>,
    /// Free-form provenance: weights, configuration, timings.
    pub meta: serde_json::Value,
}

/// Ground-truth boundaries of a stacked mask.
pub fn truth_boundaries(mask: &LabelMask) -> Result<BoundarySet> {
    thickness_to_boundaries(&mask_to_thickness(mask)?)
}

fn to_tensor(b: &BoundarySet) -> Result<Tensor<f32>> {
    Tensor::new(&[b.layers(), b.width()], b.data().iter().map(|&v| v as f32).collect())
}

/// Writes `pred_NNNNN.lmn` files (tensor `boundaries`, `[B, W]` in original
/// rows) and `manifest.json` into `dir`.
pub fn save_predictions(dir: impl AsRef<Path>, boundaries: &[BoundarySet], seed: u64, meta: serde_json::Value) -> Result<PredictionManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut items = Vec::with_capacity(boundaries.len());
    for (i, b) in boundaries.iter().enumerate() {
        let file = format!("pred_{i:05}.lmn");
        Container::new().with("boundaries", to_tensor(b)?).save(dir.join(&file))?;
        items.push(file);
    }
    let manifest = PredictionManifest { format: PREDICTIONS_FORMAT.into(), version: 1, seed, items, meta };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Boundaries from either a predictions directory or a phantom dataset
/// (ground truth derived from its masks).
pub fn load_boundaries(dir: impl AsRef<Path>) -> Result<Vec<BoundarySet>> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let probe: serde_json::Value = serde_json::from_str(&text)?;
    match probe.get("format").and_then(|f| f.as_str()) {
        Some(PREDICTIONS_FORMAT) => {
            let manifest: PredictionManifest = serde_json::from_value(probe)?;
            manifest
                .items
                .iter()
                .map(|file| {
                    let c = Container::load(dir.join(file))?;
                    let t = c.require("boundaries")?;
                    if t.ndim() != 2 {
                        return Err(Error::shape("load_boundaries", format!("{file}: expected [B, W], got {:?}", t.shape())));
                    }
                    BoundarySet::new(t.shape()[0], t.shape()[1], t.data().iter().map(|&v| v as f64).collect())
                })
                .collect()
        }
        _ => load_dataset(dir)?.items.iter().map(|(_, mask)| truth_boundaries(mask)).collect(),
    }
}
