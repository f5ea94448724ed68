//! Full B-scan and volume inference.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{NetKind, Network};
use crate::pipeline::patches::{extract_patches, stitch, PatchLayout, DEFAULT_PATCH_COUNT};
use crate::pipeline::preprocess::{estimate_baseline, flatten_and_crop, FlattenRecord, DEFAULT_TARGET_ROW};
use crate::tensor::Tensor;
use crate::topology::{thickness_to_boundaries, BoundarySet, ThicknessMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferOptions {
    pub patch_count: usize,
    pub target_row: usize,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions { patch_count: DEFAULT_PATCH_COUNT, target_row: DEFAULT_TARGET_ROW }
    }
}

/// Wall-clock seconds per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    /// Baseline estimation, flattening, cropping and patch extraction.
    pub preprocess: f64,
    /// S-Net and R-Net forward passes.
    pub inference: f64,
    /// Stitching, prefix sums and coordinate restoration.
    pub reconstruction: f64,
}

impl StageTimes {
    pub fn total(&self) -> f64 {
        self.preprocess + self.inference + self.reconstruction
    }

    fn add(&mut self, other: &StageTimes) {
        self.preprocess += other.preprocess;
        self.inference += other.inference;
        self.reconstruction += other.reconstruction;
    }
}

#[derive(Debug, Clone)]
pub struct ScanPrediction {
    pub thickness: ThicknessMap,
    /// Boundaries in the flattened crop, monotone per column by construction.
    pub crop_boundaries: BoundarySet,
    /// Boundaries in original B-scan rows.
    pub boundaries: BoundarySet,
    pub record: FlattenRecord,
}

/// Checks that the two networks can be chained.
pub fn check_compatible(snet: &Network<f32>, rnet: &Network<f32>) -> Result<()> {
    if snet.kind() != NetKind::SNet || rnet.kind() != NetKind::RNet {
        return Err(Error::Incompatible("expected an S-Net followed by an R-Net".into()));
    }
    let (s, r) = (snet.config(), rnet.config());
    if (s.num_classes, s.patch_height, s.patch_width) != (r.num_classes, r.patch_height, r.patch_width) {
        return Err(Error::Incompatible(format!(
            "S-Net (config {}) emits {} classes on {}x{} patches; R-Net (config {}) expects {} on {}x{}",
            s.hash(),
            s.num_classes,
            s.patch_height,
            s.patch_width,
            r.hash(),
            r.num_classes,
            r.patch_height,
            r.patch_width
        )));
    }
    Ok(())
}

/// Thickness map for an already flattened `[1, 128, W]` crop.
pub fn infer_crop(
    crop: &Tensor<f32>,
    snet: &Network<f32>,
    rnet: &Network<f32>,
    patch_count: usize,
) -> Result<(ThicknessMap, StageTimes)> {
    check_compatible(snet, rnet)?;
    let mut times = StageTimes::default();
    let t0 = Instant::now();
    let (_, h, w) = crop.chw()?;
    if h != snet.config().patch_height {
        return Err(Error::shape("infer", format!("crop height {h}, network expects {}", snet.config().patch_height)));
    }
    let layout = PatchLayout::new(w, snet.config().patch_width, patch_count)?;
    let patches = extract_patches(crop, &layout)?;
    times.preprocess = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let outputs = patches
        .par_iter()
        .map(|(start, p)| {
            let probs = snet.snet_forward(p)?;
            Ok((*start, rnet.rnet_forward(&probs)?))
        })
        .collect::<Result<Vec<_>>>()?;
    times.inference = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let thickness = stitch(&outputs, w)?;
    times.reconstruction = t2.elapsed().as_secs_f64();
    Ok((thickness, times))
}

/// Segments one `[1, H, W]` B-scan.
pub fn infer_scan(
    bscan: &Tensor<f32>,
    snet: &Network<f32>,
    rnet: &Network<f32>,
    opts: &InferOptions,
) -> Result<(ScanPrediction, StageTimes)> {
    let t0 = Instant::now();
    let baseline = estimate_baseline(bscan)?;
    let (crop, record) = flatten_and_crop(bscan, &baseline.rows, opts.target_row)?;
    let pre = t0.elapsed().as_secs_f64();

    let (thickness, mut times) = infer_crop(&crop, snet, rnet, opts.patch_count)?;
    times.preprocess += pre;

    let t1 = Instant::now();
    let crop_boundaries = thickness_to_boundaries(&thickness)?;
    let boundaries = record.boundaries_to_original(&crop_boundaries)?;
    times.reconstruction += t1.elapsed().as_secs_f64();
    Ok((ScanPrediction { thickness, crop_boundaries, boundaries, record }, times))
}

/// Segments every B-scan of an `[N, H, W]` volume.
pub fn infer_volume(
    volume: &Tensor<f32>,
    snet: &Network<f32>,
    rnet: &Network<f32>,
    opts: &InferOptions,
) -> Result<(Vec<ScanPrediction>, StageTimes)> {
    check_compatible(snet, rnet)?;
    let (n, h, w) = volume.chw()?;
    let mut total = StageTimes::default();
    let mut scans = Vec::with_capacity(n);
    for i in 0..n {
        let scan = Tensor::new(&[1, h, w], volume.channel(i).to_vec())?;
        let (pred, times) = infer_scan(&scan, snet, rnet, opts)?;
        total.add(&times);
        scans.push(pred);
    }
    Ok((scans, total))
}

/// S-Net class probabilities of a flattened crop, averaged where patches
/// overlap: `[C, 128, W]`.
pub fn crop_probabilities(crop: &Tensor<f32>, snet: &Network<f32>, patch_count: usize) -> Result<Tensor<f32>> {
    let (_, h, w) = crop.chw()?;
    let c = snet.config().num_classes;
    let layout = PatchLayout::new(w, snet.config().patch_width, patch_count)?;
    let probs = extract_patches(crop, &layout)?
        .par_iter()
        .map(|(start, p)| Ok((*start, snet.snet_forward(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let pw = snet.config().patch_width;
    let mut sum = vec![0.0f64; c * h * w];
    let coverage = layout.coverage();
    for (start, p) in &probs {
        for k in 0..c {
            let src = p.channel(k);
            for r in 0..h {
                for j in 0..pw {
                    sum[(k * h + r) * w + start + j] += src[r * pw + j] as f64;
                }
            }
        }
    }
    let data = sum.iter().enumerate().map(|(i, s)| (s / coverage[i % w] as f64) as f32).collect();
    Tensor::new(&[c, h, w], data)
}

/// S-Net probabilities of a B-scan in its own rows, `[C, H, W]`; rows the
/// crop does not reach are zero.
pub fn scan_probabilities(bscan: &Tensor<f32>, snet: &Network<f32>, opts: &InferOptions) -> Result<Tensor<f32>> {
    let baseline = estimate_baseline(bscan)?;
    let (crop, record) = flatten_and_crop(bscan, &baseline.rows, opts.target_row)?;
    record.uncrop(&crop_probabilities(&crop, snet, opts.patch_count)?)
}
