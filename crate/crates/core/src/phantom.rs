//! Synthetic layered B-scans with exact ground-truth masks.
//!
//! Each layer's thickness profile is its mean plus a few low-frequency
//! sinusoids bounded by the configured variation amplitude, so sampled
//! thicknesses can never go negative. An optional pinch tapers a run of inner
//! layers to exactly zero thickness over a window of columns, reproducing the
//! coincident boundaries found at the fovea.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::topology::{boundaries_to_mask, BoundarySet, LabelMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub num_layers: usize,
    /// Mean extent of the region above the first layer, pixels.
    pub top_offset: f64,
    /// Amplitude of the slow bend applied to the whole structure, pixels.
    pub curvature_amplitude: f64,
    pub layer_thickness: Vec<f64>,
    pub layer_variation: Vec<f64>,
    /// Shortest undulation wavelength, pixels.
    pub smoothness: f64,
    pub harmonics: usize,
    pub pinch_probability: f64,
    pub pinch_width: f64,
    /// Zero-based indices of the layers that vanish inside a pinch.
    pub pinch_layers: Vec<usize>,
    /// Mean intensity per class (`num_layers + 2` entries), in `[0, 1]`.
    pub intensities: Vec<f64>,
    pub noise_sigma: f64,
    pub speckle_sigma: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            height: 192,
            width: 128,
            num_layers: 8,
            top_offset: 50.0,
            curvature_amplitude: 10.0,
            layer_thickness: vec![10.0, 9.0, 8.0, 8.0, 6.0, 14.0, 5.0, 6.0],
            layer_variation: vec![4.0, 3.0, 3.0, 3.0, 2.0, 4.0, 1.0, 1.0],
            smoothness: 96.0,
            harmonics: 3,
            pinch_probability: 0.3,
            pinch_width: 32.0,
            pinch_layers: vec![0, 1, 2, 3, 4],
            intensities: vec![0.05, 0.80, 0.45, 0.60, 0.30, 0.55, 0.15, 0.70, 0.95, 0.35],
            noise_sigma: 0.05,
            speckle_sigma: 0.15,
        }
    }
}

impl PhantomConfig {
    pub fn num_classes(&self) -> usize {
        self.num_layers + 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || self.num_layers == 0 || self.num_layers > 253 {
            return bad("height, width and num_layers must be positive".into());
        }
        if self.layer_thickness.len() != self.num_layers || self.layer_variation.len() != self.num_layers {
            return bad(format!("need {} layer thicknesses and variations", self.num_layers));
        }
        if self.intensities.len() != self.num_classes() {
            return bad(format!("need {} intensities", self.num_classes()));
        }
        for (k, (&m, &v)) in self.layer_thickness.iter().zip(&self.layer_variation).enumerate() {
            if !(v >= 0.0 && m >= v) {
                return bad(format!("layer {k}: mean thickness {m} must be >= variation {v} >= 0"));
            }
        }
        if self.intensities.iter().any(|i| !(0.0..=1.0).contains(i)) {
            return bad("intensities must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.pinch_probability) || self.pinch_width < 0.0 {
            return bad("pinch probability must lie in [0, 1] and width be >= 0".into());
        }
        if let Some(&k) = self.pinch_layers.iter().find(|&&k| k >= self.num_layers) {
            return bad(format!("pinch layer {k} out of range"));
        }
        if self.noise_sigma < 0.0 || self.speckle_sigma < 0.0 || self.smoothness <= 0.0 {
            return bad("noise levels must be >= 0 and smoothness > 0".into());
        }
        if self.top_offset < self.curvature_amplitude + self.layer_variation[0] {
            return bad("top_offset must exceed curvature_amplitude plus the first variation".into());
        }
        let deepest = self.top_offset
            + self.curvature_amplitude
            + self.layer_thickness.iter().zip(&self.layer_variation).map(|(m, v)| m + v).sum::<f64>();
        if deepest >= self.height as f64 {
            return bad(format!("structure may extend to row {deepest:.1}, beyond height {}", self.height));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("PhantomConfig serializes");
        hex::encode(&Sha256::digest(canon.as_bytes())[..8])
    }
}

/// One generated B-scan.
#[derive(Debug, Clone)]
pub struct Phantom {
    /// `[1, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub mask: LabelMask,
    /// Columns at the centre of a pinch (all pinch layers exactly zero).
    pub pinch_columns: Vec<usize>,
}

/// Deterministically derives an independent seed for item `index`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined state
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn smooth_profile<R: Rng + ?Sized>(rng: &mut R, width: usize, amplitude: f64, cfg: &PhantomConfig) -> Vec<f64> {
    if amplitude == 0.0 || cfg.harmonics == 0 {
        return vec![0.0; width];
    }
    // weights sum to one so |profile| <= amplitude
    let raw: Vec<f64> = (0..cfg.harmonics).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let terms: Vec<(f64, f64, f64)> = raw
        .iter()
        .enumerate()
        .map(|(h, &a)| {
            let wavelength = cfg.smoothness * rng.gen_range(1.0..4.0) * (h + 1) as f64 / cfg.harmonics as f64;
            let wavelength = wavelength.max(cfg.smoothness);
            (amplitude * a / total, 2.0 * PI / wavelength, rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    (0..width)
        .map(|x| terms.iter().map(|&(a, f, p)| a * (f * x as f64 + p).sin()).sum())
        .collect()
}

/// Smooth window: 0 inside the core, rising to 1 at the edge of the pinch.
fn pinch_factor(x: f64, centre: f64, width: f64) -> f64 {
    let d = (x - centre).abs();
    let core = width / 4.0;
    let edge = width / 2.0;
    if d <= core {
        0.0
    } else if d >= edge {
        1.0
    } else {
        let s = (d - core) / (edge - core);
        s * s * (3.0 - 2.0 * s)
    }
}

/// Generates one phantom B-scan and its mask.
pub fn generate_phantom<R: Rng + ?Sized>(cfg: &PhantomConfig, rng: &mut R) -> Result<Phantom> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let n = cfg.num_layers;
    let bend = smooth_profile(rng, w, cfg.curvature_amplitude, cfg);
    let mut thickness: Vec<Vec<f64>> = (0..n)
        .map(|k| {
            smooth_profile(rng, w, cfg.layer_variation[k], cfg)
                .into_iter()
                .map(|d| cfg.layer_thickness[k] + d)
                .collect()
        })
        .collect();

    let mut pinch_columns = Vec::new();
    // thickness removed by the pinch; the top extent absorbs it so the lower
    // layers keep their depth
    let mut lost = vec![0.0; w];
    if cfg.pinch_width > 0.0 && rng.gen_bool(cfg.pinch_probability) {
        let centre = rng.gen_range(w as f64 * 0.25..w as f64 * 0.75);
        for x in 0..w {
            let f = pinch_factor(x as f64 + 0.5, centre, cfg.pinch_width);
            for &k in &cfg.pinch_layers {
                lost[x] += thickness[k][x] * (1.0 - f);
                thickness[k][x] *= f;
            }
            if f == 0.0 {
                pinch_columns.push(x);
            }
        }
    }

    let mut b = BoundarySet::zeros(n + 1, w);
    for x in 0..w {
        let mut acc = cfg.top_offset + bend[x] + lost[x];
        b.set(0, x, acc);
        for k in 0..n {
            acc += thickness[k][x];
            b.set(k + 1, x, acc);
        }
    }
    let mask = boundaries_to_mask(&b, h)?;

    let additive = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let speckle = Normal::new(1.0, cfg.speckle_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let data = mask
        .labels()
        .iter()
        .map(|&l| {
            let mut v = cfg.intensities[l as usize];
            if cfg.speckle_sigma > 0.0 {
                v *= speckle.sample(rng);
            }
            if cfg.noise_sigma > 0.0 {
                v += additive.sample(rng);
            }
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    Ok(Phantom { image: Tensor::new(&[1, h, w], data)?, mask, pinch_columns })
}

/// Generates phantom `index` of a seeded collection.
pub fn generate_item(cfg: &PhantomConfig, seed: u64, index: u64) -> Result<Phantom> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index));
    generate_phantom(cfg, &mut rng)
}

pub fn mask_to_tensor(mask: &LabelMask) -> Tensor<f32> {
    Tensor::new(&[mask.height(), mask.width()], mask.labels().iter().map(|&l| l as f32).collect())
        .expect("mask extents are positive")
}

pub fn mask_from_tensor(t: &Tensor<f32>, num_classes: usize) -> Result<LabelMask> {
    let [h, w] = t.shape()[..] else {
        return Err(Error::shape("mask_from_tensor", format!("expected [H, W], got {:?}", t.shape())));
    };
    let labels = t
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < num_classes {
                Ok(v as u8)
            } else {
                Err(Error::invalid("mask_from_tensor", format!("{v} is not a class index")))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    LabelMask::new(h, w, num_classes, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub file: String,
    pub seed: u64,
}

/// JSON manifest describing a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub count: usize,
    pub config_hash: String,
    pub config: PhantomConfig,
    pub items: Vec<ManifestItem>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `count` phantoms plus `manifest.json` into `dir`.
pub fn generate_dataset(cfg: &PhantomConfig, count: usize, seed: u64, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    cfg.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut items = Vec::with_capacity(count);
    for i in 0..count {
        let item_seed = derive_seed(seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
        let p = generate_phantom(cfg, &mut rng)?;
        let file = format!("item_{i:05}.lmn");
        Container::new()
            .with("image", p.image)
            .with("mask", mask_to_tensor(&p.mask))
            .meta("index", i as u64)
            .meta("seed", item_seed)
            .meta("num_classes", cfg.num_classes() as u64)
            .save(dir.join(&file))?;
        items.push(ManifestItem { file, seed: item_seed });
    }
    let manifest = DatasetManifest {
        format: "laminet-dataset".into(),
        version: 1,
        seed,
        count,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        items,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A dataset loaded back from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub items: Vec<(Tensor<f32>, LabelMask)>,
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let classes = manifest.config.num_classes();
    let items = manifest
        .items
        .iter()
        .map(|item| {
            let c = Container::load(dir.join(&item.file))?;
            let image = c.require("image")?.clone();
            let mask = mask_from_tensor(c.require("mask")?, classes)?;
            Ok((image, mask))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, items })
}

pub fn dataset_files(dir: &Path, manifest: &DatasetManifest) -> Vec<PathBuf> {
    manifest.items.iter().map(|i| dir.join(&i.file)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::mask_to_thickness;

    fn quiet() -> PhantomConfig {
        PhantomConfig { noise_sigma: 0.0, speckle_sigma: 0.0, ..Default::default() }
    }

    #[test]
    fn noiseless_image_is_piecewise_constant() {
        let cfg = quiet();
        let p = generate_item(&cfg, 3, 0).unwrap();
        for (v, &l) in p.image.data().iter().zip(p.mask.labels()) {
            assert_eq!(*v, cfg.intensities[l as usize] as f32);
        }
        // thresholding by intensity recovers the mask exactly
        let lookup = |v: f32| cfg.intensities.iter().position(|&i| i as f32 == v).unwrap() as u8;
        let recovered: Vec<u8> = p.image.data().iter().map(|&v| lookup(v)).collect();
        assert_eq!(recovered, p.mask.labels());
    }

    #[test]
    fn masks_are_stacked_and_columns_sum_to_height() {
        let cfg = PhantomConfig::default();
        for i in 0..20 {
            let p = generate_item(&cfg, 17, i).unwrap();
            p.mask.check_stacked().unwrap();
            let t = mask_to_thickness(&p.mask).unwrap();
            for j in 0..cfg.width {
                let choroid = (0..cfg.height).filter(|&r| p.mask.get(r, j) == cfg.num_layers + 1).count();
                let s: f64 = t.column(j).iter().sum();
                assert_eq!(s as usize + choroid, cfg.height);
            }
        }
    }

    #[test]
    fn pinch_produces_coincident_boundaries() {
        let cfg = PhantomConfig { pinch_probability: 1.0, ..Default::default() };
        let p = generate_item(&cfg, 5, 0).unwrap();
        assert!(!p.pinch_columns.is_empty());
        let t = mask_to_thickness(&p.mask).unwrap();
        for &j in &p.pinch_columns {
            for &k in &cfg.pinch_layers {
                assert_eq!(t.get(k + 1, j), 0.0);
            }
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = PhantomConfig { layer_variation: vec![20.0; 8], ..Default::default() };
        assert!(generate_item(&cfg, 0, 0).is_err());
        let cfg = PhantomConfig { height: 60, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
