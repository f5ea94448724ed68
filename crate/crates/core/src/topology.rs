//! Conversions between label masks, per-column layer thicknesses and
//! boundary positions, plus the defect simulator used to train R-Net.
//!
//! Boundary `k` of a column sits at the top of the pixel run of class `k + 1`
//! and equals the sum of thicknesses `0..=k`. Because every thickness is
//! non-negative, boundaries are non-decreasing down each column no matter
//! what values a network produces.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-pixel class image. Class 0 is above the structure, class `C - 1`
/// below it; valid masks are stacked (non-decreasing down each column).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    num_classes: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::shape(
                "LabelMask",
                format!("{} labels for a {height}x{width} mask", labels.len()),
            ));
        }
        if !(2..=255).contains(&num_classes) {
            return Err(Error::invalid("LabelMask", format!("unsupported class count {num_classes}")));
        }
        if let Some((index, &l)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= num_classes) {
            return Err(Error::LabelOutOfRange { label: l as usize, classes: num_classes, index });
        }
        Ok(LabelMask { height, width, num_classes, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> usize {
        self.labels[row * self.width + col] as usize
    }

    /// Labels widened to `usize`, the form the loss functions take.
    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    pub fn column(&self, col: usize) -> Vec<usize> {
        (0..self.height).map(|r| self.get(r, col)).collect()
    }

    /// Checks that class indices never decrease down any column.
    pub fn check_stacked(&self) -> Result<()> {
        for col in 0..self.width {
            for row in 1..self.height {
                let (above, below) = (self.get(row - 1, col), self.get(row, col));
                if below < above {
                    return Err(Error::NotStacked { column: col, row, above, below });
                }
            }
        }
        Ok(())
    }

    /// Columns `start..start + len`.
    pub fn crop_columns(&self, start: usize, len: usize) -> Result<LabelMask> {
        if start + len > self.width || len == 0 {
            return Err(Error::shape("crop_columns", format!("{start}+{len} exceeds width {}", self.width)));
        }
        let mut labels = Vec::with_capacity(self.height * len);
        for r in 0..self.height {
            labels.extend_from_slice(&self.labels[r * self.width + start..r * self.width + start + len]);
        }
        LabelMask::new(self.height, len, self.num_classes, labels)
    }
}

macro_rules! column_map {
    ($name:ident, $what:literal) => {
        #[doc = concat!("Per-column ", $what, ", stored `[B, W]` row-major (`k * W + column`).")]
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            layers: usize,
            width: usize,
            data: Vec<f64>,
        }

        impl $name {
            pub fn new(layers: usize, width: usize, data: Vec<f64>) -> Result<Self> {
                if layers == 0 || width == 0 || data.len() != layers * width {
                    return Err(Error::shape(
                        stringify!($name),
                        format!("{} values for {layers}x{width}", data.len()),
                    ));
                }
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(stringify!($name).into()));
                }
                Ok($name { layers, width, data })
            }

            pub fn zeros(layers: usize, width: usize) -> Self {
                $name { layers, width, data: vec![0.0; layers * width] }
            }

            pub fn layers(&self) -> usize {
                self.layers
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn data(&self) -> &[f64] {
                &self.data
            }

            pub fn data_mut(&mut self) -> &mut [f64] {
                &mut self.data
            }

            #[inline]
            pub fn get(&self, k: usize, col: usize) -> f64 {
                self.data[k * self.width + col]
            }

            #[inline]
            pub fn set(&mut self, k: usize, col: usize, v: f64) {
                self.data[k * self.width + col] = v;
            }

            pub fn column(&self, col: usize) -> Vec<f64> {
                (0..self.layers).map(|k| self.get(k, col)).collect()
            }

            pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
                Tensor::new(&[self.layers, self.width], self.data.iter().map(|&v| T::from_f64(v)).collect())
                    .expect("extents are positive")
            }
        }
    };
}

column_map!(ThicknessMap, "layer thicknesses in pixels");
column_map!(BoundarySet, "boundary row positions (fractional, from the top)");

impl BoundarySet {
    /// First `(column, k)` where `b[k] > b[k + 1]`, if any.
    pub fn first_violation(&self) -> Option<(usize, usize)> {
        (0..self.width).find_map(|j| {
            (0..self.layers - 1)
                .find(|&k| self.get(k, j) > self.get(k + 1, j))
                .map(|k| (j, k))
        })
    }

    pub fn is_monotone(&self) -> bool {
        self.first_violation().is_none()
    }

    /// Columns where the last boundary lies beyond `height` (overshoot).
    pub fn overshoot_columns(&self, height: usize) -> Vec<usize> {
        (0..self.width).filter(|&j| self.get(self.layers - 1, j) > height as f64).collect()
    }
}

/// Per-column prefix sums of non-negative thicknesses.
pub fn thickness_to_boundaries(t: &ThicknessMap) -> Result<BoundarySet> {
    if let Some(i) = t.data.iter().position(|&v| v < 0.0) {
        return Err(Error::NegativeThickness { layer: i / t.width, column: i % t.width, value: t.data[i] });
    }
    let mut b = BoundarySet::zeros(t.layers, t.width);
    for j in 0..t.width {
        let mut acc = 0.0;
        for k in 0..t.layers {
            acc += t.get(k, j);
            b.set(k, j, acc);
        }
    }
    Ok(b)
}

/// Ground-truth thicknesses: row 0 counts class-0 pixels, row `k` counts
/// class-`k` pixels; the last class is not represented.
pub fn mask_to_thickness(mask: &LabelMask) -> Result<ThicknessMap> {
    mask.check_stacked()?;
    let layers = mask.num_classes - 1;
    let mut t = ThicknessMap::zeros(layers, mask.width);
    for r in 0..mask.height {
        for j in 0..mask.width {
            let c = mask.get(r, j);
            if c < layers {
                t.data[c * mask.width + j] += 1.0;
            }
        }
    }
    Ok(t)
}

/// Rasterizes boundaries: pixel `(r, j)` takes the number of boundaries
/// `<= r + 0.5` as its class.
pub fn boundaries_to_mask(b: &BoundarySet, height: usize) -> Result<LabelMask> {
    if let Some((column, index)) = b.first_violation() {
        return Err(Error::NotMonotone {
            column,
            index,
            upper: b.get(index, column),
            lower: b.get(index + 1, column),
        });
    }
    let mut labels = vec![0u8; height * b.width];
    for j in 0..b.width {
        let mut k = 0;
        for r in 0..height {
            let centre = r as f64 + 0.5;
            while k < b.layers && b.get(k, j) <= centre {
                k += 1;
            }
            labels[r * b.width + j] = k as u8;
        }
    }
    LabelMask::new(height, b.width, b.layers + 1, labels)
}

/// Indicator channels `[C, H, W]`.
pub fn one_hot<T: Scalar>(mask: &LabelMask, num_classes: usize) -> Result<Tensor<T>> {
    if let Some((index, &l)) = mask.labels.iter().enumerate().find(|(_, &l)| l as usize >= num_classes) {
        return Err(Error::LabelOutOfRange { label: l as usize, classes: num_classes, index });
    }
    let plane = mask.height * mask.width;
    let mut t = Tensor::zeros(&[num_classes, mask.height, mask.width]);
    let d = t.data_mut();
    for (i, &l) in mask.labels.iter().enumerate() {
        d[l as usize * plane + i] = T::one();
    }
    Ok(t)
}

/// Per-pixel argmax over channels (first maximum wins).
pub fn argmax_mask<T: Scalar>(probs: &Tensor<T>) -> Result<LabelMask> {
    let (c, h, w) = probs.chw()?;
    let plane = h * w;
    let p = probs.data();
    let labels = (0..plane)
        .map(|i| {
            let mut best = 0;
            for ch in 1..c {
                if p[ch * plane + i] > p[best * plane + i] {
                    best = ch;
                }
            }
            best as u8
        })
        .collect();
    LabelMask::new(h, w, c, labels)
}

/// How ellipse defects are distributed over channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EllipseMode {
    /// Each channel draws its own independent set of ellipses.
    PerChannel,
    /// Each ellipse lands on one randomly chosen channel.
    SingleChannel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefectConfig {
    /// Inclusive range of ellipses drawn per channel (or per patch in
    /// single-channel mode).
    pub ellipse_count: (usize, usize),
    /// Horizontal semi-axis range, pixels.
    pub semi_axis_x: (f64, f64),
    /// Vertical semi-axis range, pixels.
    pub semi_axis_y: (f64, f64),
    pub magnitude: (f64, f64),
    pub ellipse_mode: EllipseMode,
    pub gaussian_noise_sigma: f64,
    /// Inclusive whole-mask vertical shift range, pixels.
    pub vertical_shift: (i32, i32),
    /// Inclusive per-layer thickness change range, pixels.
    pub dilate_shrink: (i32, i32),
    /// Sigma (pixels) of a vertical Gaussian blur applied to the one-hot
    /// input before the additive corruption, so training inputs have the
    /// soft layer transitions of real probability maps. Column sums, and
    /// therefore the targets, are unchanged.
    pub boundary_blur: f64,
}

impl Default for DefectConfig {
    fn default() -> Self {
        DefectConfig {
            ellipse_count: (0, 2),
            semi_axis_x: (2.0, 12.0),
            semi_axis_y: (1.0, 6.0),
            magnitude: (-1.0, 1.0),
            // the trunk's first ReLU clips whatever lands on empty channels,
            // so every ellipse or noise sample there adds mass that clean
            // probability maps never have; keep that budget small
            ellipse_mode: EllipseMode::SingleChannel,
            gaussian_noise_sigma: 0.0,
            vertical_shift: (-4, 4),
            dilate_shrink: (-2, 2),
            boundary_blur: 1.5,
        }
    }
}

impl DefectConfig {
    /// No corruption and no geometric change.
    pub fn identity() -> Self {
        DefectConfig {
            ellipse_count: (0, 0),
            gaussian_noise_sigma: 0.0,
            vertical_shift: (0, 0),
            dilate_shrink: (0, 0),
            boundary_blur: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let (lo, hi) = self.magnitude;
        if !(-1.0..=1.0).contains(&lo) || !(-1.0..=1.0).contains(&hi) || lo > hi {
            return bad(format!("magnitude range ({lo}, {hi}) must be ordered within [-1, 1]"));
        }
        if self.ellipse_count.0 > self.ellipse_count.1 {
            return bad("ellipse_count range is reversed".into());
        }
        for (name, (a, b)) in [("semi_axis_x", self.semi_axis_x), ("semi_axis_y", self.semi_axis_y)] {
            if !(a >= 0.0 && a <= b && b.is_finite()) {
                return bad(format!("{name} range ({a}, {b}) invalid"));
            }
        }
        if !(self.gaussian_noise_sigma >= 0.0 && self.gaussian_noise_sigma.is_finite()) {
            return bad("gaussian_noise_sigma must be >= 0".into());
        }
        if !(self.boundary_blur >= 0.0 && self.boundary_blur.is_finite()) {
            return bad("boundary_blur must be >= 0".into());
        }
        if self.vertical_shift.0 > self.vertical_shift.1 || self.dilate_shrink.0 > self.dilate_shrink.1 {
            return bad("shift/dilate ranges are reversed".into());
        }
        Ok(())
    }

    pub fn is_geometric(&self) -> bool {
        self.vertical_shift != (0, 0) || self.dilate_shrink != (0, 0)
    }
}

/// A corrupted R-Net training input and its regression target.
#[derive(Debug, Clone)]
pub struct DefectSample<T: Scalar> {
    /// `g(x) + s(x)`, unclamped.
    pub input: Tensor<T>,
    /// Mask after the geometric transform.
    pub mask: LabelMask,
    /// `mask_to_thickness(mask)`.
    pub target: ThicknessMap,
}

fn sample_range<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn sample_int<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (i32, i32)) -> i32 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Vertical shift and per-layer dilation/shrink of a stacked mask.
pub fn geometric_transform<R: Rng + ?Sized>(mask: &LabelMask, cfg: &DefectConfig, rng: &mut R) -> Result<LabelMask> {
    let mut t = mask_to_thickness(mask)?;
    let layers = t.layers;
    let width = t.width;
    for k in 1..layers {
        let d = sample_int(rng, cfg.dilate_shrink) as f64;
        for j in 0..width {
            let v = (t.get(k, j) + d).max(0.0);
            t.set(k, j, v);
        }
    }
    let shift = sample_int(rng, cfg.vertical_shift) as f64;
    let mut b = thickness_to_boundaries(&t)?;
    for v in b.data_mut() {
        *v = (*v + shift).max(0.0);
    }
    boundaries_to_mask(&b, mask.height)
}

/// Blurs every channel down its columns with a normalized Gaussian of the
/// given sigma, truncated at three sigma, replicating the edge rows.
pub fn vertical_blur<T: Scalar>(input: &mut Tensor<T>, sigma: f64) -> Result<()> {
    let (c, h, w) = input.chw()?;
    if sigma <= 0.0 {
        return Ok(());
    }
    let reach = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-reach..=reach).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let data = input.data_mut();
    let mut column = vec![0.0; h];
    for ch in 0..c {
        let plane = &mut data[ch * h * w..(ch + 1) * h * w];
        for j in 0..w {
            for (r, v) in column.iter_mut().enumerate() {
                *v = plane[r * w + j].as_f64();
            }
            for r in 0..h {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| k * column[(r as isize + i as isize - reach).clamp(0, h as isize - 1) as usize])
                    .sum();
                plane[r * w + j] = T::from_f64(v);
            }
        }
    }
    Ok(())
}

/// Adds random hard-edged ellipses and Gaussian noise to every channel.
pub fn corrupt<T: Scalar, R: Rng + ?Sized>(input: &mut Tensor<T>, cfg: &DefectConfig, rng: &mut R) -> Result<()> {
    let (c, h, w) = input.chw()?;
    let stamp = |data: &mut [T], ch: usize, rng: &mut R| {
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let ay = sample_range(rng, cfg.semi_axis_y);
        let ax = sample_range(rng, cfg.semi_axis_x);
        let m = T::from_f64(sample_range(rng, cfg.magnitude));
        if ax <= 0.0 || ay <= 0.0 {
            return;
        }
        let r0 = (cy - ay).floor().max(0.0) as usize;
        let r1 = ((cy + ay).ceil() as usize).min(h - 1);
        let c0 = (cx - ax).floor().max(0.0) as usize;
        let c1 = ((cx + ax).ceil() as usize).min(w - 1);
        let plane = &mut data[ch * h * w..(ch + 1) * h * w];
        for r in r0..=r1 {
            let dy = (r as f64 + 0.5 - cy) / ay;
            for col in c0..=c1 {
                let dx = (col as f64 + 0.5 - cx) / ax;
                if dx * dx + dy * dy <= 1.0 {
                    plane[r * w + col] += m;
                }
            }
        }
    };
    let data = input.data_mut();
    let (lo, hi) = cfg.ellipse_count;
    match cfg.ellipse_mode {
        EllipseMode::PerChannel => {
            for ch in 0..c {
                let n = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
                for _ in 0..n {
                    stamp(data, ch, rng);
                }
            }
        }
        EllipseMode::SingleChannel => {
            let n = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            for _ in 0..n {
                let ch = rng.gen_range(0..c);
                stamp(data, ch, rng);
            }
        }
    }
    if cfg.gaussian_noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.gaussian_noise_sigma).expect("validated sigma");
        for v in data.iter_mut() {
            *v += T::from_f64(normal.sample(rng));
        }
    }
    Ok(())
}

/// Builds an R-Net training pair from a one-hot ground-truth mask: geometric
/// transform first (which defines the target), then additive corruption.
pub fn simulate_defects<T: Scalar, R: Rng + ?Sized>(
    onehot: &Tensor<T>,
    cfg: &DefectConfig,
    rng: &mut R,
) -> Result<DefectSample<T>> {
    cfg.validate()?;
    let (c, _, _) = onehot.chw()?;
    let mask = argmax_mask(onehot)?;
    let (mask, mut input) = if cfg.is_geometric() {
        let moved = geometric_transform(&mask, cfg, rng)?;
        let input = one_hot(&moved, c)?;
        (moved, input)
    } else {
        (mask, onehot.clone())
    };
    vertical_blur(&mut input, cfg.boundary_blur)?;
    corrupt(&mut input, cfg, rng)?;
    let target = mask_to_thickness(&mask)?;
    Ok(DefectSample { input, mask, target })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn column_mask(col: &[u8], classes: usize) -> LabelMask {
        LabelMask::new(col.len(), 1, classes, col.to_vec()).unwrap()
    }

    #[test]
    fn prefix_sum_example() {
        let t = ThicknessMap::new(4, 1, vec![2.0, 3.0, 0.0, 1.0]).unwrap();
        let b = thickness_to_boundaries(&t).unwrap();
        assert_eq!(b.data(), &[2.0, 5.0, 5.0, 6.0]);
        let z = thickness_to_boundaries(&ThicknessMap::zeros(9, 3)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let neg = ThicknessMap::new(2, 1, vec![1.0, -0.5]).unwrap();
        assert!(matches!(thickness_to_boundaries(&neg), Err(Error::NegativeThickness { layer: 1, .. })));
        let big = thickness_to_boundaries(&ThicknessMap::zeros(9, 128)).unwrap();
        assert_eq!((big.layers(), big.width()), (9, 128));
    }

    #[test]
    fn class_counts_per_column() {
        // the last class (4 with C = 5) is the region below the structure
        let m = column_mask(&[0, 0, 1, 1, 2, 3, 4, 4], 5);
        assert_eq!(mask_to_thickness(&m).unwrap().data(), &[2.0, 2.0, 1.0, 1.0]);
        let m = column_mask(&[0, 0, 0, 0, 0, 9], 10);
        let t = mask_to_thickness(&m).unwrap();
        assert_eq!(t.get(0, 0), 5.0);
        assert!((1..9).all(|k| t.get(k, 0) == 0.0));
    }

    #[test]
    fn non_stacked_column_reported() {
        let m = LabelMask::new(3, 2, 3, vec![0, 0, 1, 2, 2, 1]).unwrap();
        match mask_to_thickness(&m) {
            Err(Error::NotStacked { column, row, .. }) => assert_eq!((column, row), (1, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rasterization_example() {
        let b = BoundarySet::new(4, 1, vec![2.0, 5.0, 5.0, 6.0]).unwrap();
        let m = boundaries_to_mask(&b, 8).unwrap();
        assert_eq!(m.labels(), &[0, 0, 1, 1, 1, 3, 4, 4]);
        let z = boundaries_to_mask(&BoundarySet::zeros(4, 2), 3).unwrap();
        assert!(z.labels().iter().all(|&l| l == 4));
        let bad = BoundarySet::new(2, 1, vec![3.0, 1.0]).unwrap();
        assert!(matches!(boundaries_to_mask(&bad, 4), Err(Error::NotMonotone { .. })));
    }

    #[test]
    fn one_hot_properties() {
        let m = LabelMask::new(2, 3, 4, vec![0, 1, 2, 3, 3, 1]).unwrap();
        let oh: Tensor<f64> = one_hot(&m, 4).unwrap();
        for px in 0..6 {
            let s: f64 = (0..4).map(|c| oh.data()[c * 6 + px]).sum();
            assert_eq!(s, 1.0);
        }
        assert_eq!(argmax_mask(&oh).unwrap(), m);
        assert!(one_hot::<f32>(&m, 3).is_err());
        let full = LabelMask::new(128, 128, 10, vec![0; 128 * 128]).unwrap();
        assert_eq!(one_hot::<f32>(&full, 10).unwrap().shape(), &[10, 128, 128]);
    }

    fn layered(height: usize, width: usize, classes: usize, rng: &mut ChaCha8Rng) -> LabelMask {
        let layers = classes - 1;
        let mut t = ThicknessMap::zeros(layers, width);
        for j in 0..width {
            for k in 0..layers {
                t.set(k, j, rng.gen_range(0..=(height / classes)) as f64);
            }
        }
        boundaries_to_mask(&thickness_to_boundaries(&t).unwrap(), height).unwrap()
    }

    #[test]
    fn identity_defects_leave_input_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = layered(32, 8, 5, &mut rng);
        let oh: Tensor<f32> = one_hot(&m, 5).unwrap();
        let s = simulate_defects(&oh, &DefectConfig::identity(), &mut rng).unwrap();
        assert_eq!(s.input, oh);
        assert_eq!(s.target, mask_to_thickness(&m).unwrap());
    }

    #[test]
    fn blur_keeps_column_sums() {
        // edge runs at least three sigma long, as in real crops
        let col = |cuts: [usize; 3]| (0..20).map(move |r| cuts.iter().filter(|&&c| r >= c).count() as u8);
        let labels: Vec<u8> = col([4, 9, 13]).zip(col([3, 3, 16])).flat_map(|(a, b)| [a, b]).collect();
        let m = LabelMask::new(20, 2, 4, labels).unwrap();
        let oh: Tensor<f64> = one_hot(&m, 4).unwrap();
        let mut soft = oh.clone();
        vertical_blur(&mut soft, 1.0).unwrap();
        assert_ne!(soft, oh);
        for c in 0..4 {
            for j in 0..2 {
                let sum = |t: &Tensor<f64>| (0..20).map(|r| t.data()[c * 40 + r * 2 + j]).sum::<f64>();
                assert!((sum(&soft) - sum(&oh)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn negative_unit_ellipse_zeroes_hit_channel() {
        let m = LabelMask::new(16, 16, 2, vec![0; 256]).unwrap();
        let mut oh: Tensor<f64> = one_hot(&m, 2).unwrap();
        let cfg = DefectConfig {
            ellipse_count: (1, 1),
            semi_axis_x: (4.0, 4.0),
            semi_axis_y: (4.0, 4.0),
            magnitude: (-1.0, -1.0),
            ellipse_mode: EllipseMode::PerChannel,
            ..DefectConfig::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        corrupt(&mut oh, &cfg, &mut rng).unwrap();
        let ch0 = oh.channel(0);
        let zeros = ch0.iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 0);
        assert!(ch0.iter().all(|&v| v == 0.0 || v == 1.0));
        // channel 1 started at zero, so the ellipse drives it to -1
        assert!(oh.channel(1).iter().all(|&v| v == 0.0 || v == -1.0));
    }

    #[test]
    fn shift_moves_only_the_top_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = layered(40, 6, 4, &mut rng);
        let cfg = DefectConfig { vertical_shift: (3, 3), ..DefectConfig::identity() };
        let oh: Tensor<f32> = one_hot(&m, 4).unwrap();
        let s = simulate_defects(&oh, &cfg, &mut rng).unwrap();
        let before = mask_to_thickness(&m).unwrap();
        for j in 0..6 {
            assert_eq!(s.target.get(0, j), before.get(0, j) + 3.0);
            for k in 1..3 {
                assert_eq!(s.target.get(k, j), before.get(k, j));
            }
        }
    }

    #[test]
    fn defect_config_validation() {
        assert!(DefectConfig::default().validate().is_ok());
        let bad = DefectConfig { magnitude: (-1.5, 1.0), ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
