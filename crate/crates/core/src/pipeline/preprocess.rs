//! Baseline estimation, flattening and cropping of B-scans.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::topology::{BoundarySet, LabelMask};

/// Height of the flattened crop; one patch spans the full retina depth.
pub const CROP_HEIGHT: usize = 128;
/// Row of the crop on which the baseline lands.
pub const DEFAULT_TARGET_ROW: usize = 100;
pub const MEDIAN_WINDOW: usize = 15;

/// Per-column baseline rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    pub rows: Vec<f64>,
    /// Set when no column had a detectable band and the rows default to `H / 2`.
    pub fallback: bool,
}

fn box_smooth(image: &[f32], h: usize, w: usize) -> Vec<f64> {
    // 5 columns by 3 rows, clamped at the borders
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (r0, r1) = (r.saturating_sub(1), (r + 1).min(h - 1));
            let (c0, c1) = (c.saturating_sub(2), (c + 2).min(w - 1));
            let mut sum = 0.0;
            for rr in r0..=r1 {
                for cc in c0..=c1 {
                    sum += image[rr * w + cc] as f64;
                }
            }
            out[r * w + c] = sum / ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
        }
    }
    out
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Sliding median with the window shrunk at the borders.
pub fn median_filter(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let mut buf = Vec::with_capacity(window);
    (0..values.len())
        .map(|i| {
            buf.clear();
            buf.extend_from_slice(&values[i.saturating_sub(half)..(i + half + 1).min(values.len())]);
            median(&mut buf)
        })
        .collect()
}

fn band_centroid(column: &[f64]) -> Option<f64> {
    let (peak, &max) = column.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))?;
    let mut sorted = column.to_vec();
    let mid = median(&mut sorted);
    if max - mid <= 1e-9 {
        return None;
    }
    let threshold = max - 0.25 * (max - mid);
    let mut top = peak;
    while top > 0 && column[top - 1] >= threshold {
        top -= 1;
    }
    let mut bottom = peak;
    while bottom + 1 < column.len() && column[bottom + 1] >= threshold {
        bottom += 1;
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (r, &v) in column.iter().enumerate().take(bottom + 1).skip(top) {
        num += r as f64 * v;
        den += v;
    }
    Some(num / den)
}

/// Approximate row of the bright band at the bottom of the retina, per column.
pub fn estimate_baseline(bscan: &Tensor<f32>) -> Result<Baseline> {
    let (c, h, w) = bscan.chw()?;
    if c != 1 {
        return Err(Error::shape("estimate_baseline", format!("expected one channel, got {c}")));
    }
    let raw = bscan.data();
    let smooth = box_smooth(raw, h, w);
    let mut column = vec![0.0; h];
    let found: Vec<Option<f64>> = (0..w)
        .map(|j| {
            if (0..h).all(|r| raw[r * w + j] == 0.0) {
                return None;
            }
            for r in 0..h {
                column[r] = smooth[r * w + j];
            }
            band_centroid(&column)
        })
        .collect();
    let known: Vec<usize> = (0..w).filter(|&j| found[j].is_some()).collect();
    if known.is_empty() {
        log::warn!("no bright band found in any column; baseline defaults to H/2");
        return Ok(Baseline { rows: vec![h as f64 / 2.0; w], fallback: true });
    }
    // fill blank columns by linear interpolation between the nearest detections
    let rows: Vec<f64> = (0..w)
        .map(|j| {
            if let Some(v) = found[j] {
                return v;
            }
            let right = known.partition_point(|&k| k < j);
            match (right.checked_sub(1).map(|i| known[i]), known.get(right)) {
                (Some(a), Some(&b)) => {
                    let (va, vb) = (found[a].unwrap(), found[b].unwrap());
                    va + (vb - va) * (j - a) as f64 / (b - a) as f64
                }
                (Some(a), None) => found[a].unwrap(),
                (None, Some(&b)) => found[b].unwrap(),
                (None, None) => unreachable!("known is non-empty"),
            }
        })
        .collect();
    Ok(Baseline { rows: median_filter(&rows, MEDIAN_WINDOW), fallback: false })
}

/// How a B-scan was flattened and cropped.
///
/// Flattening moves column `j` down by `shifts[j]` rows; the crop then keeps
/// rows `crop_top .. crop_top + CROP_HEIGHT` of the flattened image. Crop
/// row `r` of column `j` therefore came from original row
/// `r + crop_top - shifts[j]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlattenRecord {
    pub shifts: Vec<i64>,
    pub crop_top: i64,
    pub original_height: usize,
}

impl FlattenRecord {
    pub fn width(&self) -> usize {
        self.shifts.len()
    }

    fn source_offset(&self, col: usize) -> i64 {
        self.crop_top - self.shifts[col]
    }

    /// Original row of crop row `row` in column `col`.
    pub fn to_original_row(&self, col: usize, row: f64) -> f64 {
        row + self.source_offset(col) as f64
    }

    pub fn to_crop_row(&self, col: usize, row: f64) -> f64 {
        row - self.source_offset(col) as f64
    }

    /// Maps boundary positions from crop coordinates back to the B-scan.
    pub fn boundaries_to_original(&self, b: &BoundarySet) -> Result<BoundarySet> {
        self.check_width("boundaries_to_original", b.width())?;
        let mut out = b.clone();
        for k in 0..b.layers() {
            for j in 0..b.width() {
                out.set(k, j, self.to_original_row(j, b.get(k, j)));
            }
        }
        Ok(out)
    }

    pub fn boundaries_to_crop(&self, b: &BoundarySet) -> Result<BoundarySet> {
        self.check_width("boundaries_to_crop", b.width())?;
        let mut out = b.clone();
        for k in 0..b.layers() {
            for j in 0..b.width() {
                out.set(k, j, self.to_crop_row(j, b.get(k, j)));
            }
        }
        Ok(out)
    }

    fn check_width(&self, op: &'static str, w: usize) -> Result<()> {
        if w != self.width() {
            return Err(Error::shape(op, format!("record covers {} columns, got {w}", self.width())));
        }
        Ok(())
    }

    /// Places a crop back into a zero-filled image of the original size.
    pub fn uncrop(&self, crop: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (c, ch, w) = crop.chw()?;
        self.check_width("uncrop", w)?;
        let h = self.original_height;
        let mut out = Tensor::zeros(&[c, h, w]);
        for k in 0..c {
            let src = crop.channel(k);
            let dst = &mut out.data_mut()[k * h * w..(k + 1) * h * w];
            for j in 0..w {
                let off = self.source_offset(j);
                for r in 0..ch {
                    let o = r as i64 + off;
                    if (0..h as i64).contains(&o) {
                        dst[o as usize * w + j] = src[r * w + j];
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Builds the record that puts `baseline` on `target_row` of the crop.
pub fn flatten_record(baseline: &[f64], height: usize, target_row: usize) -> Result<FlattenRecord> {
    if baseline.is_empty() || target_row >= CROP_HEIGHT {
        return Err(Error::invalid("flatten", "empty baseline or target row outside the crop"));
    }
    if let Some(b) = baseline.iter().find(|b| !(b.is_finite() && **b >= 0.0 && **b < height as f64)) {
        return Err(Error::invalid("flatten", format!("baseline row {b} outside image of height {height}")));
    }
    let rounded: Vec<i64> = baseline.iter().map(|b| b.round() as i64).collect();
    let mut sorted = rounded.clone();
    sorted.sort_unstable();
    let anchor = sorted[sorted.len() / 2];
    Ok(FlattenRecord {
        shifts: rounded.iter().map(|&b| anchor - b).collect(),
        crop_top: anchor - target_row as i64,
        original_height: height,
    })
}

/// Flattens and crops a `[1, H, W]` B-scan to `[1, 128, W]`; rows outside
/// the source image are zero.
pub fn flatten_and_crop(bscan: &Tensor<f32>, baseline: &[f64], target_row: usize) -> Result<(Tensor<f32>, FlattenRecord)> {
    let (c, h, w) = bscan.chw()?;
    if c != 1 {
        return Err(Error::shape("flatten_and_crop", format!("expected one channel, got {c}")));
    }
    if baseline.len() != w {
        return Err(Error::shape("flatten_and_crop", format!("{} baseline rows for width {w}", baseline.len())));
    }
    let record = flatten_record(baseline, h, target_row)?;
    let src = bscan.data();
    let mut out = vec![0.0f32; CROP_HEIGHT * w];
    for j in 0..w {
        let off = record.source_offset(j);
        for r in 0..CROP_HEIGHT {
            let o = r as i64 + off;
            if (0..h as i64).contains(&o) {
                out[r * w + j] = src[o as usize * w + j];
            }
        }
    }
    Ok((Tensor::new(&[1, CROP_HEIGHT, w], out)?, record))
}

/// Applies a record to a label mask. Rows above the source image take
/// class 0 and rows below it the last class, so the crop stays stacked.
pub fn flatten_mask(mask: &LabelMask, record: &FlattenRecord) -> Result<LabelMask> {
    let (h, w) = (mask.height(), mask.width());
    if w != record.width() || h != record.original_height {
        return Err(Error::shape("flatten_mask", format!("mask {h}x{w} does not match record")));
    }
    let last = (mask.num_classes() - 1) as u8;
    let src = mask.labels();
    let mut out = vec![0u8; CROP_HEIGHT * w];
    for j in 0..w {
        let off = record.source_offset(j);
        for r in 0..CROP_HEIGHT {
            let o = r as i64 + off;
            out[r * w + j] = if o < 0 {
                0
            } else if o >= h as i64 {
                last
            } else {
                src[o as usize * w + j]
            };
        }
    }
    LabelMask::new(CROP_HEIGHT, w, mask.num_classes(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_from(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> Tensor<f32> {
        Tensor::from_fn(&[1, h, w], |i| f(i / w, i % w))
    }

    #[test]
    fn single_bright_row() {
        let img = image_from(60, 40, |r, _| if r == 37 { 1.0 } else { 0.1 });
        let b = estimate_baseline(&img).unwrap();
        assert!(!b.fallback);
        assert!(b.rows.iter().all(|&v| (v - 37.0).abs() < 1e-9), "{:?}", b.rows);
    }

    #[test]
    fn constant_image_falls_back_to_middle() {
        let img = image_from(50, 8, |_, _| 0.4);
        let b = estimate_baseline(&img).unwrap();
        assert!(b.fallback);
        assert!(b.rows.iter().all(|&v| v == 25.0));
    }

    #[test]
    fn blank_columns_are_interpolated() {
        let img = image_from(60, 30, |r, c| if (10..14).contains(&c) { 0.0 } else if r == 20 { 1.0 } else { 0.2 });
        let b = estimate_baseline(&img).unwrap();
        assert!(b.rows.iter().all(|&v| (v - 20.0).abs() < 1e-9));
    }

    #[test]
    fn median_filter_ignores_outliers() {
        let mut v = vec![5.0; 30];
        v[12] = 90.0;
        v[13] = -40.0;
        assert!(median_filter(&v, 15).iter().all(|&x| x == 5.0));
        assert_eq!(median_filter(&[1.0, 2.0], 15), vec![1.5, 1.5]);
    }

    #[test]
    fn flat_input_is_pure_crop() {
        let img = image_from(200, 16, |r, c| (r * 16 + c) as f32);
        let baseline = vec![140.0; 16];
        let (crop, rec) = flatten_and_crop(&img, &baseline, DEFAULT_TARGET_ROW).unwrap();
        assert!(rec.shifts.iter().all(|&s| s == 0));
        assert_eq!(rec.crop_top, 40);
        assert_eq!(crop.shape(), &[1, 128, 16]);
        assert_eq!(crop.at3(0, 0, 3), img.at3(0, 40, 3));
        assert_eq!(crop.at3(0, 87, 0), img.at3(0, 127, 0));
        assert_eq!(crop.at3(0, 127, 15), 0.0 + img.at3(0, 167, 15));
    }

    #[test]
    fn wide_clinical_sized_scan_crops_to_128_rows() {
        let img = image_from(496, 1024, |r, _| if r == 300 { 1.0 } else { 0.0 });
        let b = estimate_baseline(&img).unwrap();
        let (crop, _) = flatten_and_crop(&img, &b.rows, DEFAULT_TARGET_ROW).unwrap();
        assert_eq!(crop.shape(), &[1, 128, 1024]);
    }

    #[test]
    fn uncrop_restores_pixels_inside_window() {
        let (h, w) = (300, 24);
        let img = image_from(h, w, |r, c| 1.0 + (r * w + c) as f32);
        let baseline: Vec<f64> = (0..w).map(|j| 190.0 + 8.0 * (j as f64 * 0.4).sin()).collect();
        let (crop, rec) = flatten_and_crop(&img, &baseline, DEFAULT_TARGET_ROW).unwrap();
        let back = rec.uncrop(&crop).unwrap();
        let mut restored = 0;
        for j in 0..w {
            for r in 0..h {
                let v = back.at3(0, r, j);
                if v != 0.0 {
                    assert_eq!(v, img.at3(0, r, j));
                    restored += 1;
                }
                let cr = rec.to_crop_row(j, r as f64);
                if (0.0..CROP_HEIGHT as f64).contains(&cr) {
                    assert_eq!(v, img.at3(0, r, j));
                }
            }
            // the baseline lands on the target row
            let landed = rec.to_crop_row(j, baseline[j].round());
            assert_eq!(landed, DEFAULT_TARGET_ROW as f64);
        }
        assert_eq!(restored, CROP_HEIGHT * w);
    }

    #[test]
    fn mask_fill_keeps_columns_stacked() {
        let (h, w) = (40, 3);
        let labels: Vec<u8> = (0..h * w).map(|i| ((i / w) / 10) as u8).collect();
        let mask = LabelMask::new(h, w, 4, labels).unwrap();
        let rec = flatten_record(&[30.0, 31.0, 29.0], h, DEFAULT_TARGET_ROW).unwrap();
        let flat = flatten_mask(&mask, &rec).unwrap();
        flat.check_stacked().unwrap();
        assert_eq!(flat.get(0, 0), 0);
        assert_eq!(flat.get(127, 2), 3);
    }
}
