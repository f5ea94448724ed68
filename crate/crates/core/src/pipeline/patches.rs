//! Overlapping patch layout and column-wise stitching.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::topology::ThicknessMap;

pub const DEFAULT_PATCH_SIZE: usize = 128;
pub const DEFAULT_PATCH_COUNT: usize = 20;

/// Evenly spaced patch start columns covering an image of a given width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchLayout {
    pub patch_width: usize,
    pub image_width: usize,
    pub starts: Vec<usize>,
}

impl PatchLayout {
    /// Start `k` is `round(k * (W - size) / (count - 1))`; repeated starts
    /// (count larger than the number of distinct positions) collapse.
    pub fn new(image_width: usize, patch_width: usize, count: usize) -> Result<Self> {
        if patch_width == 0 || count == 0 {
            return Err(Error::invalid("patch_layout", "patch width and count must be positive"));
        }
        if image_width < patch_width {
            return Err(Error::invalid(
                "patch_layout",
                format!("image width {image_width} is smaller than the patch width {patch_width}"),
            ));
        }
        let span = (image_width - patch_width) as f64;
        let mut starts: Vec<usize> = if count == 1 {
            vec![0]
        } else {
            (0..count).map(|k| (k as f64 * span / (count - 1) as f64).round() as usize).collect()
        };
        starts.dedup();
        let layout = PatchLayout { patch_width, image_width, starts };
        if let Some(col) = layout.first_gap() {
            return Err(Error::invalid(
                "patch_layout",
                format!("{count} patches of width {patch_width} leave column {col} of {image_width} uncovered"),
            ));
        }
        Ok(layout)
    }

    pub fn count(&self) -> usize {
        self.starts.len()
    }

    /// Number of patches covering each column.
    pub fn coverage(&self) -> Vec<usize> {
        let mut cover = vec![0; self.image_width];
        for &s in &self.starts {
            for c in &mut cover[s..(s + self.patch_width).min(self.image_width)] {
                *c += 1;
            }
        }
        cover
    }

    pub fn first_gap(&self) -> Option<usize> {
        self.coverage().iter().position(|&c| c == 0)
    }
}

/// Columns `start .. start + len` of a `[C, H, W]` tensor.
pub fn crop_columns<T: Scalar>(image: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (c, h, w) = image.chw()?;
    if len == 0 || start + len > w {
        return Err(Error::shape("crop_columns", format!("columns {start}..{} of width {w}", start + len)));
    }
    let src = image.data();
    let mut out = Vec::with_capacity(c * h * len);
    for row in 0..c * h {
        out.extend_from_slice(&src[row * w + start..row * w + start + len]);
    }
    Tensor::new(&[c, h, len], out)
}

/// Cuts `[C, H, W]` into patches at the layout's start columns.
pub fn extract_patches<T: Scalar>(image: &Tensor<T>, layout: &PatchLayout) -> Result<Vec<(usize, Tensor<T>)>> {
    let (_, _, w) = image.chw()?;
    if w != layout.image_width {
        return Err(Error::shape("extract_patches", format!("layout is for width {}, image has {w}", layout.image_width)));
    }
    layout
        .starts
        .iter()
        .map(|&s| Ok((s, crop_columns(image, s, layout.patch_width)?)))
        .collect()
}

/// Averages patch predictions per column into one full-width map.
pub fn stitch(patches: &[(usize, ThicknessMap)], width: usize) -> Result<ThicknessMap> {
    let Some((_, first)) = patches.first() else {
        return Err(Error::invalid("stitch", "no patches"));
    };
    let layers = first.layers();
    let mut sum = vec![0.0; layers * width];
    let mut count = vec![0usize; width];
    for (start, map) in patches {
        if map.layers() != layers {
            return Err(Error::shape("stitch", format!("patch with {} layers, expected {layers}", map.layers())));
        }
        if start + map.width() > width {
            return Err(Error::shape("stitch", format!("patch at {start} extends past width {width}")));
        }
        for k in 0..layers {
            for j in 0..map.width() {
                sum[k * width + start + j] += map.get(k, j);
            }
        }
        for c in &mut count[*start..start + map.width()] {
            *c += 1;
        }
    }
    if let Some(col) = count.iter().position(|&c| c == 0) {
        return Err(Error::invalid("stitch", format!("column {col} is not covered by any patch")));
    }
    for k in 0..layers {
        for j in 0..width {
            sum[k * width + j] /= count[j] as f64;
        }
    }
    ThicknessMap::new(layers, width, sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_follow_rounding_formula() {
        let l = PatchLayout::new(1024, 128, 20).unwrap();
        assert_eq!(&l.starts[..4], &[0, 47, 94, 141]);
        assert_eq!(*l.starts.last().unwrap(), 896);
        for (k, &s) in l.starts.iter().enumerate() {
            assert_eq!(s, (k as f64 * 896.0 / 19.0).round() as usize);
        }
        assert!(PatchLayout::new(500, 128, 1).unwrap_err().to_string().contains("uncovered"));
        assert_eq!(PatchLayout::new(128, 128, 1).unwrap().starts, vec![0]);
        assert!(PatchLayout::new(100, 128, 3).is_err());
    }

    #[test]
    fn patches_carry_their_columns() {
        let img = Tensor::<f32>::from_fn(&[1, 2, 6], |i| i as f32);
        let layout = PatchLayout::new(6, 4, 2).unwrap();
        let p = extract_patches(&img, &layout).unwrap();
        assert_eq!(p[1].0, 2);
        assert_eq!(p[1].1.data(), &[2.0, 3.0, 4.0, 5.0, 8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn stitching_means() {
        let a = ThicknessMap::new(1, 2, vec![1.0, 2.0]).unwrap();
        let b = ThicknessMap::new(1, 2, vec![4.0, 7.0]).unwrap();
        let s = stitch(&[(0, a.clone()), (1, b)], 3).unwrap();
        assert_eq!(s.data(), &[1.0, 3.0, 7.0]);
        assert_eq!(stitch(&[(0, a.clone())], 2).unwrap(), a);
        assert!(stitch(&[(0, a)], 3).is_err());
    }
}
