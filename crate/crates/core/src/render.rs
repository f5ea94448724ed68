//! Binary PGM/PPM output: B-scans, boundary overlays and probability maps,
//! always at the size of the source B-scan.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::topology::BoundarySet;

/// Overlay colours, cycled when there are more boundaries.
pub const PALETTE: [[u8; 3]; 9] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
];

pub const TRUTH_COLOUR: [u8; 3] = [255, 255, 255];

/// An 8-bit raster with one (gray) or three (RGB) interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

fn quantize(v: f32) -> u8 {
    if v.is_nan() {
        0
    } else {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }
}

impl Raster {
    /// Gray raster of a `[1, H, W]` image or channel `c` of a `[C, H, W]`
    /// map, values clamped to `[0, 1]`.
    pub fn gray(t: &Tensor<f32>, channel: usize) -> Result<Self> {
        let (c, h, w) = t.chw()?;
        if channel >= c {
            return Err(Error::invalid("render", format!("channel {channel} of a {c}-channel tensor")));
        }
        Ok(Raster { width: w, height: h, channels: 1, data: t.channel(channel).iter().map(|&v| quantize(v)).collect() })
    }

    pub fn to_rgb(&self) -> Raster {
        if self.channels == 3 {
            return self.clone();
        }
        Raster {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }

    /// Paints one pixel per column per boundary, at the first row of the
    /// layer below the boundary. Positions outside the raster are skipped.
    pub fn draw_boundaries(&mut self, b: &BoundarySet, colour: Option<[u8; 3]>) -> Result<()> {
        if b.width() != self.width {
            return Err(Error::shape("render", format!("boundaries of width {} on a {}-wide image", b.width(), self.width)));
        }
        if self.channels != 3 {
            *self = self.to_rgb();
        }
        for k in 0..b.layers() {
            let c = colour.unwrap_or(PALETTE[k % PALETTE.len()]);
            for j in 0..b.width() {
                let row = b.get(k, j).round();
                if row.is_finite() && row >= 0.0 && (row as usize) < self.height {
                    let at = 3 * (row as usize * self.width + j);
                    self.data[at..at + 3].copy_from_slice(&c);
                }
            }
        }
        Ok(())
    }

    pub fn to_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    /// Parses the binary PGM/PPM files written by [`Raster::to_pnm`].
    pub fn from_pnm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::invalid("pnm", m.to_string());
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
        }
        let channels = match fields[0] {
            "P5" => 1,
            "P6" => 3,
            other => return Err(bad(&format!("unsupported magic {other:?}"))),
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad header field {s:?}")));
        let (width, height) = (num(fields[1])?, num(fields[2])?);
        if num(fields[3])? != 255 {
            return Err(bad("only 8-bit rasters are supported"));
        }
        let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing pixel data"))?;
        if data.len() != width * height * channels {
            return Err(bad(&format!("expected {} pixel bytes, found {}", width * height * channels, data.len())));
        }
        Ok(Raster { width, height, channels, data: data.to_vec() })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_pnm()).map_err(|e| Error::io(path, e))
    }
}

/// B-scan with predicted boundaries in palette colours and, when given,
/// the ground truth underneath in white.
pub fn overlay(bscan: &Tensor<f32>, pred: &BoundarySet, truth: Option<&BoundarySet>) -> Result<Raster> {
    let mut r = Raster::gray(bscan, 0)?.to_rgb();
    if let Some(t) = truth {
        r.draw_boundaries(t, Some(TRUTH_COLOUR))?;
    }
    r.draw_boundaries(pred, None)?;
    Ok(r)
}
