//! IDX image/label loading and the cuboid layout shared by every stage.
//!
//! A [`Cuboid`] stores `height × width × depth` values with the spectral
//! index varying fastest, then the column, then the row. Local cuboids
//! (2×2 spatial blocks) are flattened with the same rule, so an LC vector is
//! `[(r0,c0,·), (r0,c1,·), (r1,c0,·), (r1,c1,·)]`.

use std::fs;
use std::io::Read;
use std::ops::Range;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Real-valued `height × width × depth` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Cuboid {
    height: usize,
    width: usize,
    depth: usize,
    values: Vec<f64>,
}

impl Cuboid {
    pub fn new(height: usize, width: usize, depth: usize, values: Vec<f64>) -> Result<Self> {
        Error::check_dim(height * width * depth, values.len())?;
        Ok(Cuboid {
            height,
            width,
            depth,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, depth: usize) -> Self {
        Cuboid {
            height,
            width,
            depth,
            values: vec![0.0; height * width * depth],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index(&self, row: usize, col: usize, k: usize) -> usize {
        (row * self.width + col) * self.depth + k
    }

    pub fn get(&self, row: usize, col: usize, k: usize) -> f64 {
        self.values[self.index(row, col, k)]
    }

    /// Spectral vector at one spatial position.
    pub fn spectrum(&self, row: usize, col: usize) -> &[f64] {
        let start = self.index(row, col, 0);
        &self.values[start..start + self.depth]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// Splits a cuboid into non-overlapping 2×2×depth local cuboids, row-major
/// over LC positions.
pub fn extract_lcs(gc: &Cuboid) -> Result<Vec<Cuboid>> {
    let block = extract_lc_block(gc)?;
    let lc_len = 4 * gc.depth;
    Ok(block
        .chunks_exact(lc_len)
        .map(|c| Cuboid {
            height: 2,
            width: 2,
            depth: gc.depth,
            values: c.to_vec(),
        })
        .collect())
}

/// Same as [`extract_lcs`] but returns the flattened LCs back to back, one
/// row of length `4·depth` per LC.
pub fn extract_lc_block(gc: &Cuboid) -> Result<Vec<f64>> {
    if !gc.height.is_multiple_of(2) || !gc.width.is_multiple_of(2) || gc.height == 0 || gc.width == 0 {
        return Err(Error::invalid(format!(
            "cuboid spatial size {}x{} is not even",
            gc.height, gc.width
        )));
    }
    let d = gc.depth;
    let mut out = Vec::with_capacity(gc.values.len());
    for lr in 0..gc.height / 2 {
        for lc in 0..gc.width / 2 {
            for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let start = gc.index(2 * lr + dr, 2 * lc + dc, 0);
                out.extend_from_slice(&gc.values[start..start + d]);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`extract_lc_block`]: `block` holds `(height/2)·(width/2)`
/// flattened LCs in row-major LC order.
pub fn assemble_lc_block(block: &[f64], height: usize, width: usize, depth: usize) -> Result<Cuboid> {
    if !height.is_multiple_of(2) || !width.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "cuboid spatial size {height}x{width} is not even"
        )));
    }
    Error::check_dim(height * width * depth, block.len())?;
    let mut gc = Cuboid::zeros(height, width, depth);
    let mut lcs = block.chunks_exact(4 * depth);
    for lr in 0..height / 2 {
        for lc in 0..width / 2 {
            let lc_values = lcs.next().expect("length checked above");
            for (q, (dr, dc)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                let start = gc.index(2 * lr + dr, 2 * lc + dc, 0);
                gc.values[start..start + depth].copy_from_slice(&lc_values[q * depth..(q + 1) * depth]);
            }
        }
    }
    Ok(gc)
}

pub fn assemble_lcs(lcs: &[Cuboid], height: usize, width: usize) -> Result<Cuboid> {
    let depth = lcs.first().map(|c| c.depth).ok_or(Error::Empty("no local cuboids"))?;
    let mut block = Vec::with_capacity(height * width * depth);
    for lc in lcs {
        if lc.height != 2 || lc.width != 2 || lc.depth != depth {
            return Err(Error::invalid("local cuboids must all be 2x2 with equal depth"));
        }
        block.extend_from_slice(&lc.values);
    }
    assemble_lc_block(&block, height, width, depth)
}

/// A stack of equally sized images with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    count: usize,
    height: usize,
    width: usize,
    depth: usize,
    pixels: Vec<f64>,
    labels: Option<Vec<u8>>,
}

impl ImageSet {
    pub fn new(
        count: usize,
        height: usize,
        width: usize,
        depth: usize,
        pixels: Vec<f64>,
        labels: Option<Vec<u8>>,
    ) -> Result<Self> {
        Error::check_dim(count * height * width * depth, pixels.len())?;
        if let Some(l) = &labels {
            Error::check_dim(count, l.len())?;
        }
        Ok(ImageSet {
            count,
            height,
            width,
            depth,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.depth
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn label(&self, i: usize) -> Option<u8> {
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn image_values(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn image(&self, i: usize) -> Cuboid {
        Cuboid {
            height: self.height,
            width: self.width,
            depth: self.depth,
            values: self.image_values(i).to_vec(),
        }
    }

    /// Number of classes implied by the labels (`max + 1`).
    pub fn class_count(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map(|&m| m as usize + 1)
    }

    /// Keeps images `range`, clamped to the set.
    pub fn select_range(&self, range: Range<usize>) -> ImageSet {
        let end = range.end.min(self.count);
        let start = range.start.min(end);
        self.select(&(start..end).collect::<Vec<_>>())
    }

    pub fn select(&self, indices: &[usize]) -> ImageSet {
        let n = self.image_len();
        let mut pixels = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            pixels.extend_from_slice(self.image_values(i));
        }
        ImageSet {
            count: indices.len(),
            height: self.height,
            width: self.width,
            depth: self.depth,
            pixels,
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Image indices grouped by label; empty when unlabeled.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let Some(labels) = &self.labels else {
            return Vec::new();
        };
        let classes = self.class_count().unwrap_or(0);
        let mut out = vec![Vec::new(); classes];
        for (i, &l) in labels.iter().enumerate() {
            out[l as usize].push(i);
        }
        out
    }
}

fn read_maybe_gzipped(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Parses an IDX3 image file; pixels are scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<ImageSet> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4)? as usize;
    let height = be_u32(bytes, 8)? as usize;
    let width = be_u32(bytes, 12)? as usize;
    let expected = count
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| Error::Format("IDX dimensions overflow".into()))?;
    let payload = &bytes[16..];
    if payload.len() < expected {
        return Err(Error::Format(format!(
            "truncated IDX image payload: {} of {expected} bytes",
            payload.len()
        )));
    }
    let pixels = payload[..expected].iter().map(|&b| b as f64 / 255.0).collect();
    ImageSet::new(count, height, width, 1, pixels, None)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(Error::Format(format!(
            "truncated IDX label payload: {} of {count} bytes",
            payload.len()
        )));
    }
    Ok(payload[..count].to_vec())
}

/// Loads an IDX image file and, optionally, its label file. Either may be
/// gzip-compressed.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<ImageSet> {
    let mut set = parse_idx_images(&read_maybe_gzipped(images_path)?)?;
    if let Some(lp) = labels_path {
        let labels = parse_idx_labels(&read_maybe_gzipped(lp)?)?;
        if labels.len() != set.count {
            return Err(Error::Format(format!(
                "image/label count mismatch: {} images, {} labels",
                set.count,
                labels.len()
            )));
        }
        set.labels = Some(labels);
    }
    Ok(set)
}

/// Centers every image in a zero border of side `target` (a power of two).
/// Odd margins put the extra row/column after the image.
pub fn pad_to_square_pow2(set: &ImageSet, target: usize) -> Result<ImageSet> {
    if !target.is_power_of_two() {
        return Err(Error::invalid(format!("target side {target} is not a power of two")));
    }
    if target < set.height || target < set.width {
        return Err(Error::invalid(format!(
            "target side {target} is smaller than the {}x{} images",
            set.height, set.width
        )));
    }
    if target == set.height && target == set.width {
        return Ok(set.clone());
    }
    let top = (target - set.height) / 2;
    let left = (target - set.width) / 2;
    let d = set.depth;
    let out_len = target * target * d;
    let mut pixels = vec![0.0; set.count * out_len];
    for i in 0..set.count {
        let src = set.image_values(i);
        let dst = &mut pixels[i * out_len..(i + 1) * out_len];
        for r in 0..set.height {
            let s = r * set.width * d;
            let t = ((r + top) * target + left) * d;
            dst[t..t + set.width * d].copy_from_slice(&src[s..s + set.width * d]);
        }
    }
    ImageSet::new(set.count, target, target, d, pixels, set.labels.clone())
}

/// Halves both spatial sides by averaging 2×2 blocks.
pub fn downsample2x(set: &ImageSet) -> Result<ImageSet> {
    if !set.height.is_multiple_of(2) || !set.width.is_multiple_of(2) {
        return Err(Error::invalid("downsampling needs even image sides"));
    }
    let (h, w, d) = (set.height / 2, set.width / 2, set.depth);
    let mut pixels = Vec::with_capacity(set.count * h * w * d);
    for i in 0..set.count {
        let img = set.image(i);
        for r in 0..h {
            for c in 0..w {
                for k in 0..d {
                    let s = img.get(2 * r, 2 * c, k)
                        + img.get(2 * r, 2 * c + 1, k)
                        + img.get(2 * r + 1, 2 * c, k)
                        + img.get(2 * r + 1, 2 * c + 1, k);
                    pixels.push(0.25 * s);
                }
            }
        }
    }
    ImageSet::new(set.count, h, w, d, pixels, set.labels.clone())
}

/// Pads to the next power of two, then box-downsamples until the side equals
/// `side`.
pub fn prepare_square(set: &ImageSet, side: usize) -> Result<ImageSet> {
    if !side.is_power_of_two() {
        return Err(Error::invalid(format!("side {side} is not a power of two")));
    }
    let padded_side = set.height.max(set.width).next_power_of_two().max(side);
    let mut out = pad_to_square_pow2(set, padded_side)?;
    while out.height > side {
        out = downsample2x(&out)?;
    }
    Ok(out)
}
