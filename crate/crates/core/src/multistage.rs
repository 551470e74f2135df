//! The P-stage cascade over the 2×2 quad-tree.
//!
//! Stage 1 consumes raw pixels. Every later stage consumes the
//! position-format output of its predecessor, so a stage-`p` local cuboid has
//! `4·2·K_{p−1}` entries where `K_{p−1}` is the previous signed depth.

use std::cmp::Ordering;

use log::{info, warn};
use rayon::prelude::*;

use crate::dataset::{assemble_lc_block, extract_lc_block, Cuboid, ImageSet};
use crate::error::{Error, Result};
use crate::stage::{
    position_to_sign, position_to_sign_linear, position_to_sign_nearest, sign_to_position, FitStatus, KernelCap,
    StageAccumulator, StageKernels,
};

/// Images folded into one covariance update while fitting.
pub const FIT_BATCH: usize = 256;

/// How position vectors are mapped back to signed values during inversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsMode {
    /// Validating conversion; rejects pairs with two positive slots.
    Strict,
    /// `(p, n) ↦ p − n`, for approximate position vectors.
    Linear,
    /// Nearest valid pair, the least-squares choice for approximate vectors.
    Nearest,
}

/// Number of stages for a square side `2^P`.
pub fn stage_count_for_side(side: usize) -> Result<usize> {
    if side < 2 || !side.is_power_of_two() {
        return Err(Error::invalid(format!("image side {side} is not a power of two ≥ 2")));
    }
    Ok(side.trailing_zeros() as usize)
}

/// Lossless signed depths `K_1..K_P` for input depth `depth`:
/// `K_1 = 4·depth`, `K_p = 8·K_{p−1}`.
pub fn lossless_signed_dims(stages: usize, depth: usize) -> Vec<usize> {
    let mut dims = Vec::with_capacity(stages);
    let mut k = 4 * depth;
    for _ in 0..stages {
        dims.push(k);
        k *= 8;
    }
    dims
}

/// Signed depth produced by a stage with `cap` on an LC of `input_dim`.
pub fn capped_signed_dim(input_dim: usize, cap: KernelCap) -> usize {
    1 + cap.resolve(input_dim - 1)
}

/// Signed depth of every stage under `caps`, before fitting.
///
/// Fitting can produce fewer kernels when a stage has no AC energy.
pub fn planned_signed_dims(depth: usize, caps: &[KernelCap]) -> Vec<usize> {
    let mut dims = Vec::with_capacity(caps.len());
    let mut input = 4 * depth;
    for &cap in caps {
        let k = capped_signed_dim(input, cap);
        dims.push(k);
        input = 8 * k;
    }
    dims
}

/// Per-stage signed coefficient grids of one image. Stage `p` (1-based) has
/// side `2^{P−p}`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCoeffs {
    grids: Vec<Cuboid>,
}

impl StageCoeffs {
    pub fn stage_count(&self) -> usize {
        self.grids.len()
    }

    /// Signed grid of stage `p`, 1-based.
    pub fn stage(&self, p: usize) -> &Cuboid {
        &self.grids[p - 1]
    }

    pub fn last(&self) -> &Cuboid {
        self.grids.last().expect("at least one stage")
    }

    pub fn grids(&self) -> &[Cuboid] {
        &self.grids
    }

    pub fn into_grids(self) -> Vec<Cuboid> {
        self.grids
    }

    /// Position-format grid of stage `p`.
    pub fn position(&self, p: usize) -> Cuboid {
        to_position(self.stage(p))
    }
}

fn to_position(signed: &Cuboid) -> Cuboid {
    let mut values = Vec::with_capacity(2 * signed.len());
    sign_to_position(signed.values(), &mut values);
    Cuboid::new(signed.height(), signed.width(), 2 * signed.depth(), values).expect("shape is consistent")
}

/// A fitted cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct SaakModel {
    side: usize,
    depth: usize,
    caps: Vec<KernelCap>,
    stages: Vec<StageKernels>,
}

impl SaakModel {
    /// Assembles a model from fitted stages, checking that dimensions chain.
    pub fn from_parts(side: usize, depth: usize, caps: Vec<KernelCap>, stages: Vec<StageKernels>) -> Result<Self> {
        let p = stage_count_for_side(side)?;
        if depth == 0 {
            return Err(Error::invalid("input depth must be positive"));
        }
        Error::check_dim(p, caps.len())?;
        Error::check_dim(p, stages.len())?;
        let mut input = 4 * depth;
        for (i, s) in stages.iter().enumerate() {
            if s.stage() != i + 1 {
                return Err(Error::Format(format!(
                    "stage {} stored at position {}",
                    s.stage(),
                    i + 1
                )));
            }
            Error::check_dim(input, s.input_dim())?;
            input = 8 * s.signed_dim();
        }
        Ok(SaakModel {
            side,
            depth,
            caps,
            stages,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Input spectral depth `K_0` (1 for grey images).
    pub fn input_depth(&self) -> usize {
        self.depth
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn caps(&self) -> &[KernelCap] {
        &self.caps
    }

    /// Kernels of stage `p`, 1-based.
    pub fn stage(&self, p: usize) -> &StageKernels {
        &self.stages[p - 1]
    }

    pub fn stages(&self) -> &[StageKernels] {
        &self.stages
    }

    pub fn signed_dims(&self) -> Vec<usize> {
        self.stages.iter().map(StageKernels::signed_dim).collect()
    }

    /// Spatial side `2^{P−p}` of the stage-`p` grid.
    pub fn grid_side(&self, p: usize) -> usize {
        self.side >> p
    }

    pub fn last_dim(&self) -> usize {
        self.stages.last().map_or(0, StageKernels::signed_dim)
    }

    /// Number of signed coefficients of stage `p` over the whole grid.
    pub fn stage_len(&self, p: usize) -> usize {
        let n = self.grid_side(p);
        n * n * self.stage(p).signed_dim()
    }

    pub fn is_lossless(&self) -> bool {
        self.stages.iter().all(StageKernels::is_lossless)
    }

    fn check_image(&self, image: &Cuboid) -> Result<()> {
        if image.height() != self.side || image.width() != self.side || image.depth() != self.depth {
            return Err(Error::invalid(format!(
                "image is {}x{}x{}, model expects {}x{}x{}",
                image.height(),
                image.width(),
                image.depth(),
                self.side,
                self.side,
                self.depth
            )));
        }
        Ok(())
    }

    /// Runs all stages and keeps every signed grid.
    pub fn forward(&self, image: &Cuboid) -> Result<StageCoeffs> {
        self.check_image(image)?;
        let grids = self
            .forward_many(std::slice::from_ref(image), self.stages.len())?
            .remove(0);
        Ok(StageCoeffs { grids })
    }

    /// Forward transform of image `i` of a set whose geometry matches the model.
    pub fn forward_image(&self, images: &ImageSet, i: usize) -> Result<StageCoeffs> {
        self.forward(&images.image(i))
    }

    /// Forward transforms of `images[range]`, in order. Images are processed
    /// in chunks with one matrix product per stage and chunk.
    pub fn forward_batch(&self, images: &ImageSet, range: std::ops::Range<usize>) -> Result<Vec<StageCoeffs>> {
        let mut out = Vec::with_capacity(range.len());
        let indices: Vec<usize> = range.collect();
        for chunk in indices.chunks(FIT_BATCH) {
            let imgs: Vec<Cuboid> = chunk.iter().map(|&i| images.image(i)).collect();
            imgs.iter().try_for_each(|img| self.check_image(img))?;
            out.extend(
                self.forward_many(&imgs, self.stages.len())?
                    .into_iter()
                    .map(|grids| StageCoeffs { grids }),
            );
        }
        Ok(out)
    }

    /// Signed grids of stages `1..=upto` for every image.
    fn forward_many(&self, images: &[Cuboid], upto: usize) -> Result<Vec<Vec<Cuboid>>> {
        let mut grids: Vec<Vec<Cuboid>> = images.iter().map(|_| Vec::with_capacity(upto)).collect();
        for (i, kernels) in self.stages[..upto].iter().enumerate() {
            let blocks: Vec<Vec<f64>> = images
                .par_iter()
                .zip(grids.par_iter())
                .map(|(img, g)| match g.last() {
                    None => extract_lc_block(img),
                    Some(prev) => extract_lc_block(&to_position(prev)),
                })
                .collect::<Result<_>>()?;
            let signed = kernels.forward_block(&blocks.concat())?;
            let n = self.grid_side(i + 1);
            let k = kernels.signed_dim();
            for (g, values) in grids.iter_mut().zip(signed.chunks_exact(n * n * k)) {
                g.push(Cuboid::new(n, n, k, values.to_vec())?);
            }
        }
        Ok(grids)
    }

    /// LC blocks feeding stage `p` (1-based) for each image.
    fn stage_input_blocks(&self, images: &[Cuboid], p: usize) -> Result<Vec<Vec<f64>>> {
        if p == 1 {
            return images.par_iter().map(extract_lc_block).collect();
        }
        self.forward_many(images, p - 1)?
            .par_iter()
            .map(|g| extract_lc_block(&to_position(g.last().expect("at least one stage"))))
            .collect()
    }

    /// Inverts a last-stage signed grid back to an image. Lossless models
    /// validate every P/S step; lossy models map each approximate pair to
    /// the nearest valid one.
    pub fn inverse(&self, last: &Cuboid) -> Result<Cuboid> {
        let mode = if self.is_lossless() {
            PsMode::Strict
        } else {
            PsMode::Nearest
        };
        self.inverse_with(last, mode)
    }

    pub fn inverse_with(&self, last: &Cuboid, mode: PsMode) -> Result<Cuboid> {
        let p_last = self.stage_count();
        let n = self.grid_side(p_last);
        if last.height() != n || last.width() != n || last.depth() != self.last_dim() {
            return Err(Error::invalid(format!(
                "last-stage grid is {}x{}x{}, model expects {n}x{n}x{}",
                last.height(),
                last.width(),
                last.depth(),
                self.last_dim()
            )));
        }
        let mut signed = last.values().to_vec();
        for p in (1..=p_last).rev() {
            let kernels = self.stage(p);
            let block = kernels.inverse_block(&signed)?;
            let side = 2 * self.grid_side(p);
            if p == 1 {
                return assemble_lc_block(&block, side, side, self.depth);
            }
            let depth = kernels.input_dim() / 4;
            let gc = assemble_lc_block(&block, side, side, depth)?;
            signed = Vec::with_capacity(gc.len() / 2);
            match mode {
                PsMode::Strict => position_to_sign(gc.values(), &mut signed)?,
                PsMode::Linear => position_to_sign_linear(gc.values(), &mut signed),
                PsMode::Nearest => position_to_sign_nearest(gc.values(), &mut signed),
            }
        }
        unreachable!("a model has at least one stage")
    }

    /// Forward, keep the `k` leading last-stage signed coefficients (DC,
    /// then AC by decreasing eigenvalue), zero the rest and invert.
    pub fn reconstruct_topk(&self, image: &Cuboid, k: usize) -> Result<Cuboid> {
        let total = self.stage_len(self.stage_count());
        if k > total {
            return Err(Error::invalid(format!(
                "k = {k} exceeds the {total} last-stage coefficients"
            )));
        }
        let coeffs = self.forward(image)?;
        let last = coeffs.last();
        let mut truncated = Cuboid::zeros(last.height(), last.width(), last.depth());
        for i in leading_order(last.height(), last.depth()).into_iter().take(k) {
            truncated.values_mut()[i] = last.values()[i];
        }
        let mode = if k == total && self.is_lossless() {
            PsMode::Strict
        } else {
            PsMode::Nearest
        };
        self.inverse_with(&truncated, mode)
    }

    /// Per-stage fraction of fitting energy kept by the stored kernels.
    pub fn energy_retention(&self) -> Vec<f64> {
        self.stages.iter().map(StageKernels::energy_retention).collect()
    }
}

/// Flat indices of a `side × side × depth` grid in leading order: channel
/// first, then row-major position.
pub fn leading_order(side: usize, depth: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(side * side * depth);
    for ch in 0..depth {
        for pos in 0..side * side {
            order.push(pos * depth + ch);
        }
    }
    order
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    a.len().cmp(&b.len())
}

/// Fits every stage bottom-up. Stage `p` is fitted on the LCs of all images
/// after passing them through the already fitted stages `1..p`.
///
/// A stage with fewer LC samples than input dimensions is fitted from
/// sample snapshots and cannot be lossless.
///
/// Images are visited in a canonical order (lexicographic by pixel values) in
/// fixed-size batches, so the result does not depend on the order of
/// `images` or on the thread count.
pub fn fit_model(images: &ImageSet, caps: &[KernelCap]) -> Result<SaakModel> {
    if images.is_empty() {
        return Err(Error::Empty("no images to fit"));
    }
    if images.height() != images.width() {
        return Err(Error::invalid(format!(
            "images are {}x{}, expected square",
            images.height(),
            images.width()
        )));
    }
    let side = images.height();
    let p_total = stage_count_for_side(side)?;
    if caps.len() != p_total {
        return Err(Error::invalid(format!(
            "{} kernel caps given for {p_total} stages",
            caps.len()
        )));
    }
    let depth = images.depth();

    let mut order: Vec<usize> = (0..images.len()).collect();
    order.sort_by(|&a, &b| lexicographic(images.image_values(a), images.image_values(b)).then(a.cmp(&b)));

    let mut model = SaakModel {
        side,
        depth,
        caps: caps.to_vec(),
        stages: Vec::with_capacity(p_total),
    };
    let mut input_dim = 4 * depth;
    for (i, &cap) in caps.iter().enumerate() {
        let p = i + 1;
        if let KernelCap::Max(m) = cap {
            if m > input_dim - 1 {
                return Err(Error::invalid(format!(
                    "stage {p}: kernel cap {m} exceeds the {} AC kernels available",
                    input_dim - 1
                )));
            }
        }
        let n = model.grid_side(p);
        let samples = images.len() * n * n;
        let mut acc = if samples < input_dim {
            info!("stage {p}: {samples} samples for input {input_dim}; fitting from snapshots");
            StageAccumulator::snapshots(input_dim)
        } else {
            StageAccumulator::new(input_dim)
        };
        for chunk in order.chunks(FIT_BATCH) {
            let imgs: Vec<Cuboid> = chunk.iter().map(|&idx| images.image(idx)).collect();
            let blocks = model.stage_input_blocks(&imgs, p)?;
            acc.push_block(&blocks.concat())?;
        }
        let (kernels, status) = acc.fit(p, cap)?;
        if status == FitStatus::NoAcEnergy {
            warn!("stage {p} has no AC energy");
        }
        info!(
            "stage {p}: input {input_dim}, {} AC kernels, {} samples, energy kept {:.6}",
            kernels.ac_count(),
            kernels.sample_count(),
            kernels.energy_retention()
        );
        input_dim = 8 * kernels.signed_dim();
        model.stages.push(kernels);
    }
    Ok(model)
}
