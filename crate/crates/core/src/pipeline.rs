//! Dual-stage inference: window, coarse localization, left/right split,
//! per-side VOI crop, multi-scale fine segmentation, merge and refinement.

use serde::{Deserialize, Serialize};
use tensorkit::Mode;

use crate::error::{Error, Result};
use crate::nets::{CoarseNet, FineNet};
use crate::postproc::{connected_components, refine_canal};
use crate::volgrid::{
    crop_pad, mask_bounding_box, paste, resample, BinaryMask, Box3, Grid, Interp, NormVolume, ProbMap, Volume,
};
use crate::windowing::{auto_window, WindowParams, DEFAULT_BIN_WIDTH};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Grid order `[nx, ny, nz]`, as are all dims below.
    pub coarse_input_dims: [usize; 3],
    pub voi_margin_voxels: usize,
    /// Base VOI dims followed by the two auxiliary scales.
    pub fine_dims: [[usize; 3]; 3],
    pub threshold: f32,
    pub bin_width: i32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            coarse_input_dims: [64; 3],
            voi_margin_voxels: 8,
            fine_dims: [[48; 3], [32; 3], [24; 3]],
            threshold: 0.5,
            bin_width: DEFAULT_BIN_WIDTH,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} must lie in (0, 1)", self.threshold));
        }
        if self.bin_width <= 0 {
            return bad(format!("bin_width {} must be positive", self.bin_width));
        }
        for d in std::iter::once(&self.coarse_input_dims).chain(&self.fine_dims) {
            if d.contains(&0) {
                return bad(format!("dims {d:?} must be positive"));
            }
        }
        Ok(())
    }

    pub fn base_dims(&self) -> [usize; 3] {
        self.fine_dims[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    /// Low `x`.
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

/// Where a VOI sits in the full volume; serialized as the sidecar written
/// next to each VOI crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Voi {
    pub side: Side,
    pub box_lo: [i64; 3],
    pub box_hi: [i64; 3],
    pub base_dims: [usize; 3],
}

impl Voi {
    pub fn bbox(&self) -> Box3 {
        Box3 { lo: self.box_lo, hi: self.box_hi }
    }
}

/// A VOI with its fine-stage probabilities at base dims.
#[derive(Debug, Clone)]
pub struct VoiRecord {
    pub voi: Voi,
    pub prob: ProbMap,
}

/// Coarse probabilities at the dims of `v`.
pub fn coarse_segment(v: &NormVolume, net: &mut CoarseNet, cfg: &PipelineConfig) -> Result<ProbMap> {
    if !net.is_ready() {
        return Err(Error::UntrainedNet);
    }
    let small = resample(v, cfg.coarse_input_dims, Interp::Trilinear)?;
    let out = net.forward(&small.to_tensor(), Mode::Eval)?;
    let p = Grid::from_tensor_channel(&out.main, 0, 0, small.spacing())?;
    resample(&p, v.dims(), Interp::Trilinear)
}

/// Whether voxel column `x` lies left of, on, or right of the midplane
/// `nx / 2`, judged by its centre.
fn half(x: usize, nx: usize) -> std::cmp::Ordering {
    (2 * x + 1).cmp(&nx)
}

/// Thresholds the coarse map and assigns each 26-connected component to a
/// side by its centroid. Components with voxels on both sides of the
/// midplane are cut there. Voxels centred exactly on the midplane (odd
/// `nx`) and centroids on it go right.
pub fn split_left_right(coarse: &ProbMap, threshold: f32) -> (BinaryMask, BinaryMask) {
    use std::cmp::Ordering::Less;
    let m = coarse.threshold(threshold);
    let nx = m.dims()[0];
    let cc = connected_components(&m);
    let k = cc.count();
    // Per label: sum of centre x, count, and whether voxels lie on each side.
    let mut sum_x = vec![0.0f64; k];
    let mut has_left = vec![false; k];
    let mut has_right = vec![false; k];
    for (i, &l) in cc.labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let j = l as usize - 1;
        let x = i % nx;
        sum_x[j] += x as f64 + 0.5;
        if half(x, nx) == Less {
            has_left[j] = true;
        } else {
            has_right[j] = true;
        }
    }
    let left_of_midplane: Vec<bool> = (0..k).map(|j| sum_x[j] / (cc.sizes[j] as f64) < nx as f64 / 2.0).collect();
    let mut left = Grid::filled(m.dims(), m.spacing(), 0u8);
    let mut right = Grid::filled(m.dims(), m.spacing(), 0u8);
    for (i, &l) in cc.labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let j = l as usize - 1;
        let to_left = if has_left[j] && has_right[j] { half(i % nx, nx) == Less } else { left_of_midplane[j] };
        let dst = if to_left { &mut left } else { &mut right };
        dst.data_mut()[i] = 1;
    }
    (left, right)
}

/// Box around `side_mask` grown by the margin and clipped to the volume,
/// plus the crop resampled to base dims.
pub fn extract_voi(v: &NormVolume, side_mask: &BinaryMask, side: Side, cfg: &PipelineConfig) -> Result<(Voi, NormVolume)> {
    if side_mask.dims() != v.dims() {
        return Err(Error::DimMismatch(side_mask.dims(), v.dims()));
    }
    let bb = mask_bounding_box(side_mask).ok_or(Error::EmptySideMask)?;
    let b = bb
        .expand(cfg.voi_margin_voxels as i64)
        .clip(v.dims())
        .expect("a box around set voxels intersects the volume");
    let crop = resample(&crop_pad(v, b, 0.0), cfg.base_dims(), Interp::Trilinear)?;
    Ok((Voi { side, box_lo: b.lo, box_hi: b.hi, base_dims: cfg.base_dims() }, crop))
}

/// `x1` is the VOI itself; `x2` and `x3` are its trilinear resamples to
/// the auxiliary dims.
pub fn make_multiscale_inputs(voi: &NormVolume, cfg: &PipelineConfig) -> Result<[NormVolume; 3]> {
    Ok([
        voi.clone(),
        resample(voi, cfg.fine_dims[1], Interp::Trilinear)?,
        resample(voi, cfg.fine_dims[2], Interp::Trilinear)?,
    ])
}

pub fn fine_segment(inputs: &[NormVolume; 3], net: &mut FineNet) -> Result<ProbMap> {
    if !net.is_ready() {
        return Err(Error::UntrainedNet);
    }
    let [x1, x2, x3] = inputs.each_ref().map(|g| g.to_tensor());
    let p = net.forward(&x1, &x2, &x3, Mode::Eval)?;
    Grid::from_tensor_channel(&p, 0, 0, inputs[0].spacing())
}

/// Resamples every VOI back into its box, keeps the maximum where boxes
/// overlap and thresholds (`>=`). Voxels outside all boxes stay 0 since
/// the threshold is positive.
pub fn merge_to_full(vois: &[VoiRecord], full_dims: [usize; 3], spacing: [f64; 3], cfg: &PipelineConfig) -> Result<BinaryMask> {
    let mut acc: ProbMap = Grid::filled(full_dims, spacing, 0.0);
    for rec in vois {
        let b = rec.voi.bbox();
        if !b.within(full_dims) || (0..3).any(|a| b.lo[a] >= b.hi[a]) {
            return Err(Error::BoxOutOfRange { lo: b.lo, hi: b.hi, dims: full_dims });
        }
        let p = resample(&rec.prob, b.dims(), Interp::Trilinear)?;
        let mut current = crop_pad(&acc, b, 0.0);
        for (c, &q) in current.data_mut().iter_mut().zip(p.data()) {
            *c = c.max(q);
        }
        paste(&mut acc, &current, b)?;
    }
    Ok(acc.threshold(cfg.threshold))
}

/// Everything a pipeline run produces, including the stage intermediates.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub window: WindowParams,
    pub normalized: NormVolume,
    pub coarse: ProbMap,
    pub coarse_left: BinaryMask,
    pub coarse_right: BinaryMask,
    pub vois: Vec<VoiRecord>,
    pub left: BinaryMask,
    pub right: BinaryMask,
    pub full: BinaryMask,
}

impl PipelineOutput {
    pub fn side(&self, side: Side) -> &BinaryMask {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }
}

/// Fine stage for one side: crop, segment, return the record.
pub fn segment_side(v: &NormVolume, side_mask: &BinaryMask, side: Side, fine: &mut FineNet, cfg: &PipelineConfig) -> Result<VoiRecord> {
    let (voi, crop) = extract_voi(v, side_mask, side, cfg)?;
    let inputs = make_multiscale_inputs(&crop, cfg)?;
    Ok(VoiRecord { voi, prob: fine_segment(&inputs, fine)? })
}

/// Merges one side's VOI (if any) and refines it.
pub fn finish_side(rec: Option<&VoiRecord>, full_dims: [usize; 3], spacing: [f64; 3], cfg: &PipelineConfig) -> Result<BinaryMask> {
    let merged = merge_to_full(rec.cloned().as_slice(), full_dims, spacing, cfg)?;
    Ok(refine_canal(&merged))
}

pub fn run_pipeline(v: &Volume, coarse: &mut CoarseNet, fine: &mut FineNet, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    if !coarse.is_ready() || !fine.is_ready() {
        return Err(Error::UntrainedNet);
    }
    let (window, normalized) = auto_window(v, cfg.bin_width)?;
    let coarse_prob = coarse_segment(&normalized, coarse, cfg)?;
    let (coarse_left, coarse_right) = split_left_right(&coarse_prob, cfg.threshold);
    let mut vois = Vec::new();
    for (side, mask) in [(Side::Left, &coarse_left), (Side::Right, &coarse_right)] {
        if mask.is_all_zero() {
            log::warn!("coarse stage found no {} canal", side.name());
            continue;
        }
        vois.push(segment_side(&normalized, mask, side, fine, cfg)?);
    }
    let (dims, spacing) = (v.dims(), v.spacing());
    let record = |side| vois.iter().find(|r| r.voi.side == side);
    let left = finish_side(record(Side::Left), dims, spacing, cfg)?;
    let right = finish_side(record(Side::Right), dims, spacing, cfg)?;
    let full = left.union(&right)?;
    Ok(PipelineOutput { window, normalized, coarse: coarse_prob, coarse_left, coarse_right, vois, left, right, full })
}
