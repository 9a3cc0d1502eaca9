//! Lesion-level uncertainty and uncertainty-gated detection.
//!
//! A lesion's uncertainty is the sum over its voxels of `ln U(i)`, floored at
//! `ln(1e-12)` per voxel. Raw lesion values are min-max rescaled to `[0, 1]`
//! over a cohort, and a prediction survives an uncertainty threshold `eta`
//! when its rescaled value is strictly below `eta`. `eta = 1` is the no-op
//! threshold: everything survives, including the cohort maximum.

use crate::error::{Error, Result};
use crate::lesion::{at_or_above, Lesion, LesionSet};
use crate::metrics::{match_retained, MatchResult};
use crate::volume::{check_dims, GridKind, LabelMask, VoxelGrid};

/// Floor applied to voxel uncertainties inside the log.
pub const LOG_FLOOR: f64 = 1e-12;

pub fn lesion_uncertainty(lesion: &Lesion, map: &VoxelGrid) -> Result<f64> {
    let dims = map.dims();
    let values = map.values();
    lesion
        .voxels
        .iter()
        .map(|&[x, y, z]| {
            if x >= dims.nx || y >= dims.ny || z >= dims.nz {
                return Err(Error::InvalidArgument(format!(
                    "lesion {} voxel ({x},{y},{z}) outside {dims}",
                    lesion.id
                )));
            }
            Ok((values[dims.index(x, y, z)] as f64).max(LOG_FLOOR).ln())
        })
        .sum()
}

pub fn lesion_uncertainties(set: &LesionSet, map: &VoxelGrid) -> Result<Vec<f64>> {
    check_dims(set.source_dims, map.dims())?;
    set.lesions.iter().map(|l| lesion_uncertainty(l, map)).collect()
}

/// `(x - min) / (max - min)`; a zero range maps everything to 0.
pub fn rescale_cohort(raws: &[f64]) -> Result<Vec<f64>> {
    if raws.is_empty() {
        return Err(Error::InvalidArgument("cannot rescale an empty cohort".into()));
    }
    let (lo, hi) = min_max(raws.iter().copied());
    Ok(raws.iter().map(|&x| rescale(x, lo, hi)).collect())
}

#[inline]
fn rescale(x: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        ((x - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

pub fn check_eta(eta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&eta) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("eta {eta} outside [0, 1]")))
    }
}

/// Whether a rescaled uncertainty survives threshold `eta`.
#[inline]
pub fn passes(scaled: f64, eta: f64) -> bool {
    eta >= 1.0 || scaled < eta
}

/// Min-max rescales a cohort of voxel maps jointly to `[0, 1]`.
pub fn rescale_voxel_maps(maps: &[&VoxelGrid]) -> Result<Vec<VoxelGrid>> {
    if maps.is_empty() {
        return Err(Error::InvalidArgument("cannot rescale an empty cohort".into()));
    }
    let (lo, hi) = min_max(maps.iter().flat_map(|m| m.values().iter().map(|&v| v as f64)));
    maps.iter()
        .map(|m| {
            let values = m.values().iter().map(|&v| rescale(v as f64, lo, hi) as f32).collect();
            VoxelGrid::new(m.dims(), GridKind::Uncertainty, values)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelFilter {
    /// Voxels whose rescaled uncertainty passes `eta`; only these are scored.
    pub retained: LabelMask,
    /// Retained voxels with `prob >= theta`.
    pub predicted: LabelMask,
}

/// Dual-threshold voxel classification. `scaled_map` must already be
/// rescaled to `[0, 1]` (see [`rescale_voxel_maps`]).
pub fn filter_voxels(prob: &VoxelGrid, scaled_map: &VoxelGrid, theta: f64, eta: f64) -> Result<VoxelFilter> {
    check_dims(prob.dims(), scaled_map.dims())?;
    check_eta(eta)?;
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::InvalidArgument(format!("theta {theta} outside [0, 1]")));
    }
    if prob.kind() != GridKind::Probability {
        return Err(Error::InvalidArgument("filter_voxels needs a probability grid".into()));
    }
    if let Some(v) = scaled_map.values().iter().find(|&&v| v > 1.0) {
        return Err(Error::InvalidArgument(format!(
            "uncertainty map holds {v}; rescale it to [0, 1] first"
        )));
    }
    let retained: Vec<bool> = scaled_map.values().iter().map(|&u| passes(u as f64, eta)).collect();
    let predicted = prob
        .values()
        .iter()
        .zip(&retained)
        .map(|(&p, &keep)| keep && at_or_above(p, theta))
        .collect();
    Ok(VoxelFilter {
        retained: LabelMask::new(prob.dims(), retained)?,
        predicted: LabelMask::new(prob.dims(), predicted)?,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VoxelCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl VoxelCounts {
    pub fn retained(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Confusion counts over retained voxels only.
pub fn voxel_counts(filter: &VoxelFilter, gt: &LabelMask) -> Result<VoxelCounts> {
    check_dims(filter.retained.dims(), gt.dims())?;
    let mut c = VoxelCounts::default();
    for ((&keep, &pred), &truth) in filter
        .retained
        .bits()
        .iter()
        .zip(filter.predicted.bits())
        .zip(gt.bits())
    {
        if !keep {
            continue;
        }
        match (pred, truth) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LesionFilter {
    /// Indexed by candidate id.
    pub retained: Vec<bool>,
    pub result: MatchResult,
}

/// Drops candidates whose rescaled uncertainty fails `eta`, then matches the
/// survivors against the full ground truth.
pub fn filter_lesions(candidates: &LesionSet, scaled: &[f64], gt: &LesionSet, eta: f64) -> Result<LesionFilter> {
    check_eta(eta)?;
    if scaled.len() != candidates.len() {
        return Err(Error::InvalidArgument(format!(
            "{} uncertainties for {} candidates",
            scaled.len(),
            candidates.len()
        )));
    }
    if let Some(v) = scaled.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!(
            "lesion uncertainty {v} outside [0, 1]; rescale first"
        )));
    }
    let retained: Vec<bool> = scaled.iter().map(|&u| passes(u, eta)).collect();
    let result = match_retained(candidates, Some(&retained), gt)?;
    Ok(LesionFilter { retained, result })
}

/// Threshold that keeps roughly `target` of the given rescaled values: the
/// value at rank `ceil(target * n)` in ascending order, or 1 when that rank
/// is past the end.
pub fn eta_for_retention(scaled: &[f64], target: f64) -> f64 {
    if scaled.is_empty() || target >= 1.0 {
        return 1.0;
    }
    let mut sorted = scaled.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = (target.max(0.0) * sorted.len() as f64).ceil() as usize;
    sorted.get(k).copied().unwrap_or(1.0)
}
