//! Lesion-level detection scoring.
//!
//! A ground-truth lesion is detected when the union of all candidate voxels,
//! each grown by its 18-neighbourhood, covers at least three of its voxels or
//! strictly more than half of them. A candidate of three or more voxels whose
//! grown footprint touches no ground-truth lesion is a false positive; smaller
//! untouched candidates are ignored. Matching is many-to-many.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lesion::{check_same_dims, LesionSet, SizeBin, MIN_LESION_SIZE};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        *self = *self + o;
    }
}

impl Counts {
    pub fn rates(&self) -> DetectionRates {
        detection_rates(*self)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinCounts {
    pub small: Counts,
    pub medium: Counts,
    pub large: Counts,
}

impl BinCounts {
    pub fn get(&self, bin: SizeBin) -> Option<&Counts> {
        match bin {
            SizeBin::Small => Some(&self.small),
            SizeBin::Medium => Some(&self.medium),
            SizeBin::Large => Some(&self.large),
            SizeBin::Subthreshold => None,
        }
    }

    fn get_mut(&mut self, bin: SizeBin) -> Option<&mut Counts> {
        match bin {
            SizeBin::Small => Some(&mut self.small),
            SizeBin::Medium => Some(&mut self.medium),
            SizeBin::Large => Some(&mut self.large),
            SizeBin::Subthreshold => None,
        }
    }
}

impl AddAssign for BinCounts {
    fn add_assign(&mut self, o: BinCounts) {
        self.small += o.small;
        self.medium += o.medium;
        self.large += o.large;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GtOutcome {
    Detected,
    Missed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateOutcome {
    Matched,
    FalsePositive,
    Ignored,
    /// Removed by uncertainty filtering before matching.
    Filtered,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    #[serde(flatten)]
    pub counts: Counts,
    pub per_bin: BinCounts,
    /// Indexed by ground-truth lesion id.
    pub gt_assignments: Vec<GtOutcome>,
    /// Indexed by candidate lesion id.
    pub candidate_assignments: Vec<CandidateOutcome>,
}

/// TPR and FDR; `None` marks an undefined ratio (zero denominator).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRates {
    pub tpr: Option<f64>,
    pub fdr: Option<f64>,
}

/// Minimum overlap rule: at least three voxels, or strictly more than half.
#[inline]
pub fn is_detected(overlap: usize, gt_size: usize) -> bool {
    overlap >= 3 || 2 * overlap > gt_size
}

pub fn match_lesions(candidates: &LesionSet, gt: &LesionSet) -> Result<MatchResult> {
    match_retained(candidates, None, gt)
}

/// Matching restricted to candidates with `retained[id] == true`; the others
/// are reported as [`CandidateOutcome::Filtered`].
pub fn match_retained(
    candidates: &LesionSet,
    retained: Option<&[bool]>,
    gt: &LesionSet,
) -> Result<MatchResult> {
    check_same_dims(candidates, gt)?;
    if let Some(small) = gt.lesions.iter().find(|l| l.size < MIN_LESION_SIZE) {
        return Err(Error::InvalidArgument(format!(
            "ground-truth lesion {} has {} voxels; prune ground truth before matching",
            small.id, small.size
        )));
    }
    if let Some(r) = retained {
        if r.len() != candidates.len() {
            return Err(Error::InvalidArgument(format!(
                "retention flags for {} candidates, got {}",
                candidates.len(),
                r.len()
            )));
        }
    }
    let dims = gt.source_dims;
    let keep = |id: usize| retained.is_none_or(|r| r[id]);

    let mut covered = vec![false; dims.len()];
    for c in candidates.lesions.iter().filter(|c| keep(c.id)) {
        crate::lesion::mark_dilated(c, dims, &mut covered);
    }

    // A candidate touches ground truth iff it meets the dilated ground truth.
    let mut near_gt = vec![false; dims.len()];
    for g in &gt.lesions {
        crate::lesion::mark_dilated(g, dims, &mut near_gt);
    }

    let mut counts = Counts::default();
    let mut per_bin = BinCounts::default();
    let gt_assignments = gt
        .lesions
        .iter()
        .map(|g| {
            let overlap = g.linear_indices(dims).filter(|&i| covered[i]).count();
            let bin = per_bin.get_mut(g.bin).expect("pruned lesions are binned");
            if is_detected(overlap, g.size) {
                counts.tp += 1;
                bin.tp += 1;
                GtOutcome::Detected
            } else {
                counts.fn_ += 1;
                bin.fn_ += 1;
                GtOutcome::Missed
            }
        })
        .collect();

    let candidate_assignments = candidates
        .lesions
        .iter()
        .map(|c| {
            if !keep(c.id) {
                CandidateOutcome::Filtered
            } else if c.linear_indices(dims).any(|i| near_gt[i]) {
                CandidateOutcome::Matched
            } else if c.size >= MIN_LESION_SIZE {
                counts.fp += 1;
                per_bin.get_mut(c.bin).expect("binned").fp += 1;
                CandidateOutcome::FalsePositive
            } else {
                CandidateOutcome::Ignored
            }
        })
        .collect();

    Ok(MatchResult {
        counts,
        per_bin,
        gt_assignments,
        candidate_assignments,
    })
}

/// `tpr = TP/(TP+FN)`, `fdr = 1 - TP/(TP+FP)`.
pub fn detection_rates(c: Counts) -> DetectionRates {
    let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    DetectionRates {
        tpr: ratio(c.tp, c.tp + c.fn_),
        fdr: ratio(c.tp, c.tp + c.fp).map(|precision| 1.0 - precision),
    }
}
