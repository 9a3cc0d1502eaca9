//! ROC sweeps over sigmoid threshold `theta` and uncertainty threshold `eta`.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{
    check_eta, filter_voxels, lesion_uncertainties, passes, rescale_voxel_maps, voxel_counts,
};
use crate::error::{Error, Result};
use crate::lesion::{candidate_lesions, ground_truth_lesions, prune_ground_truth, LesionSet, SizeBin};
use crate::measures::{compute_measure, Measure};
use crate::metrics::{match_retained, Counts};
use crate::volume::{check_dims, mean_prediction, LabelMask, SampleStack, VoxelGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Voxel,
    Lesion,
}

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::Voxel => "voxel",
            Level::Lesion => "lesion",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "voxel" => Ok(Level::Voxel),
            "lesion" => Ok(Level::Lesion),
            _ => Err(Error::InvalidArgument(format!("unknown level {s:?}; expected voxel or lesion"))),
        }
    }
}

/// Row stratum: everything, or one evaluated size bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratum {
    All,
    Small,
    Medium,
    Large,
}

impl Stratum {
    pub const ALL: [Stratum; 4] = [Stratum::All, Stratum::Small, Stratum::Medium, Stratum::Large];

    pub fn name(self) -> &'static str {
        match self {
            Stratum::All => "all",
            Stratum::Small => "small",
            Stratum::Medium => "medium",
            Stratum::Large => "large",
        }
    }

    pub fn size_bin(self) -> Option<SizeBin> {
        match self {
            Stratum::All => None,
            Stratum::Small => Some(SizeBin::Small),
            Stratum::Medium => Some(SizeBin::Medium),
            Stratum::Large => Some(SizeBin::Large),
        }
    }

    fn contains(self, bin: SizeBin) -> bool {
        self.size_bin().is_none_or(|b| b == bin)
    }
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stratum {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stratum::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown bin {s:?}; expected all, small, medium or large")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocRow {
    pub measure: Measure,
    pub level: Level,
    pub bin: Stratum,
    /// `None` is the unfiltered baseline (written as `inf` in CSV).
    pub eta: Option<f64>,
    pub theta: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tpr: Option<f64>,
    pub fdr: Option<f64>,
    pub retention: f64,
}

impl RocRow {
    pub fn counts(&self) -> Counts {
        Counts { tp: self.tp, fp: self.fp, fn_: self.fn_ }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RocTable {
    pub rows: Vec<RocRow>,
}

pub const CSV_HEADER: &str = "measure,level,bin,eta,theta,tp,fp,fn,tpr,fdr,retention";

fn fmt_rate(r: Option<f64>) -> String {
    r.map_or_else(|| "NaN".to_string(), |v| v.to_string())
}

impl RocTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(64 * (self.rows.len() + 1));
        s.push_str(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let eta = r.eta.map_or_else(|| "inf".to_string(), |e| e.to_string());
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.measure,
                r.level,
                r.bin,
                eta,
                r.theta,
                r.tp,
                r.fp,
                r.fn_,
                fmt_rate(r.tpr),
                fmt_rate(r.fdr),
                r.retention
            )
            .expect("writing to a String cannot fail");
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn extend(&mut self, other: RocTable) {
        self.rows.extend(other.rows);
    }

    /// Rows of one curve (fixed measure, level, bin and eta), in theta order.
    pub fn curve(&self, measure: Measure, level: Level, bin: Stratum, eta: Option<f64>) -> Vec<&RocRow> {
        self.rows
            .iter()
            .filter(|r| r.measure == measure && r.level == level && r.bin == bin && r.eta == eta)
            .collect()
    }
}

/// Per-scan evaluation inputs.
#[derive(Debug, Clone)]
pub struct EvalScan {
    pub gt_mask: LabelMask,
    /// Ground-truth lesions with sub-threshold components removed.
    pub gt_lesions: LesionSet,
    pub mean_prob: VoxelGrid,
    pub maps: BTreeMap<Measure, VoxelGrid>,
}

impl EvalScan {
    pub fn new(gt_mask: LabelMask, mean_prob: VoxelGrid, maps: BTreeMap<Measure, VoxelGrid>) -> Result<Self> {
        check_dims(gt_mask.dims(), mean_prob.dims())?;
        for m in maps.values() {
            check_dims(gt_mask.dims(), m.dims())?;
        }
        let gt_lesions = prune_ground_truth(&ground_truth_lesions(&gt_mask));
        Ok(EvalScan { gt_mask, gt_lesions, mean_prob, maps })
    }

    /// Computes the mean prediction and the requested measures from samples.
    pub fn from_stack(gt_mask: LabelMask, stack: &SampleStack, measures: &[Measure]) -> Result<Self> {
        let maps = measures
            .iter()
            .map(|&m| Ok((m, compute_measure(stack, m)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        EvalScan::new(gt_mask, mean_prediction(stack), maps)
    }

    pub fn map(&self, measure: Measure) -> Result<&VoxelGrid> {
        self.maps
            .get(&measure)
            .ok_or_else(|| Error::MissingInput(format!("no {measure} map for scan")))
    }
}

/// Candidate lesions of one scan at one theta, with their cohort-rescaled
/// uncertainties.
#[derive(Debug, Clone)]
pub struct ScoredCandidates {
    pub candidates: LesionSet,
    pub raw: Vec<f64>,
    pub scaled: Vec<f64>,
}

/// All candidate lesions of an evaluation for one measure, indexed
/// `[theta][scan]`. Rescaling spans every scan and every theta.
#[derive(Debug, Clone)]
pub struct LesionCohort {
    pub measure: Measure,
    pub thetas: Vec<f64>,
    pub scored: Vec<Vec<ScoredCandidates>>,
}

impl LesionCohort {
    pub fn build(scans: &[EvalScan], measure: Measure, thetas: &[f64]) -> Result<Self> {
        let mut scored = thetas
            .iter()
            .map(|&theta| {
                scans
                    .par_iter()
                    .map(|s| {
                        let candidates = candidate_lesions(&s.mean_prob, theta)?;
                        let raw = lesion_uncertainties(&candidates, s.map(measure)?)?;
                        Ok(ScoredCandidates { candidates, raw, scaled: Vec::new() })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;

        let (lo, hi) = scored
            .iter()
            .flatten()
            .flat_map(|s| s.raw.iter().copied())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        for s in scored.iter_mut().flatten() {
            s.scaled = s
                .raw
                .iter()
                .map(|&x| if hi > lo { ((x - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 })
                .collect();
        }
        Ok(LesionCohort { measure, thetas: thetas.to_vec(), scored })
    }

    /// Every rescaled value in the cohort.
    pub fn pooled_scaled(&self) -> Vec<f64> {
        self.scored.iter().flatten().flat_map(|s| s.scaled.iter().copied()).collect()
    }
}

fn check_thresholds(etas: &[f64], thetas: &[f64]) -> Result<()> {
    if thetas.is_empty() {
        return Err(Error::InvalidArgument("theta list is empty".into()));
    }
    if let Some(t) = thetas.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::InvalidArgument(format!("theta {t} outside [0, 1]")));
    }
    etas.iter().try_for_each(|&e| check_eta(e))
}

/// Baseline rows (`eta = None`) followed by one row set per eta, each in
/// theta order. Lesion level emits all four strata, voxel level only `all`.
pub fn roc_sweep(
    scans: &[EvalScan],
    measure: Measure,
    level: Level,
    etas: &[f64],
    thetas: &[f64],
) -> Result<RocTable> {
    check_thresholds(etas, thetas)?;
    if scans.is_empty() {
        return Err(Error::InvalidArgument("no scans to evaluate".into()));
    }
    let eta_list: Vec<Option<f64>> = std::iter::once(None).chain(etas.iter().map(|&e| Some(e))).collect();
    match level {
        Level::Voxel => voxel_sweep(scans, measure, &eta_list, thetas),
        Level::Lesion => {
            let cohort = LesionCohort::build(scans, measure, thetas)?;
            lesion_sweep(scans, &cohort, &eta_list)
        }
    }
}

fn rates_row(measure: Measure, level: Level, bin: Stratum, eta: Option<f64>, theta: f64, c: Counts, retention: f64) -> RocRow {
    let r = c.rates();
    RocRow {
        measure,
        level,
        bin,
        eta,
        theta,
        tp: c.tp,
        fp: c.fp,
        fn_: c.fn_,
        tpr: r.tpr,
        fdr: r.fdr,
        retention,
    }
}

fn voxel_sweep(scans: &[EvalScan], measure: Measure, etas: &[Option<f64>], thetas: &[f64]) -> Result<RocTable> {
    let raw: Vec<&VoxelGrid> = scans.iter().map(|s| s.map(measure)).collect::<Result<_>>()?;
    let scaled = rescale_voxel_maps(&raw)?;
    let total: u64 = scans.iter().map(|s| s.gt_mask.dims().len() as u64).sum();
    let mut rows = Vec::with_capacity(etas.len() * thetas.len());
    for &eta in etas {
        for &theta in thetas {
            let per_scan = scans
                .par_iter()
                .zip(&scaled)
                .map(|(s, map)| {
                    let f = filter_voxels(&s.mean_prob, map, theta, eta.unwrap_or(1.0))?;
                    voxel_counts(&f, &s.gt_mask)
                })
                .collect::<Result<Vec<_>>>()?;
            let (mut c, mut kept) = (Counts::default(), 0u64);
            for v in per_scan {
                c += Counts { tp: v.tp, fp: v.fp, fn_: v.fn_ };
                kept += v.retained();
            }
            let retention = if total == 0 { 1.0 } else { kept as f64 / total as f64 };
            rows.push(rates_row(measure, Level::Voxel, Stratum::All, eta, theta, c, retention));
        }
    }
    Ok(RocTable { rows })
}

#[derive(Default, Clone, Copy)]
struct Tally {
    counts: Counts,
    kept: u64,
    total: u64,
}

fn lesion_sweep(scans: &[EvalScan], cohort: &LesionCohort, etas: &[Option<f64>]) -> Result<RocTable> {
    let mut rows = Vec::with_capacity(etas.len() * cohort.thetas.len() * Stratum::ALL.len());
    for &eta in etas {
        for (ti, &theta) in cohort.thetas.iter().enumerate() {
            let per_scan = scans
                .par_iter()
                .zip(&cohort.scored[ti])
                .map(|(s, sc)| {
                    let retained: Vec<bool> = match eta {
                        None => vec![true; sc.candidates.len()],
                        Some(e) => sc.scaled.iter().map(|&u| passes(u, e)).collect(),
                    };
                    let m = match_retained(&sc.candidates, Some(&retained), &s.gt_lesions)?;
                    let mut tallies = [Tally::default(); 4];
                    for (k, stratum) in Stratum::ALL.into_iter().enumerate() {
                        let t = &mut tallies[k];
                        t.counts = match stratum.size_bin() {
                            None => m.counts,
                            Some(b) => *m.per_bin.get(b).expect("evaluated bin"),
                        };
                        for (l, &keep) in sc.candidates.lesions.iter().zip(&retained) {
                            if stratum.contains(l.bin) {
                                t.total += 1;
                                t.kept += keep as u64;
                            }
                        }
                    }
                    Ok(tallies)
                })
                .collect::<Result<Vec<_>>>()?;
            for (k, stratum) in Stratum::ALL.into_iter().enumerate() {
                let mut t = Tally::default();
                for s in &per_scan {
                    t.counts += s[k].counts;
                    t.kept += s[k].kept;
                    t.total += s[k].total;
                }
                let retention = if t.total == 0 { 1.0 } else { t.kept as f64 / t.total as f64 };
                rows.push(rates_row(cohort.measure, Level::Lesion, stratum, eta, theta, t.counts, retention));
            }
        }
    }
    Ok(RocTable { rows })
}

/// Step envelope of an ROC curve: best TPR among points with FDR <= `fdr`.
pub fn envelope_tpr(points: &[(f64, f64)], fdr: f64) -> Option<f64> {
    points
        .iter()
        .filter(|(f, _)| *f <= fdr + 1e-12)
        .map(|&(_, t)| t)
        .fold(None, |acc, t| Some(acc.map_or(t, |a: f64| a.max(t))))
}

/// Two curves compared on their shared FDR range.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveComparison {
    pub grid: Vec<f64>,
    pub baseline: Vec<f64>,
    pub filtered: Vec<f64>,
}

impl CurveComparison {
    pub fn margins(&self) -> impl Iterator<Item = f64> + '_ {
        self.filtered.iter().zip(&self.baseline).map(|(f, b)| f - b)
    }

    /// Fraction of grid points where the filtered curve is at least as good.
    pub fn dominance(&self) -> f64 {
        if self.grid.is_empty() {
            return 0.0;
        }
        self.margins().filter(|&m| m >= 0.0).count() as f64 / self.grid.len() as f64
    }

    pub fn mean_improvement(&self) -> f64 {
        if self.grid.is_empty() {
            return 0.0;
        }
        self.margins().sum::<f64>() / self.grid.len() as f64
    }
}

/// `(fdr, tpr)` points of a curve, skipping rows where either rate is undefined.
pub fn curve_points(rows: &[&RocRow]) -> Vec<(f64, f64)> {
    rows.iter().filter_map(|r| Some((r.fdr?, r.tpr?))).collect()
}

/// Evaluates both step envelopes at every FDR value either curve attains
/// inside the shared range `[max(min fdr), min(max fdr)]`. Returns `None` when
/// either curve has no defined points.
pub fn compare_curves(baseline: &[(f64, f64)], filtered: &[(f64, f64)]) -> Option<CurveComparison> {
    let range = |pts: &[(f64, f64)]| {
        pts.iter()
            .map(|p| p.0)
            .fold(None, |acc: Option<(f64, f64)>, f| Some(acc.map_or((f, f), |(lo, hi)| (lo.min(f), hi.max(f)))))
    };
    let (blo, bhi) = range(baseline)?;
    let (flo, fhi) = range(filtered)?;
    let (lo, hi) = (blo.max(flo), bhi.min(fhi));
    let mut grid: Vec<f64> = if lo <= hi {
        baseline
            .iter()
            .chain(filtered)
            .map(|p| p.0)
            .filter(|&f| f >= lo && f <= hi)
            .collect()
    } else {
        // disjoint ranges: compare where the later curve starts
        vec![lo]
    };
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let eval = |pts: &[(f64, f64)]| -> Vec<f64> { grid.iter().map(|&f| envelope_tpr(pts, f).unwrap_or(0.0)).collect() };
    let (b, f) = (eval(baseline), eval(filtered));
    Some(CurveComparison { grid, baseline: b, filtered: f })
}
