//! Synthetic scenes: planted ground-truth lesions plus a simulated stochastic
//! segmenter that emits `T` dropout-like probability samples.
//!
//! All randomness comes from one [`SimRng`] (xoshiro256**) seeded with
//! `PhantomConfig::seed`, consumed in a fixed order:
//!
//! 1. total lesion count, then per lesion (large, medium, small): size, three
//!    axis scales, then placement attempts (three centre coordinates each);
//! 2. per lesion in planting order: missed flag, logit level;
//! 3. false-positive blobs, small bin then medium bin: Poisson count, then per
//!    blob size, axes, placement, presence probability;
//! 4. per sample: lesion offsets, blob presence flags, then per voxel in raster
//!    order one logit noise draw and, with variances enabled, one variance draw.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lesion::{ground_truth_lesions, prune_ground_truth, SizeBin};
use crate::rng::SimRng;
use crate::volume::{Dims, GridKind, LabelMask, SampleStack, VoxelGrid};

/// Chebyshev distance kept between any two planted structures.
pub const CLEARANCE: i64 = 4;
/// Placement attempts per structure before giving up.
pub const MAX_RETRIES: usize = 200;

const BACKGROUND_LOGIT: f64 = -5.0;
const BACKGROUND_NOISE: f64 = 0.4;
const INTERIOR_NOISE: f64 = 0.3;
const FAINT_NOISE: f64 = 0.1;
const BOUNDARY_DROP: f64 = 1.5;
const SHELL_LOGIT: f64 = -1.0;
const BLOB_LOGIT: f64 = 3.5;
const MISSED_LEVEL: (f64, f64) = (-3.5, -0.5);
const BLOB_PRESENCE: (f64, f64) = (0.35, 0.65);

const VAR_BACKGROUND: f64 = 0.02;
const VAR_INTERIOR: f64 = 0.05;
const VAR_BOUNDARY: f64 = 0.3;
const VAR_BLOB: f64 = 1.5;
const VAR_LOG_SD: f64 = 0.25;

/// Simulated segmenter behaviour for lesions of one size bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    /// Probability that a planted lesion is missed.
    pub miss_rate: f64,
    /// Expected spurious blobs of this bin per planted lesion of this bin.
    pub fp_rate: f64,
    /// Per-voxel logit noise on lesion boundaries.
    pub boundary_jitter: f64,
    /// Standard deviation of the per-sample lesion-wide logit offset.
    pub sample_disagreement: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinProfiles {
    pub small: NoiseProfile,
    pub medium: NoiseProfile,
    pub large: NoiseProfile,
}

impl BinProfiles {
    pub fn get(&self, bin: SizeBin) -> &NoiseProfile {
        match bin {
            SizeBin::Small | SizeBin::Subthreshold => &self.small,
            SizeBin::Medium => &self.medium,
            SizeBin::Large => &self.large,
        }
    }
}

impl Default for BinProfiles {
    fn default() -> Self {
        BinProfiles {
            small: NoiseProfile { miss_rate: 0.3, fp_rate: 0.4, boundary_jitter: 0.6, sample_disagreement: 0.8 },
            medium: NoiseProfile { miss_rate: 0.05, fp_rate: 0.05, boundary_jitter: 0.5, sample_disagreement: 0.5 },
            large: NoiseProfile { miss_rate: 0.0, fp_rate: 0.0, boundary_jitter: 0.4, sample_disagreement: 0.3 },
        }
    }
}

/// Planted size range (inclusive) for each bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeRanges {
    pub small: (usize, usize),
    pub medium: (usize, usize),
    pub large: (usize, usize),
}

impl Default for SizeRanges {
    fn default() -> Self {
        SizeRanges { small: (3, 10), medium: (11, 50), large: (51, 120) }
    }
}

impl SizeRanges {
    pub fn get(&self, bin: SizeBin) -> (usize, usize) {
        match bin {
            SizeBin::Small | SizeBin::Subthreshold => self.small,
            SizeBin::Medium => self.medium,
            SizeBin::Large => self.large,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub dims: Dims,
    /// Inclusive range for the number of planted lesions.
    pub lesion_count: (usize, usize),
    pub small_fraction: f64,
    pub large_fraction: f64,
    pub sizes: SizeRanges,
    pub noise: BinProfiles,
    pub samples: usize,
    pub variances: bool,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: Dims::new(40, 40, 16),
            lesion_count: (8, 12),
            small_fraction: 0.40,
            large_fraction: 0.20,
            sizes: SizeRanges::default(),
            noise: BinProfiles::default(),
            samples: 10,
            variances: true,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let d = self.dims;
        if d.nx < 8 || d.ny < 8 || d.nz < 8 {
            return bad(format!("dims {d} must be at least 8 along each axis"));
        }
        if self.samples == 0 {
            return bad("sample count must be at least 1".into());
        }
        if self.lesion_count.0 > self.lesion_count.1 {
            return bad(format!("lesion_count range {:?} is inverted", self.lesion_count));
        }
        for (name, f) in [("small_fraction", self.small_fraction), ("large_fraction", self.large_fraction)] {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("{name} {f} outside [0, 1]"));
            }
        }
        if self.small_fraction + self.large_fraction > 1.0 {
            return bad("small_fraction + large_fraction exceeds 1".into());
        }
        for bin in SizeBin::EVALUATED {
            let (lo, hi) = self.sizes.get(bin);
            if lo > hi || SizeBin::of(lo) != bin || SizeBin::of(hi) != bin {
                return bad(format!("{bin} size range ({lo}, {hi}) does not fit the bin"));
            }
            let p = self.noise.get(bin);
            if !(0.0..=1.0).contains(&p.miss_rate) {
                return bad(format!("{bin} miss_rate {} outside [0, 1]", p.miss_rate));
            }
            for (name, v) in [
                ("fp_rate", p.fp_rate),
                ("boundary_jitter", p.boundary_jitter),
                ("sample_disagreement", p.sample_disagreement),
            ] {
                if !(v.is_finite() && v >= 0.0) {
                    return bad(format!("{bin} {name} {v} must be finite and non-negative"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedLesion {
    pub id: usize,
    pub bin: SizeBin,
    pub size: usize,
    pub center: [usize; 3],
    pub axes: [f64; 3],
    pub detected: bool,
    /// Interior logit level in the simulated segmenter.
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedBlob {
    pub bin: SizeBin,
    pub size: usize,
    pub center: [usize; 3],
    pub axes: [f64; 3],
    /// Per-sample probability that the blob fires.
    pub presence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config: PhantomConfig,
    pub lesions: Vec<PlantedLesion>,
    pub false_positives: Vec<PlantedBlob>,
}

#[derive(Debug, Clone)]
pub struct PhantomScene {
    pub gt_mask: LabelMask,
    pub stack: SampleStack,
    pub provenance: Provenance,
}

#[derive(Clone, Copy, PartialEq)]
enum Voxel {
    Background,
    Interior(usize),
    Boundary(usize),
    Shell(usize),
    Blob(usize),
}

struct Placer {
    dims: Dims,
    blocked: Vec<bool>,
}

impl Placer {
    fn new(dims: Dims) -> Self {
        Placer { dims, blocked: vec![false; dims.len()] }
    }

    /// Region growing from `center` over 6-neighbours, nearest first in the
    /// ellipsoidal norm, so the result is exactly `size` connected voxels.
    fn grow(&self, center: [usize; 3], axes: [f64; 3], size: usize) -> Option<Vec<usize>> {
        let d = self.dims;
        let start = d.index(center[0], center[1], center[2]);
        if self.blocked[start] {
            return None;
        }
        let norm = |i: usize| {
            let c = d.coords(i);
            (0..3)
                .map(|k| ((c[k] as f64 - center[k] as f64) / axes[k]).powi(2))
                .sum::<f64>()
        };
        let mut seen = HashSet::from([start]);
        let mut heap = BinaryHeap::new();
        heap.push(Reverse((0u64, start)));
        let mut out = Vec::with_capacity(size);
        while let Some(Reverse((_, i))) = heap.pop() {
            out.push(i);
            if out.len() == size {
                return Some(out);
            }
            let [x, y, z] = d.coords(i).map(|v| v as i64);
            for [dx, dy, dz] in [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]] {
                let (nx, ny, nz) = (x + dx, y + dy, z + dz);
                if !d.contains(nx, ny, nz) {
                    continue;
                }
                let j = d.index(nx as usize, ny as usize, nz as usize);
                if self.blocked[j] || !seen.insert(j) {
                    continue;
                }
                // positive finite floats order like their bit patterns
                heap.push(Reverse((norm(j).to_bits(), j)));
            }
        }
        None
    }

    fn block(&mut self, voxels: &[usize]) {
        let d = self.dims;
        let r = CLEARANCE - 1;
        for &i in voxels {
            let [x, y, z] = d.coords(i).map(|v| v as i64);
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (nx, ny, nz) = (x + dx, y + dy, z + dz);
                        if d.contains(nx, ny, nz) {
                            self.blocked[d.index(nx as usize, ny as usize, nz as usize)] = true;
                        }
                    }
                }
            }
        }
    }

    fn place(&mut self, rng: &mut SimRng, size: usize, axes: [f64; 3], what: &str) -> Result<([usize; 3], Vec<usize>)> {
        let d = self.dims;
        for _ in 0..MAX_RETRIES {
            let center = [
                rng.int_inclusive(0, d.nx as u64 - 1) as usize,
                rng.int_inclusive(0, d.ny as u64 - 1) as usize,
                rng.int_inclusive(0, d.nz as u64 - 1) as usize,
            ];
            if let Some(v) = self.grow(center, axes, size) {
                self.block(&v);
                return Ok((center, v));
            }
        }
        Err(Error::Generation(format!(
            "could not place {what} of {size} voxels in {d} after {MAX_RETRIES} attempts"
        )))
    }
}

fn draw_axes(rng: &mut SimRng) -> [f64; 3] {
    [rng.uniform_range(0.6, 1.4), rng.uniform_range(0.6, 1.4), rng.uniform_range(0.6, 1.4)]
}

fn draw_size(rng: &mut SimRng, (lo, hi): (usize, usize)) -> usize {
    rng.int_inclusive(lo as u64, hi as u64) as usize
}

fn poisson(rng: &mut SimRng, lambda: f64) -> usize {
    let limit = (-lambda).exp();
    let mut k = 0;
    let mut p = rng.uniform();
    while p > limit {
        k += 1;
        p *= rng.uniform();
    }
    k
}

fn detected_level(bin: SizeBin) -> (f64, f64) {
    match bin {
        SizeBin::Small | SizeBin::Subthreshold => (4.5, 6.0),
        SizeBin::Medium => (4.0, 5.5),
        SizeBin::Large => (4.0, 6.0),
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Number of lesions per bin for `n` lesions: `round(n * fraction)` small and
/// large, the rest medium.
pub fn apportion(n: usize, small_fraction: f64, large_fraction: f64) -> BTreeMap<SizeBin, usize> {
    let small = ((n as f64 * small_fraction).round() as usize).min(n);
    let large = ((n as f64 * large_fraction).round() as usize).min(n - small);
    BTreeMap::from([
        (SizeBin::Small, small),
        (SizeBin::Medium, n - small - large),
        (SizeBin::Large, large),
    ])
}

pub fn generate_scene(cfg: &PhantomConfig) -> Result<PhantomScene> {
    cfg.validate()?;
    let d = cfg.dims;
    let mut rng = SimRng::new(cfg.seed);
    let mut placer = Placer::new(d);
    let mut labels = vec![Voxel::Background; d.len()];

    let n = rng.int_inclusive(cfg.lesion_count.0 as u64, cfg.lesion_count.1 as u64) as usize;
    let counts = apportion(n, cfg.small_fraction, cfg.large_fraction);
    let mut planted: Vec<(PlantedLesion, Vec<usize>)> = Vec::with_capacity(n);
    for bin in [SizeBin::Large, SizeBin::Medium, SizeBin::Small] {
        for _ in 0..counts[&bin] {
            let size = draw_size(&mut rng, cfg.sizes.get(bin));
            let axes = draw_axes(&mut rng);
            let (center, voxels) = placer.place(&mut rng, size, axes, "lesion")?;
            let id = planted.len();
            let lesion = PlantedLesion { id, bin, size, center, axes, detected: true, level: 0.0 };
            planted.push((lesion, voxels));
        }
    }
    for (lesion, _) in &mut planted {
        let p = cfg.noise.get(lesion.bin);
        lesion.detected = !rng.bernoulli(p.miss_rate);
        let (lo, hi) = if lesion.detected { detected_level(lesion.bin) } else { MISSED_LEVEL };
        lesion.level = rng.uniform_range(lo, hi);
    }

    let mut blobs: Vec<(PlantedBlob, Vec<usize>)> = Vec::new();
    for bin in [SizeBin::Small, SizeBin::Medium] {
        let lambda = cfg.noise.get(bin).fp_rate * counts[&bin] as f64;
        let k = poisson(&mut rng, lambda);
        for _ in 0..k {
            let (lo, hi) = cfg.sizes.get(bin);
            // spurious blobs stay in the lower part of the bin
            let size = draw_size(&mut rng, (lo, lo + (hi - lo) / 4));
            let axes = draw_axes(&mut rng);
            let (center, voxels) = placer.place(&mut rng, size, axes, "false-positive blob")?;
            let presence = rng.uniform_range(BLOB_PRESENCE.0, BLOB_PRESENCE.1);
            blobs.push((PlantedBlob { bin, size, center, axes, presence }, voxels));
        }
    }

    let mut gt = vec![false; d.len()];
    for &i in planted.iter().flat_map(|(_, v)| v) {
        gt[i] = true;
    }
    for (lesion, voxels) in &planted {
        for &i in voxels {
            let [x, y, z] = d.coords(i).map(|v| v as i64);
            let mut boundary = false;
            for [dx, dy, dz] in [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]] {
                let (nx, ny, nz) = (x + dx, y + dy, z + dz);
                if !d.contains(nx, ny, nz) {
                    boundary = true;
                    continue;
                }
                let j = d.index(nx as usize, ny as usize, nz as usize);
                if !gt[j] {
                    boundary = true;
                    if lesion.detected {
                        labels[j] = Voxel::Shell(lesion.id);
                    }
                }
            }
            labels[i] = if boundary { Voxel::Boundary(lesion.id) } else { Voxel::Interior(lesion.id) };
        }
    }
    for (k, (_, voxels)) in blobs.iter().enumerate() {
        for &i in voxels {
            labels[i] = Voxel::Blob(k);
        }
    }

    let lesions: Vec<PlantedLesion> = planted.into_iter().map(|(l, _)| l).collect();
    let false_positives: Vec<PlantedBlob> = blobs.into_iter().map(|(b, _)| b).collect();

    let mut predictions = Vec::with_capacity(cfg.samples);
    let mut variances = Vec::with_capacity(if cfg.variances { cfg.samples } else { 0 });
    let mut offsets = vec![0.0; lesions.len()];
    let mut present = vec![false; false_positives.len()];
    for _ in 0..cfg.samples {
        for (o, l) in offsets.iter_mut().zip(&lesions) {
            *o = cfg.noise.get(l.bin).sample_disagreement * rng.normal();
        }
        for (p, b) in present.iter_mut().zip(&false_positives) {
            *p = rng.bernoulli(b.presence);
        }
        let mut probs = Vec::with_capacity(d.len());
        let mut vars = Vec::with_capacity(if cfg.variances { d.len() } else { 0 });
        for &label in &labels {
            let eps = rng.normal();
            let (logit, var) = match label {
                Voxel::Background => (BACKGROUND_LOGIT + BACKGROUND_NOISE * eps, VAR_BACKGROUND),
                Voxel::Interior(j) | Voxel::Boundary(j) if !lesions[j].detected => {
                    (lesions[j].level + offsets[j] + FAINT_NOISE * eps, VAR_INTERIOR)
                }
                Voxel::Interior(j) => {
                    let l = &lesions[j];
                    (l.level + offsets[j] + INTERIOR_NOISE * eps, VAR_INTERIOR)
                }
                Voxel::Boundary(j) => {
                    let l = &lesions[j];
                    let jitter = cfg.noise.get(l.bin).boundary_jitter;
                    (l.level - BOUNDARY_DROP + offsets[j] + jitter * eps, VAR_BOUNDARY * jitter.max(0.1))
                }
                Voxel::Shell(j) => {
                    let jitter = cfg.noise.get(lesions[j].bin).boundary_jitter;
                    (SHELL_LOGIT + offsets[j] + jitter * eps, VAR_BOUNDARY * jitter.max(0.1))
                }
                Voxel::Blob(k) => {
                    let sign = if present[k] { 1.0 } else { -1.0 };
                    (sign * BLOB_LOGIT + INTERIOR_NOISE * eps, VAR_BLOB)
                }
            };
            probs.push(sigmoid(logit));
            if cfg.variances {
                vars.push(var * (VAR_LOG_SD * rng.normal()).exp());
            }
        }
        predictions.push(VoxelGrid::from_f64(d, GridKind::Probability, &probs)?);
        if cfg.variances {
            variances.push(VoxelGrid::from_f64(d, GridKind::Variance, &vars)?);
        }
    }

    Ok(PhantomScene {
        gt_mask: LabelMask::new(d, gt)?,
        stack: SampleStack::new(predictions, cfg.variances.then_some(variances))?,
        provenance: Provenance { config: cfg.clone(), lesions, false_positives },
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BinStatistics {
    pub lesions: usize,
    pub voxels: usize,
    /// Mean over lesion voxels of the per-voxel standard deviation across
    /// samples; `None` when the bin is empty.
    pub mean_disagreement: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneStatistics {
    pub scenes: usize,
    pub small: BinStatistics,
    pub medium: BinStatistics,
    pub large: BinStatistics,
    /// Lesion size to number of lesions of that size.
    pub size_histogram: BTreeMap<usize, usize>,
}

impl SceneStatistics {
    pub fn get(&self, bin: SizeBin) -> Option<&BinStatistics> {
        match bin {
            SizeBin::Small => Some(&self.small),
            SizeBin::Medium => Some(&self.medium),
            SizeBin::Large => Some(&self.large),
            SizeBin::Subthreshold => None,
        }
    }

    pub fn total_lesions(&self) -> usize {
        self.small.lesions + self.medium.lesions + self.large.lesions
    }
}

/// Statistics over ground-truth lesions (after pruning) of the given scenes.
pub fn scene_statistics<'a>(scenes: impl IntoIterator<Item = (&'a LabelMask, &'a SampleStack)>) -> Result<SceneStatistics> {
    let mut stats = SceneStatistics::default();
    let mut sums = [0.0f64; 3];
    let mut samples = Vec::new();
    for (gt, stack) in scenes {
        crate::volume::check_dims(gt.dims(), stack.dims())?;
        stats.scenes += 1;
        let lesions = prune_ground_truth(&ground_truth_lesions(gt));
        for l in &lesions.lesions {
            *stats.size_histogram.entry(l.size).or_default() += 1;
            let k = match l.bin {
                SizeBin::Small => 0,
                SizeBin::Medium => 1,
                SizeBin::Large => 2,
                SizeBin::Subthreshold => continue,
            };
            let bin = match k {
                0 => &mut stats.small,
                1 => &mut stats.medium,
                _ => &mut stats.large,
            };
            bin.lesions += 1;
            bin.voxels += l.size;
            for i in l.linear_indices(gt.dims()) {
                stack.gather_predictions(i, &mut samples);
                sums[k] += crate::measures::sample_variance_of(&samples).sqrt();
            }
        }
    }
    for (k, bin) in [&mut stats.small, &mut stats.medium, &mut stats.large].into_iter().enumerate() {
        bin.mean_disagreement = (bin.voxels > 0).then(|| sums[k] / bin.voxels as f64);
    }
    Ok(stats)
}
