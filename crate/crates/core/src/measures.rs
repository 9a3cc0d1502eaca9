//! Voxel-wise uncertainty from a stack of MC dropout samples.
//!
//! The segmentation is binary: a sample value `p` is the probability of the
//! lesion class and `1 - p` that of background. Logs are natural and
//! `0 ln 0 = 0`.
//!
//! Every map is computed from scalar kernels over the `T` values of one voxel
//! (in stack order, in 64-bit), so results do not depend on how voxels are
//! partitioned across threads.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{GridKind, SampleStack, VoxelGrid};

/// Raw mutual information values in `[-MI_CLAMP, 0)` are rounding noise and
/// are clamped to zero; anything more negative is left visible.
pub const MI_CLAMP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Measure {
    #[serde(rename = "entropy")]
    Entropy,
    #[serde(rename = "mi")]
    MutualInfo,
    #[serde(rename = "samplevar")]
    SampleVariance,
    #[serde(rename = "predvar")]
    PredictiveVariance,
}

impl Measure {
    pub const ALL: [Measure; 4] = [
        Measure::Entropy,
        Measure::MutualInfo,
        Measure::SampleVariance,
        Measure::PredictiveVariance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Measure::Entropy => "entropy",
            Measure::MutualInfo => "mi",
            Measure::SampleVariance => "samplevar",
            Measure::PredictiveVariance => "predvar",
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Measure::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown measure {s:?}; expected one of entropy, mi, samplevar, predvar"
                ))
            })
    }
}

#[inline]
fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// Entropy of a Bernoulli(p) prediction.
#[inline]
pub fn binary_entropy(p: f64) -> f64 {
    -(plogp(p) + plogp(1.0 - p))
}

/// Entropy of the class probabilities averaged over samples.
pub fn predictive_entropy_of(samples: &[f64]) -> f64 {
    let t = samples.len() as f64;
    let (mut lesion, mut background) = (0.0, 0.0);
    for &p in samples {
        lesion += p;
        background += 1.0 - p;
    }
    -(plogp(lesion / t) + plogp(background / t))
}

/// Entropy of the mean prediction minus the mean per-sample entropy.
pub fn mutual_information_of(samples: &[f64]) -> f64 {
    let t = samples.len() as f64;
    let expected_entropy = samples.iter().map(|&p| binary_entropy(p)).sum::<f64>() / t;
    let mi = predictive_entropy_of(samples) - expected_entropy;
    if (-MI_CLAMP..0.0).contains(&mi) {
        0.0
    } else {
        mi
    }
}

/// Population variance (divide by `T`), Welford's update.
pub fn sample_variance_of(samples: &[f64]) -> f64 {
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (k, &x) in samples.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (x - mean);
    }
    (m2 / samples.len() as f64).max(0.0)
}

pub fn mean_of(samples: &[f64]) -> f64 {
    samples.iter().sum::<f64>() / samples.len() as f64
}

/// Mean of the per-sample noise-variance estimates.
pub fn predictive_variance_of(variances: &[f64]) -> f64 {
    mean_of(variances)
}

const CHUNK: usize = 4096;

fn map_voxels<F>(stack: &SampleStack, kernel: F) -> VoxelGrid
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let dims = stack.dims();
    let mut out = vec![0.0f32; dims.len()];
    out.par_chunks_mut(CHUNK).enumerate().for_each(|(chunk, dst)| {
        let mut buf = Vec::with_capacity(stack.sample_count());
        let base = chunk * CHUNK;
        for (offset, v) in dst.iter_mut().enumerate() {
            stack.gather_predictions(base + offset, &mut buf);
            *v = kernel(&buf) as f32;
        }
    });
    VoxelGrid::new(dims, GridKind::Uncertainty, out).expect("kernels yield finite non-negative values")
}

pub fn predictive_entropy(stack: &SampleStack) -> VoxelGrid {
    map_voxels(stack, predictive_entropy_of)
}

pub fn mutual_information(stack: &SampleStack) -> VoxelGrid {
    map_voxels(stack, mutual_information_of)
}

pub fn mc_sample_variance(stack: &SampleStack) -> VoxelGrid {
    map_voxels(stack, sample_variance_of)
}

/// Mean over samples of the learned noise-variance estimates.
pub fn predictive_variance(stack: &SampleStack) -> Result<VoxelGrid> {
    let vars = stack.variances().ok_or_else(|| {
        Error::MissingInput("predictive variance needs per-sample variance grids".into())
    })?;
    let dims = stack.dims();
    let t = vars.len() as f64;
    let mut acc = vec![0.0f64; dims.len()];
    for g in vars {
        for (a, &v) in acc.iter_mut().zip(g.values()) {
            *a += v as f64;
        }
    }
    let values = acc.into_iter().map(|s| (s / t) as f32).collect();
    VoxelGrid::new(dims, GridKind::Uncertainty, values)
}

/// Computes one measure. `PredictiveVariance` fails without variance grids.
pub fn compute_measure(stack: &SampleStack, measure: Measure) -> Result<VoxelGrid> {
    Ok(match measure {
        Measure::Entropy => predictive_entropy(stack),
        Measure::MutualInfo => mutual_information(stack),
        Measure::SampleVariance => mc_sample_variance(stack),
        Measure::PredictiveVariance => predictive_variance(stack)?,
    })
}

/// The four maps for one scan; `pred_var` is absent when the stack carries
/// no variance estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMaps {
    pub entropy: VoxelGrid,
    pub mutual_info: VoxelGrid,
    pub sample_var: VoxelGrid,
    pub pred_var: Option<VoxelGrid>,
}

impl UncertaintyMaps {
    pub fn compute(stack: &SampleStack) -> Self {
        Self {
            entropy: predictive_entropy(stack),
            mutual_info: mutual_information(stack),
            sample_var: mc_sample_variance(stack),
            pred_var: stack.variances().map(|_| {
                predictive_variance(stack).expect("variances are present")
            }),
        }
    }

    pub fn get(&self, measure: Measure) -> Option<&VoxelGrid> {
        match measure {
            Measure::Entropy => Some(&self.entropy),
            Measure::MutualInfo => Some(&self.mutual_info),
            Measure::SampleVariance => Some(&self.sample_var),
            Measure::PredictiveVariance => self.pred_var.as_ref(),
        }
    }
}
