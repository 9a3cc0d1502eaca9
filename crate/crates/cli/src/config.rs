//! Flat TOML run configurations. Every file must declare `version = 1`;
//! keys left out take their defaults and unknown keys are rejected.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use lesionuq_core::phantom::{BinProfiles, NoiseProfile, PhantomConfig, SizeRanges};
use lesionuq_core::toynet::TrainConfig;
use lesionuq_core::Dims;

pub const CONFIG_VERSION: i64 = 1;

/// Reads a config file, or the defaults when `path` is `None`.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse(&text).with_context(|| format!("in config {}", path.display()))
}

pub fn parse<T: DeserializeOwned>(text: &str) -> Result<T> {
    let table: toml::Table = toml::from_str(text)?;
    match table.get("version") {
        None => bail!("missing `version` key (expected version = {CONFIG_VERSION})"),
        Some(toml::Value::Integer(CONFIG_VERSION)) => {}
        Some(v) => bail!("unsupported config version {v} (expected {CONFIG_VERSION})"),
    }
    Ok(T::deserialize(table)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub version: i64,
    pub scenes: usize,
    pub seed: u64,
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub lesion_count_min: usize,
    pub lesion_count_max: usize,
    pub small_fraction: f64,
    pub large_fraction: f64,
    pub samples: usize,
    pub variances: bool,

    pub small_size_min: usize,
    pub small_size_max: usize,
    pub medium_size_min: usize,
    pub medium_size_max: usize,
    pub large_size_min: usize,
    pub large_size_max: usize,

    pub small_miss_rate: f64,
    pub small_fp_rate: f64,
    pub small_boundary_jitter: f64,
    pub small_sample_disagreement: f64,
    pub medium_miss_rate: f64,
    pub medium_fp_rate: f64,
    pub medium_boundary_jitter: f64,
    pub medium_sample_disagreement: f64,
    pub large_miss_rate: f64,
    pub large_fp_rate: f64,
    pub large_boundary_jitter: f64,
    pub large_sample_disagreement: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        let p = PhantomConfig::default();
        let n = p.noise;
        GenerateConfig {
            version: CONFIG_VERSION,
            scenes: 1,
            seed: p.seed,
            nx: p.dims.nx,
            ny: p.dims.ny,
            nz: p.dims.nz,
            lesion_count_min: p.lesion_count.0,
            lesion_count_max: p.lesion_count.1,
            small_fraction: p.small_fraction,
            large_fraction: p.large_fraction,
            samples: p.samples,
            variances: p.variances,
            small_size_min: p.sizes.small.0,
            small_size_max: p.sizes.small.1,
            medium_size_min: p.sizes.medium.0,
            medium_size_max: p.sizes.medium.1,
            large_size_min: p.sizes.large.0,
            large_size_max: p.sizes.large.1,
            small_miss_rate: n.small.miss_rate,
            small_fp_rate: n.small.fp_rate,
            small_boundary_jitter: n.small.boundary_jitter,
            small_sample_disagreement: n.small.sample_disagreement,
            medium_miss_rate: n.medium.miss_rate,
            medium_fp_rate: n.medium.fp_rate,
            medium_boundary_jitter: n.medium.boundary_jitter,
            medium_sample_disagreement: n.medium.sample_disagreement,
            large_miss_rate: n.large.miss_rate,
            large_fp_rate: n.large.fp_rate,
            large_boundary_jitter: n.large.boundary_jitter,
            large_sample_disagreement: n.large.sample_disagreement,
        }
    }
}

impl GenerateConfig {
    /// Phantom settings for scene `k`, seeded with `seed + k`.
    pub fn phantom(&self, k: usize) -> PhantomConfig {
        PhantomConfig {
            dims: Dims::new(self.nx, self.ny, self.nz),
            lesion_count: (self.lesion_count_min, self.lesion_count_max),
            small_fraction: self.small_fraction,
            large_fraction: self.large_fraction,
            sizes: SizeRanges {
                small: (self.small_size_min, self.small_size_max),
                medium: (self.medium_size_min, self.medium_size_max),
                large: (self.large_size_min, self.large_size_max),
            },
            noise: BinProfiles {
                small: NoiseProfile {
                    miss_rate: self.small_miss_rate,
                    fp_rate: self.small_fp_rate,
                    boundary_jitter: self.small_boundary_jitter,
                    sample_disagreement: self.small_sample_disagreement,
                },
                medium: NoiseProfile {
                    miss_rate: self.medium_miss_rate,
                    fp_rate: self.medium_fp_rate,
                    boundary_jitter: self.medium_boundary_jitter,
                    sample_disagreement: self.medium_sample_disagreement,
                },
                large: NoiseProfile {
                    miss_rate: self.large_miss_rate,
                    fp_rate: self.large_fp_rate,
                    boundary_jitter: self.large_boundary_jitter,
                    sample_disagreement: self.large_sample_disagreement,
                },
            },
            samples: self.samples,
            variances: self.variances,
            seed: self.seed.wrapping_add(k as u64),
        }
    }

    pub fn scene_seeds(&self) -> Vec<u64> {
        (0..self.scenes).map(|k| self.seed.wrapping_add(k as u64)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub version: i64,
    /// Side of the square training image.
    pub side: usize,
    pub patch_radius: usize,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub samples: usize,
    pub learning_rate: f64,
    pub steps: usize,
    /// Positive-class weight; inverse positive frequency when absent.
    pub class_weight: Option<f64>,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        ToyConfig {
            version: CONFIG_VERSION,
            side: 16,
            patch_radius: 1,
            hidden: vec![16],
            dropout: 0.2,
            samples: t.samples,
            learning_rate: t.learning_rate,
            steps: t.steps,
            class_weight: t.class_weight,
            seed: t.seed,
        }
    }
}

/// Image, initial weights and training draws use `seed`, `seed + 1` and
/// `seed + 2`.
impl ToyConfig {
    pub fn image_seed(&self) -> u64 {
        self.seed
    }

    pub fn init_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            samples: self.samples,
            learning_rate: self.learning_rate,
            steps: self.steps,
            class_weight: self.class_weight,
            seed: self.seed.wrapping_add(2),
        }
    }
}
