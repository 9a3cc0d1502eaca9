//! Dense 3D containers: scalar grids, MC sample stacks and binary masks.
//!
//! All storage is row-major with `x` varying fastest, so the linear index of
//! `(x, y, z)` is `x + nx * (y + ny * z)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid extent in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub const fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.nx;
        let rest = index / self.nx;
        [x, rest % self.ny, rest / self.ny]
    }

    #[inline]
    pub const fn contains(&self, x: i64, y: i64, z: i64) -> bool {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < self.nx
            && (y as usize) < self.ny
            && (z as usize) < self.nz
    }

    fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(Error::InvalidArgument(format!(
                "dims must be positive, got {self}"
            )));
        }
        Ok(())
    }
}

impl From<[usize; 3]> for Dims {
    fn from([nx, ny, nz]: [usize; 3]) -> Self {
        Self { nx, ny, nz }
    }
}

impl From<Dims> for [usize; 3] {
    fn from(d: Dims) -> Self {
        [d.nx, d.ny, d.nz]
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// What the values of a [`VoxelGrid`] mean; constrains their range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    Probability,
    Variance,
    Uncertainty,
    Raw,
}

impl GridKind {
    pub fn code(self) -> u8 {
        match self {
            GridKind::Probability => 0,
            GridKind::Variance => 1,
            GridKind::Uncertainty => 2,
            GridKind::Raw => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(GridKind::Probability),
            1 => Some(GridKind::Variance),
            2 => Some(GridKind::Uncertainty),
            3 => Some(GridKind::Raw),
            _ => None,
        }
    }

    fn admits(self, v: f32) -> bool {
        if !v.is_finite() {
            return false;
        }
        match self {
            GridKind::Probability => (0.0..=1.0).contains(&v),
            GridKind::Variance | GridKind::Uncertainty => v >= 0.0,
            GridKind::Raw => true,
        }
    }
}

/// Dense scalar field. Values are validated against `kind` on construction
/// and the grid is immutable afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: Dims,
    kind: GridKind,
    values: Vec<f32>,
}

impl VoxelGrid {
    pub fn new(dims: Dims, kind: GridKind, values: Vec<f32>) -> Result<Self> {
        dims.validate()?;
        if values.len() != dims.len() {
            return Err(Error::LengthMismatch {
                dims,
                expected: dims.len(),
                found: values.len(),
            });
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !kind.admits(**v)) {
            return Err(Error::InvalidValue { index, value, kind });
        }
        Ok(Self { dims, kind, values })
    }

    pub fn filled(dims: Dims, kind: GridKind, value: f32) -> Result<Self> {
        Self::new(dims, kind, vec![value; dims.len()])
    }

    /// Builds a grid from 64-bit values, narrowing each to binary32.
    pub fn from_f64(dims: Dims, kind: GridKind, values: &[f64]) -> Result<Self> {
        Self::new(dims, kind, values.iter().map(|&v| v as f32).collect())
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.dims.index(x, y, z)]
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    /// Same values, different interpretation. Fails if the values violate the
    /// new kind's range.
    pub fn with_kind(self, kind: GridKind) -> Result<Self> {
        Self::new(self.dims, kind, self.values)
    }
}

/// `T` Monte Carlo dropout samples for one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStack {
    predictions: Vec<VoxelGrid>,
    variances: Option<Vec<VoxelGrid>>,
}

impl SampleStack {
    pub fn new(predictions: Vec<VoxelGrid>, variances: Option<Vec<VoxelGrid>>) -> Result<Self> {
        let first = predictions
            .first()
            .ok_or_else(|| Error::InvalidArgument("a sample stack needs at least one sample".into()))?;
        let dims = first.dims();
        for g in &predictions {
            if g.kind() != GridKind::Probability {
                return Err(Error::InvalidArgument(format!(
                    "prediction samples must be probability grids, got {:?}",
                    g.kind()
                )));
            }
            check_dims(dims, g.dims())?;
        }
        if let Some(vars) = &variances {
            if vars.len() != predictions.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} variance grids for {} prediction samples",
                    vars.len(),
                    predictions.len()
                )));
            }
            for g in vars {
                if g.kind() != GridKind::Variance {
                    return Err(Error::InvalidArgument(format!(
                        "variance samples must be variance grids, got {:?}",
                        g.kind()
                    )));
                }
                check_dims(dims, g.dims())?;
            }
        }
        Ok(Self {
            predictions,
            variances,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.predictions.len()
    }

    pub fn dims(&self) -> Dims {
        self.predictions[0].dims()
    }

    pub fn predictions(&self) -> &[VoxelGrid] {
        &self.predictions
    }

    pub fn variances(&self) -> Option<&[VoxelGrid]> {
        self.variances.as_deref()
    }

    /// Copies the `T` prediction values at voxel `index` into `out`, in sample order.
    pub(crate) fn gather_predictions(&self, index: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.predictions.iter().map(|g| g.values[index] as f64));
    }
}

pub(crate) fn check_dims(left: Dims, right: Dims) -> Result<()> {
    if left != right {
        return Err(Error::DimsMismatch { left, right });
    }
    Ok(())
}

/// Binary mask: ground truth or a thresholded prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    dims: Dims,
    bits: Vec<bool>,
}

impl LabelMask {
    pub fn new(dims: Dims, bits: Vec<bool>) -> Result<Self> {
        dims.validate()?;
        if bits.len() != dims.len() {
            return Err(Error::LengthMismatch {
                dims,
                expected: dims.len(),
                found: bits.len(),
            });
        }
        Ok(Self { dims, bits })
    }

    pub fn empty(dims: Dims) -> Result<Self> {
        Self::new(dims, vec![false; dims.len()])
    }

    /// Mask with exactly the given voxels set.
    pub fn from_voxels(dims: Dims, voxels: &[[usize; 3]]) -> Result<Self> {
        let mut bits = vec![false; dims.len()];
        for &[x, y, z] in voxels {
            if x >= dims.nx || y >= dims.ny || z >= dims.nz {
                return Err(Error::InvalidArgument(format!(
                    "voxel ({x},{y},{z}) outside {dims}"
                )));
            }
            bits[dims.index(x, y, z)] = true;
        }
        Self::new(dims, bits)
    }

    /// Interprets a 0/1 grid as a mask; any other value is rejected.
    pub fn from_grid(grid: &VoxelGrid) -> Result<Self> {
        let bits = grid
            .values()
            .iter()
            .enumerate()
            .map(|(index, &v)| match v {
                v if v == 0.0 => Ok(false),
                v if v == 1.0 => Ok(true),
                value => Err(Error::InvalidValue {
                    index,
                    value,
                    kind: grid.kind(),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(grid.dims(), bits)
    }

    /// 0/1 raw grid, the on-disk representation of a mask.
    pub fn to_grid(&self) -> VoxelGrid {
        let values = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        VoxelGrid::new(self.dims, GridKind::Raw, values).expect("0/1 values are always valid")
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, index: usize) -> bool {
        self.bits[index]
    }

    /// Set bits of `self` are all set in `other`.
    pub fn is_subset_of(&self, other: &LabelMask) -> bool {
        self.dims == other.dims && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// Voxel-wise arithmetic mean of the prediction samples.
///
/// Sums run over samples in stack order in 64-bit, then narrow to binary32.
pub fn mean_prediction(stack: &SampleStack) -> VoxelGrid {
    let dims = stack.dims();
    let t = stack.sample_count() as f64;
    let mut acc = vec![0.0f64; dims.len()];
    for g in stack.predictions() {
        for (a, &v) in acc.iter_mut().zip(g.values()) {
            *a += v as f64;
        }
    }
    let values = acc.into_iter().map(|s| (s / t) as f32).collect();
    // The mean of values in [0, 1] stays in [0, 1] after rounding.
    VoxelGrid::new(dims, GridKind::Probability, values).expect("mean of probabilities is a probability")
}
