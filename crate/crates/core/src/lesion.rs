//! Candidate and ground-truth lesions: thresholding, 18-connected components,
//! size bins, ground-truth pruning and 18-neighbourhood dilation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{check_dims, Dims, GridKind, LabelMask, VoxelGrid};

/// Face (6) and edge (12) neighbours: every offset with Chebyshev distance 1
/// and at most two nonzero coordinates. The 8 corners are excluded.
pub const NEIGHBOURS_18: [[i64; 3]; 18] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
    [-1, -1, 0],
    [-1, 1, 0],
    [1, -1, 0],
    [1, 1, 0],
    [-1, 0, -1],
    [-1, 0, 1],
    [1, 0, -1],
    [1, 0, 1],
    [0, -1, -1],
    [0, -1, 1],
    [0, 1, -1],
    [0, 1, 1],
];

/// Smallest lesion kept in ground truth and smallest candidate that can be a
/// false positive.
pub const MIN_LESION_SIZE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBin {
    Subthreshold,
    Small,
    Medium,
    Large,
}

impl SizeBin {
    pub const EVALUATED: [SizeBin; 3] = [SizeBin::Small, SizeBin::Medium, SizeBin::Large];

    /// small 3-10, medium 11-50, large 51+; below 3 is subthreshold.
    pub fn of(size: usize) -> Self {
        match size {
            0..=2 => SizeBin::Subthreshold,
            3..=10 => SizeBin::Small,
            11..=50 => SizeBin::Medium,
            _ => SizeBin::Large,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SizeBin::Subthreshold => "subthreshold",
            SizeBin::Small => "small",
            SizeBin::Medium => "medium",
            SizeBin::Large => "large",
        }
    }
}

impl fmt::Display for SizeBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lesion {
    pub id: usize,
    pub size: usize,
    pub bin: SizeBin,
    /// Sorted by linear (row-major) index.
    pub voxels: Vec<[usize; 3]>,
}

impl Lesion {
    pub fn new(id: usize, mut voxels: Vec<[usize; 3]>) -> Self {
        voxels.sort_by_key(|&[x, y, z]| (z, y, x));
        voxels.dedup();
        let size = voxels.len();
        Self {
            id,
            size,
            bin: SizeBin::of(size),
            voxels,
        }
    }

    pub fn linear_indices(&self, dims: Dims) -> impl Iterator<Item = usize> + '_ {
        self.voxels.iter().map(move |&[x, y, z]| dims.index(x, y, z))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LesionSet {
    #[serde(rename = "dims")]
    pub source_dims: Dims,
    pub lesions: Vec<Lesion>,
}

impl LesionSet {
    pub fn empty(dims: Dims) -> Self {
        Self {
            source_dims: dims,
            lesions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.lesions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lesions.is_empty()
    }

    /// Keeps lesions matching `keep` and renumbers ids from 0 in order.
    pub fn retain(&self, mut keep: impl FnMut(&Lesion) -> bool) -> LesionSet {
        let lesions = self
            .lesions
            .iter()
            .filter(|l| keep(l))
            .enumerate()
            .map(|(id, l)| Lesion { id, ..l.clone() })
            .collect();
        LesionSet {
            source_dims: self.source_dims,
            lesions,
        }
    }

    pub fn to_mask(&self) -> LabelMask {
        let dims = self.source_dims;
        let mut bits = vec![false; dims.len()];
        for l in &self.lesions {
            for i in l.linear_indices(dims) {
                bits[i] = true;
            }
        }
        LabelMask::new(dims, bits).expect("lesion voxels lie within dims")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let set: LesionSet = serde_json::from_str(s)?;
        for l in &set.lesions {
            let d = set.source_dims;
            if l.size != l.voxels.len() || l.bin != SizeBin::of(l.size) {
                return Err(Error::Format(format!("lesion {} has inconsistent size/bin", l.id)));
            }
            if l.voxels.iter().any(|&[x, y, z]| x >= d.nx || y >= d.ny || z >= d.nz) {
                return Err(Error::Format(format!("lesion {} lies outside {d}", l.id)));
            }
        }
        Ok(set)
    }
}

/// Voxel `i` is set iff `prob[i] >= theta`.
/// `p >= theta` at the grid's storage precision, so `theta = 0.9` selects a
/// stored `0.9`.
#[inline]
pub(crate) fn at_or_above(p: f32, theta: f64) -> bool {
    p >= theta as f32
}

pub fn binarize(prob: &VoxelGrid, theta: f64) -> Result<LabelMask> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::InvalidArgument(format!("theta {theta} outside [0, 1]")));
    }
    if prob.kind() != GridKind::Probability {
        return Err(Error::InvalidArgument(format!(
            "binarize needs a probability grid, got {:?}",
            prob.kind()
        )));
    }
    let bits = prob.values().iter().map(|&p| at_or_above(p, theta)).collect();
    LabelMask::new(prob.dims(), bits)
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    /// The smaller root wins, so each root is its component's minimum index.
    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Partitions the set voxels of `mask` into maximal 18-connected components.
///
/// Ids follow the row-major order of each component's first voxel, and each
/// lesion's voxels are listed in row-major order.
pub fn connected_components_18(mask: &LabelMask) -> LesionSet {
    let dims = mask.dims();
    assert!(dims.len() <= u32::MAX as usize, "mask too large for u32 labels");
    let bits = mask.bits();
    let mut sets = DisjointSet::new(dims.len());

    // Only the 9 stencil offsets that precede a voxel in raster order need
    // visiting; the rest are covered when the neighbour itself is scanned.
    let backward: Vec<[i64; 3]> = NEIGHBOURS_18
        .iter()
        .copied()
        .filter(|&[dx, dy, dz]| dz < 0 || (dz == 0 && (dy < 0 || (dy == 0 && dx < 0))))
        .collect();

    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let i = dims.index(x, y, z);
                if !bits[i] {
                    continue;
                }
                for &[dx, dy, dz] in &backward {
                    let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                    if dims.contains(nx, ny, nz) {
                        let j = dims.index(nx as usize, ny as usize, nz as usize);
                        if bits[j] {
                            sets.union(i as u32, j as u32);
                        }
                    }
                }
            }
        }
    }

    let mut label_of_root = vec![u32::MAX; dims.len()];
    let mut groups: Vec<Vec<[usize; 3]>> = Vec::new();
    for (i, &set) in bits.iter().enumerate() {
        if !set {
            continue;
        }
        let root = sets.find(i as u32) as usize;
        if label_of_root[root] == u32::MAX {
            label_of_root[root] = groups.len() as u32;
            groups.push(Vec::new());
        }
        groups[label_of_root[root] as usize].push(dims.coords(i));
    }

    let lesions = groups
        .into_iter()
        .enumerate()
        .map(|(id, voxels)| Lesion {
            id,
            size: voxels.len(),
            bin: SizeBin::of(voxels.len()),
            voxels,
        })
        .collect();
    LesionSet {
        source_dims: dims,
        lesions,
    }
}

/// Drops ground-truth lesions smaller than [`MIN_LESION_SIZE`].
pub fn prune_ground_truth(gt: &LesionSet) -> LesionSet {
    gt.retain(|l| l.size >= MIN_LESION_SIZE)
}

/// Marks the lesion's voxels and all their in-bounds 18-neighbours in `out`.
pub(crate) fn mark_dilated(lesion: &Lesion, dims: Dims, out: &mut [bool]) {
    let span = |c: usize, n: usize| c.saturating_sub(1)..=(c + 1).min(n - 1);
    for &[x, y, z] in &lesion.voxels {
        for nz in span(z, dims.nz) {
            for ny in span(y, dims.ny) {
                for nx in span(x, dims.nx) {
                    // corners differ in all three coordinates
                    if nx != x && ny != y && nz != z {
                        continue;
                    }
                    out[dims.index(nx, ny, nz)] = true;
                }
            }
        }
    }
}

/// The lesion plus its in-bounds 18-neighbourhood, in row-major order.
pub fn dilate_18(lesion: &Lesion, dims: Dims) -> Result<Vec<[usize; 3]>> {
    if let Some(&[x, y, z]) = lesion
        .voxels
        .iter()
        .find(|&&[x, y, z]| x >= dims.nx || y >= dims.ny || z >= dims.nz)
    {
        return Err(Error::InvalidArgument(format!(
            "lesion voxel ({x},{y},{z}) outside {dims}"
        )));
    }
    let mut marks = vec![false; dims.len()];
    mark_dilated(lesion, dims, &mut marks);
    Ok(marks
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| dims.coords(i))
        .collect())
}

/// Connected components of a ground-truth mask, pruned.
pub fn ground_truth_lesions(gt: &LabelMask) -> LesionSet {
    prune_ground_truth(&connected_components_18(gt))
}

/// Candidate lesions of a mean-probability map at threshold `theta`.
pub fn candidate_lesions(mean_prob: &VoxelGrid, theta: f64) -> Result<LesionSet> {
    Ok(connected_components_18(&binarize(mean_prob, theta)?))
}

pub(crate) fn check_same_dims(a: &LesionSet, b: &LesionSet) -> Result<()> {
    check_dims(a.source_dims, b.source_dims)
}
