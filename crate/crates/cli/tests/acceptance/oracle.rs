//! Reference implementations that share no code with the library.

use num_bigint::BigInt;
use num_traits::{ToPrimitive, Zero};

// ---------------------------------------------------------------------------
// Fixed-point arithmetic with FRAC fractional bits.

pub const FRAC: u32 = 256;

#[derive(Clone, Debug)]
pub struct Fixed(BigInt);

impl Fixed {
    pub fn one() -> Self {
        Fixed(BigInt::from(1) << FRAC)
    }

    pub fn zero() -> Self {
        Fixed(BigInt::zero())
    }

    /// Exact for any finite non-negative `v >= 2^-FRAC`; smaller parts truncate.
    pub fn from_f64(v: f64) -> Self {
        assert!(v.is_finite() && v >= 0.0);
        if v == 0.0 {
            return Fixed::zero();
        }
        let bits = v.to_bits();
        let exp = ((bits >> 52) & 0x7ff) as i64;
        let frac = bits & ((1u64 << 52) - 1);
        let (mant, e) = if exp == 0 { (frac, -1074) } else { (frac | (1u64 << 52), exp - 1075) };
        let shift = e + FRAC as i64;
        let m = BigInt::from(mant);
        Fixed(if shift >= 0 { m << shift as u32 } else { m >> (-shift) as u32 })
    }

    pub fn to_f64(&self) -> f64 {
        // split to keep the conversion exact enough at any magnitude
        let hi = (&self.0 >> (FRAC - 64)).to_f64().unwrap();
        hi * 2f64.powi(-64)
    }

    pub fn add(&self, o: &Fixed) -> Fixed {
        Fixed(&self.0 + &o.0)
    }

    pub fn sub(&self, o: &Fixed) -> Fixed {
        Fixed(&self.0 - &o.0)
    }

    pub fn mul(&self, o: &Fixed) -> Fixed {
        Fixed((&self.0 * &o.0) >> FRAC)
    }

    pub fn div(&self, o: &Fixed) -> Fixed {
        Fixed((&self.0 << FRAC) / &o.0)
    }

    pub fn div_int(&self, n: i64) -> Fixed {
        Fixed(&self.0 / BigInt::from(n))
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    pub fn is_positive(&self) -> bool {
        self.0 > BigInt::zero()
    }
}

/// `2 * atanh(z) = 2 * sum z^(2k+1) / (2k+1)` for `|z| < 1`.
fn two_atanh(z: &Fixed) -> Fixed {
    let z2 = z.mul(z);
    let mut power = z.clone();
    let mut acc = Fixed::zero();
    let mut k = 0i64;
    while !power.is_zero() {
        acc = acc.add(&power.div_int(2 * k + 1));
        power = power.mul(&z2);
        k += 1;
    }
    acc.add(&acc)
}

fn ln2() -> &'static Fixed {
    static LN2: std::sync::OnceLock<Fixed> = std::sync::OnceLock::new();
    // ln 2 = 2 atanh(1/3)
    LN2.get_or_init(|| two_atanh(&Fixed::one().div_int(3)))
}

/// Natural log of a positive fixed-point value.
pub fn ln(x: &Fixed) -> Fixed {
    assert!(x.is_positive(), "ln of non-positive value");
    let one = &BigInt::from(1) << FRAC;
    let two = &one << 1u32;
    let mut y = x.0.clone();
    let mut k = 0i64;
    while y >= two {
        y >>= 1u32;
        k += 1;
    }
    while y < one {
        y <<= 1u32;
        k -= 1;
    }
    // y in [1, 2): ln y = 2 atanh((y - 1) / (y + 1))
    let y = Fixed(y);
    let z = y.sub(&Fixed::one()).div(&y.add(&Fixed::one()));
    two_atanh(&z).add(&Fixed(&ln2().0 * BigInt::from(k)))
}

fn plogp(p: &Fixed) -> Fixed {
    if p.is_positive() {
        p.mul(&ln(p))
    } else {
        Fixed::zero()
    }
}

fn entropy(p: &Fixed) -> Fixed {
    let q = Fixed::one().sub(p);
    Fixed::zero().sub(&plogp(p).add(&plogp(&q)))
}

fn mean(xs: &[f64]) -> Fixed {
    let sum = xs.iter().fold(Fixed::zero(), |acc, &x| acc.add(&Fixed::from_f64(x)));
    sum.div_int(xs.len() as i64)
}

/// The four scalar measures, evaluated with 256-bit fixed-point arithmetic.
pub struct ExactMeasures {
    pub entropy: f64,
    pub mutual_info: f64,
    pub sample_var: f64,
    pub pred_var: f64,
}

pub fn exact_measures(probs: &[f64], variances: &[f64]) -> ExactMeasures {
    let t = probs.len() as i64;
    let mbar = mean(probs);
    let h = entropy(&mbar);
    let expected_h = probs
        .iter()
        .fold(Fixed::zero(), |acc, &p| acc.add(&entropy(&Fixed::from_f64(p))))
        .div_int(t);
    let mi = h.sub(&expected_h);
    let sq = probs.iter().fold(Fixed::zero(), |acc, &p| {
        let d = Fixed::from_f64(p).sub(&mbar);
        acc.add(&d.mul(&d))
    });
    ExactMeasures {
        entropy: h.to_f64(),
        mutual_info: mi.to_f64(),
        sample_var: sq.div_int(t).to_f64(),
        pred_var: mean(variances).to_f64(),
    }
}

// ---------------------------------------------------------------------------
// Connected components by breadth-first flood fill.

/// Neighbours are voxels at Chebyshev distance 1 that differ in at most two
/// coordinates.
pub fn adjacent(a: [usize; 3], b: [usize; 3]) -> bool {
    let d: Vec<usize> = (0..3).map(|k| a[k].abs_diff(b[k])).collect();
    let nonzero = d.iter().filter(|&&v| v != 0).count();
    d.iter().all(|&v| v <= 1) && (1..=2).contains(&nonzero)
}

/// Components as sorted voxel lists, ordered by their first voxel in
/// raster (z, y, x) order.
pub fn flood_fill_components(dims: [usize; 3], set: &[bool]) -> Vec<Vec<[usize; 3]>> {
    let [nx, ny, nz] = dims;
    let idx = |v: [usize; 3]| v[0] + nx * (v[1] + ny * v[2]);
    let mut seen = vec![false; set.len()];
    let mut comps = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let start = [x, y, z];
                if !set[idx(start)] || seen[idx(start)] {
                    continue;
                }
                seen[idx(start)] = true;
                let mut queue = std::collections::VecDeque::from([start]);
                let mut comp = Vec::new();
                while let Some(v) = queue.pop_front() {
                    comp.push(v);
                    for dz in -1i64..=1 {
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                let n = [v[0] as i64 + dx, v[1] as i64 + dy, v[2] as i64 + dz];
                                if n.iter().zip(dims).any(|(&c, d)| c < 0 || c >= d as i64) {
                                    continue;
                                }
                                let n = [n[0] as usize, n[1] as usize, n[2] as usize];
                                if adjacent(v, n) && set[idx(n)] && !seen[idx(n)] {
                                    seen[idx(n)] = true;
                                    queue.push_back(n);
                                }
                            }
                        }
                    }
                }
                comp.sort_by_key(|v| (v[2], v[1], v[0]));
                comps.push(comp);
            }
        }
    }
    comps
}

// ---------------------------------------------------------------------------
// Matching on a 4x4x1 grid with 16-bit voxel sets.

pub const SIDE: usize = 4;

pub fn voxel_of(bit: usize) -> [usize; 3] {
    [bit % SIDE, bit / SIDE, 0]
}

/// For each voxel, the set holding it and its neighbours.
pub fn closed_neighbourhoods() -> [u16; 16] {
    let mut out = [0u16; 16];
    for (i, slot) in out.iter_mut().enumerate() {
        for j in 0..16 {
            if i == j || adjacent(voxel_of(i), voxel_of(j)) {
                *slot |= 1 << j;
            }
        }
    }
    out
}

pub fn components16(mask: u16) -> Vec<u16> {
    let set: Vec<bool> = (0..16).map(|i| mask >> i & 1 == 1).collect();
    flood_fill_components([SIDE, SIDE, 1], &set)
        .into_iter()
        .map(|c| c.iter().fold(0u16, |acc, v| acc | 1 << (v[0] + SIDE * v[1])))
        .collect()
}

pub fn grow(set: u16, nbhd: &[u16; 16]) -> u16 {
    (0..16).filter(|&i| set >> i & 1 == 1).fold(0, |acc, i| acc | nbhd[i])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleCandidate {
    Matched,
    FalsePositive,
    Ignored,
}

/// Matching outcome for at most two ground-truth lesions and two candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleMatch {
    pub n_gt: usize,
    pub n_cands: usize,
    pub detected: [bool; 2],
    pub candidates: [OracleCandidate; 2],
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    /// (tp, fp, fn) for sizes 3-10 and 11-50.
    pub small: (u64, u64, u64),
    pub medium: (u64, u64, u64),
}

impl OracleMatch {
    pub fn detected(&self) -> &[bool] {
        &self.detected[..self.n_gt]
    }

    pub fn candidates(&self) -> &[OracleCandidate] {
        &self.candidates[..self.n_cands]
    }
}

/// A ground-truth lesion is detected when the union of grown candidates
/// covers at least 3 of its voxels or more than half of them. A candidate
/// is matched when its grown set meets any ground truth; otherwise it is a
/// false positive from 3 voxels up and ignored below. `grown[k]` is
/// `grow(cands[k])`.
pub fn set_intersection_match(gt: &[u16], cands: &[u16], grown: &[u16]) -> OracleMatch {
    assert!(gt.len() <= 2 && cands.len() <= 2 && grown.len() == cands.len());
    let covered = grown.iter().fold(0u16, |acc, &c| acc | c);
    let gt_all = gt.iter().fold(0u16, |acc, &g| acc | g);
    let mut m = OracleMatch {
        n_gt: gt.len(),
        n_cands: cands.len(),
        detected: [false; 2],
        candidates: [OracleCandidate::Ignored; 2],
        tp: 0,
        fp: 0,
        fn_: 0,
        small: (0, 0, 0),
        medium: (0, 0, 0),
    };
    for (k, &g) in gt.iter().enumerate() {
        let size = g.count_ones();
        let overlap = (g & covered).count_ones();
        let hit = overlap >= 3 || 2 * overlap > size;
        m.detected[k] = hit;
        let slot = if size <= 10 { &mut m.small } else { &mut m.medium };
        if hit {
            slot.0 += 1;
            m.tp += 1;
        } else {
            slot.2 += 1;
            m.fn_ += 1;
        }
    }
    for (k, (&c, &g)) in cands.iter().zip(grown).enumerate() {
        let size = c.count_ones();
        let outcome = if g & gt_all != 0 {
            OracleCandidate::Matched
        } else if size >= 3 {
            OracleCandidate::FalsePositive
        } else {
            OracleCandidate::Ignored
        };
        if outcome == OracleCandidate::FalsePositive {
            m.fp += 1;
            let slot = if size <= 10 { &mut m.small } else { &mut m.medium };
            slot.1 += 1;
        }
        m.candidates[k] = outcome;
    }
    m
}

// ---------------------------------------------------------------------------
// Rank statistics.

/// Average ranks (ties share the mean of their positions).
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
