//! UVOL: a minimal little-endian container for one [`VoxelGrid`].
//!
//! ```text
//! offset  size  field
//!      0     4  magic "UVOL"
//!      4     2  version (u16) = 1
//!      6     1  kind (u8): 0 probability, 1 variance, 2 uncertainty, 3 raw
//!      7     1  reserved (u8) = 0
//!      8    12  nx, ny, nz (3 x u32)
//!     20  4*N   N = nx*ny*nz binary32 values, x fastest
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Dims, GridKind, VoxelGrid};

pub const MAGIC: &[u8; 4] = b"UVOL";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 20;

pub fn encode_volume(grid: &VoxelGrid) -> Result<Vec<u8>> {
    let d = grid.dims();
    let dim_u32 = |n: usize| {
        u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("dimension {n} exceeds u32")))
    };
    let (nx, ny, nz) = (dim_u32(d.nx)?, dim_u32(d.ny)?, dim_u32(d.nz)?);

    let mut out = Vec::with_capacity(HEADER_LEN + 4 * d.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(grid.kind().code());
    out.push(0);
    for n in [nx, ny, nz] {
        out.extend_from_slice(&n.to_le_bytes());
    }
    for (index, &v) in grid.values().iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::InvalidValue {
                index,
                value: v,
                kind: grid.kind(),
            });
        }
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<VoxelGrid> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "{} bytes is shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let kind = GridKind::from_code(bytes[6])
        .ok_or_else(|| Error::Format(format!("unknown kind code {}", bytes[6])))?;
    if bytes[7] != 0 {
        return Err(Error::Format(format!("reserved byte is {}, expected 0", bytes[7])));
    }
    let read_u32 = |at: usize| {
        u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]) as usize
    };
    let dims = Dims::new(read_u32(8), read_u32(12), read_u32(16));

    let payload = &bytes[HEADER_LEN..];
    let expected = dims
        .nx
        .checked_mul(dims.ny)
        .and_then(|n| n.checked_mul(dims.nz))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("dims {dims} overflow")))?;
    if payload.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    VoxelGrid::new(dims, kind, values)
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

pub fn save_volume(grid: &VoxelGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_volume(grid)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
