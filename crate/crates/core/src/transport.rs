//! Coupling point sets to a stratified `k x k` grid by optimal assignment,
//! and the offset ("OT grid") representation used by the denoiser.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::lap;
pub use crate::points::PointSet;
use crate::points::dist2;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("{n} points is not a perfect square; nearest valid budgets are {below} and {above}")]
    NotSquare { n: usize, below: usize, above: usize },
    #[error("grid holds {expected} cells but got {actual} values")]
    Size { expected: usize, actual: usize },
    #[error("bad OT grid file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Integer side `k` with `k * k == n`.
pub fn grid_side(n: usize) -> Result<usize, TransportError> {
    let mut k = (n as f64).sqrt().round() as usize;
    while k * k > n {
        k -= 1;
    }
    while (k + 1) * (k + 1) <= n {
        k += 1;
    }
    if k * k == n && n > 0 {
        Ok(k)
    } else {
        let below = if k == 0 { 1 } else { k * k };
        Err(TransportError::NotSquare { n, below, above: (k + 1) * (k + 1) })
    }
}

/// Centre of stratum `s` (row-major) in a `k x k` grid.
#[inline]
pub fn stratum_center(k: usize, s: usize) -> [f64; 2] {
    let (row, col) = (s / k, s % k);
    [(col as f64 + 0.5) / k as f64, (row as f64 + 0.5) / k as f64]
}

/// Optimal one-to-one assignment of points to strata under squared
/// Euclidean cost. Returns `stratum_to_point`.
pub fn assign(points: &PointSet) -> Result<Vec<usize>, TransportError> {
    let k = grid_side(points.len())?;
    // rows are strata, columns points
    let row_to_col = lap::solve(points.len(), |s, p| dist2(stratum_center(k, s), points.points[p]));
    Ok(row_to_col)
}

/// Total squared distance of a `stratum_to_point` map.
pub fn assignment_cost(points: &PointSet, stratum_to_point: &[usize]) -> f64 {
    let k = grid_side(points.len()).expect("square point count");
    stratum_to_point.iter().enumerate().map(|(s, &p)| dist2(stratum_center(k, s), points.points[p])).sum()
}

/// Points take, in input order, their nearest still-free stratum.
/// Baseline for the optimal assignment.
pub fn greedy_assign(points: &PointSet) -> Result<Vec<usize>, TransportError> {
    let k = grid_side(points.len())?;
    let n = points.len();
    let mut taken = vec![false; n];
    let mut stratum_to_point = vec![0; n];
    for (p, &pt) in points.points.iter().enumerate() {
        let s = (0..n)
            .filter(|&s| !taken[s])
            .min_by(|&a, &b| dist2(stratum_center(k, a), pt).total_cmp(&dist2(stratum_center(k, b), pt)))
            .expect("a free stratum remains");
        taken[s] = true;
        stratum_to_point[s] = p;
    }
    Ok(stratum_to_point)
}

/// Offsets `point - centre` per stratum, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct OtGrid {
    k: usize,
    offsets: Vec<[f64; 2]>,
}

impl OtGrid {
    pub fn new(k: usize, offsets: Vec<[f64; 2]>) -> Result<Self, TransportError> {
        if offsets.len() != k * k || k == 0 {
            return Err(TransportError::Size { expected: k * k, actual: offsets.len() });
        }
        Ok(Self { k, offsets })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn offsets(&self) -> &[[f64; 2]] {
        &self.offsets
    }

    pub fn center(&self, s: usize) -> [f64; 2] {
        stratum_center(self.k, s)
    }

    /// Points in stratum order, `centre + offset`, without clamping.
    pub fn positions(&self) -> Vec<[f64; 2]> {
        self.offsets
            .iter()
            .enumerate()
            .map(|(s, d)| {
                let c = self.center(s);
                [c[0] + d[0], c[1] + d[1]]
            })
            .collect()
    }

    /// Offsets as a `[1, 2, k, k]` tensor in stratum-cell units (offset
    /// times `k`), the scale the denoiser operates at.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let kk = self.k * self.k;
        let scale = self.k as f64;
        Tensor::from_fn([1, 2, self.k, self.k], |i| {
            let (c, s) = (i / kk, i % kk);
            T::of(self.offsets[s][c] * scale)
        })
    }

    /// Inverse of [`OtGrid::to_tensor`].
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self, TransportError> {
        let (n, c, h, w) = t.dims4().map_err(|e| TransportError::Format(e.to_string()))?;
        if n != 1 || c != 2 || h != w {
            return Err(TransportError::Format(format!("expected [1, 2, k, k], got {:?}", t.shape())));
        }
        let k = h;
        let kk = k * k;
        let scale = k as f64;
        let d = t.data();
        let offsets = (0..kk).map(|s| [d[s].to_f64_lossy() / scale, d[kk + s].to_f64_lossy() / scale]).collect();
        Self::new(k, offsets)
    }

    /// `OTG1` magic, u16 k, u16 channels (2), then `k*k*2` little-endian f32
    /// offsets, interleaved per cell in stratum order.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), TransportError> {
        let k = u16::try_from(self.k).map_err(|_| TransportError::Format(format!("k = {} exceeds u16", self.k)))?;
        let mut buf = Vec::with_capacity(8 + self.offsets.len() * 8);
        buf.extend_from_slice(b"OTG1");
        buf.extend_from_slice(&k.to_le_bytes());
        buf.extend_from_slice(&2u16.to_le_bytes());
        for d in &self.offsets {
            buf.extend_from_slice(&(d[0] as f32).to_le_bytes());
            buf.extend_from_slice(&(d[1] as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, TransportError> {
        let mut header = [0u8; 8];
        r.read_exact(&mut header)?;
        if &header[..4] != b"OTG1" {
            return Err(TransportError::Format("missing OTG1 magic".into()));
        }
        let k = u16::from_le_bytes([header[4], header[5]]) as usize;
        let channels = u16::from_le_bytes([header[6], header[7]]);
        if channels != 2 {
            return Err(TransportError::Format(format!("{channels} channels, expected 2")));
        }
        let mut payload = vec![0u8; k * k * 8];
        r.read_exact(&mut payload)?;
        let offsets = payload
            .chunks_exact(8)
            .map(|c| {
                [
                    f32::from_le_bytes(c[..4].try_into().expect("4 bytes")) as f64,
                    f32::from_le_bytes(c[4..].try_into().expect("4 bytes")) as f64,
                ]
            })
            .collect();
        Self::new(k, offsets)
    }
}

/// Optimal coupling of `points` to the grid, stored as offsets.
pub fn encode(points: &PointSet) -> Result<OtGrid, TransportError> {
    let k = grid_side(points.len())?;
    let map = assign(points)?;
    let offsets = map
        .iter()
        .enumerate()
        .map(|(s, &p)| {
            let c = stratum_center(k, s);
            let q = points.points[p];
            [q[0] - c[0], q[1] - c[1]]
        })
        .collect();
    OtGrid::new(k, offsets)
}

/// Points in stratum order, clamped to the unit square.
pub fn decode(grid: &OtGrid) -> PointSet {
    PointSet::new(grid.positions()).clamped()
}
