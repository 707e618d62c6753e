//! Point sets in the unit square and their CSV form.

use std::fmt::Write as _;
use std::io::{self, BufRead};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PointsError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// An ordered list of 2D sample positions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointSet {
    pub points: Vec<[f64; 2]>,
}

impl PointSet {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, [f64; 2]> {
        self.points.iter()
    }

    /// Clamps every coordinate into `[0, 1]`.
    pub fn clamped(mut self) -> Self {
        for p in &mut self.points {
            p[0] = p[0].clamp(0.0, 1.0);
            p[1] = p[1].clamp(0.0, 1.0);
        }
        self
    }

    pub fn in_unit_square(&self) -> bool {
        self.points.iter().all(|p| (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]))
    }

    /// Fraction of points whose x coordinate falls in each of `strips`
    /// equal-width vertical strips.
    pub fn strip_fractions(&self, strips: usize) -> Vec<f64> {
        let mut counts = vec![0usize; strips];
        for p in &self.points {
            let s = ((p[0] * strips as f64) as usize).min(strips - 1);
            counts[s] += 1;
        }
        counts.iter().map(|&c| c as f64 / self.points.len().max(1) as f64).collect()
    }

    /// `x,y` per line with nine decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.points.len() * 24);
        out.push_str("x,y\n");
        for p in &self.points {
            let _ = writeln!(out, "{:.9},{:.9}", p[0], p[1]);
        }
        out
    }

    /// Parses CSV written by [`PointSet::to_csv`]; a non-numeric first line is
    /// treated as a header.
    pub fn from_csv(reader: impl BufRead) -> Result<Self, PointsError> {
        let mut points = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(PointsError::Parse { line: i + 1, msg: format!("expected two fields, got {line:?}") });
            };
            match (a.trim().parse::<f64>(), b.trim().parse::<f64>()) {
                (Ok(x), Ok(y)) if x.is_finite() && y.is_finite() => points.push([x, y]),
                _ if i == 0 => continue,
                _ => return Err(PointsError::Parse { line: i + 1, msg: format!("not a coordinate pair: {line:?}") }),
            }
        }
        Ok(Self { points })
    }
}

impl From<Vec<[f64; 2]>> for PointSet {
    fn from(points: Vec<[f64; 2]>) -> Self {
        Self { points }
    }
}

#[inline]
pub fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}
