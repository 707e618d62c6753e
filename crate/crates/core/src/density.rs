//! Target densities over the unit square: construction, normalization,
//! region masses and rejection sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::GrayImage;
use crate::points::PointSet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DensityError {
    #[error("density has no mass to stipple")]
    ZeroMass,
    #[error("density values must be finite and non-negative (pixel {0})")]
    InvalidValue(usize),
    #[error("raster size {width}x{height} does not match {len} values")]
    Size { width: usize, height: usize, len: usize },
    #[error("resolution {0} is below the minimum of {1}")]
    Resolution(usize, usize),
    #[error("acceptance ratio {ratio:.2e} is below 1e-4; rescale the density (e.g. add a floor)")]
    LowAcceptance { ratio: f64 },
    #[error("cannot sample zero points")]
    NoPoints,
}

/// Frame in which the analytic stress density is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StressFrame {
    /// `[-1, 1]^2` mapped onto the unit square (Gaussian well centred).
    #[default]
    Centered,
    /// Formula evaluated directly on `[0, 1]^2`.
    Unit,
}

/// The stress-test density `0.2 e^{-20(x^2+y^2)} + 0.2 sin^2(pi x) sin^2(pi y)`.
pub fn stress_value(x: f64, y: f64) -> f64 {
    use std::f64::consts::PI;
    0.2 * (-20.0 * (x * x + y * y)).exp() + 0.2 * (PI * x).sin().powi(2) * (PI * y).sin().powi(2)
}

/// Axis-aligned box `[x0, x1] x [y0, y1]` in domain units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Region {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Region {
    pub const FULL: Region = Region { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 };

    /// Vertical strip `i` of `n` equal-width strips.
    pub fn strip(i: usize, n: usize) -> Self {
        Self { x0: i as f64 / n as f64, y0: 0.0, x1: (i + 1) as f64 / n as f64, y1: 1.0 }
    }
}

/// Non-negative raster over the unit square; pixel `(i, j)` covers
/// `[i/W, (i+1)/W) x [j/H, (j+1)/H)`, row-major with row 0 at y = 0.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl DensityMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self, DensityError> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(DensityError::Size { width, height, len: values.len() });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(DensityError::InvalidValue(i));
        }
        Ok(Self { width, height, values })
    }

    /// Evaluates `f(x, y)` at pixel centres. Values are not normalized.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(f64, f64) -> f64) -> Result<Self, DensityError> {
        let mut values = Vec::with_capacity(width * height);
        for j in 0..height {
            let y = (j as f64 + 0.5) / height as f64;
            for i in 0..width {
                values.push(f((i as f64 + 0.5) / width as f64, y));
            }
        }
        Self::new(width, height, values)
    }

    pub fn uniform(resolution: usize) -> Self {
        Self::from_fn(resolution, resolution, |_, _| 1.0).expect("constant density is valid").normalized()
    }

    /// Grayscale conversion: `(255 - g) / 255` when `invert` (dark is dense),
    /// otherwise `g / 255`; the result is normalized.
    pub fn from_grayscale(image: &GrayImage, invert: bool) -> Result<Self, DensityError> {
        let values: Vec<f64> = image
            .pixels
            .iter()
            .map(|&g| if invert { (255 - g) as f64 / 255.0 } else { g as f64 / 255.0 })
            .collect();
        let map = Self::new(image.width, image.height, values)?;
        if map.raw_sum() <= 0.0 {
            return Err(DensityError::ZeroMass);
        }
        Ok(map.normalized())
    }

    /// The stress density, normalized. Requires `resolution >= 64`.
    pub fn analytic_stress(resolution: usize, frame: StressFrame) -> Result<Self, DensityError> {
        if resolution < 64 {
            return Err(DensityError::Resolution(resolution, 64));
        }
        let map = match frame {
            StressFrame::Centered => Self::from_fn(resolution, resolution, |x, y| stress_value(2.0 * x - 1.0, 2.0 * y - 1.0)),
            StressFrame::Unit => Self::from_fn(resolution, resolution, stress_value),
        }?;
        Ok(map.normalized())
    }

    /// `rho(x, y) = x^2`, normalized.
    pub fn analytic_quadratic(resolution: usize) -> Self {
        Self::from_fn(resolution, resolution, |x, _| x * x).expect("x^2 is valid").normalized()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pixel_area(&self) -> f64 {
        1.0 / (self.width * self.height) as f64
    }

    pub fn pixel(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.width + i]
    }

    /// Centre of pixel `(i, j)` in domain coordinates.
    pub fn pixel_center(&self, i: usize, j: usize) -> [f64; 2] {
        [(i as f64 + 0.5) / self.width as f64, (j as f64 + 0.5) / self.height as f64]
    }

    fn raw_sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Integral over the unit square (pixel sum times pixel area).
    pub fn total_mass(&self) -> f64 {
        self.raw_sum() * self.pixel_area()
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Scaled to unit mass. A zero map is returned unchanged.
    pub fn normalized(&self) -> Self {
        let mass = self.total_mass();
        if mass <= 0.0 || (mass - 1.0).abs() < 1e-15 {
            return self.clone();
        }
        Self { width: self.width, height: self.height, values: self.values.iter().map(|v| v / mass).collect() }
    }

    /// Value of the pixel containing `(x, y)` (clamped to the domain).
    pub fn containing_pixel(&self, x: f64, y: f64) -> f64 {
        let i = ((x * self.width as f64) as isize).clamp(0, self.width as isize - 1) as usize;
        let j = ((y * self.height as f64) as isize).clamp(0, self.height as isize - 1) as usize;
        self.pixel(i, j)
    }

    /// Bilinear interpolation between pixel centres, clamped at the border.
    pub fn bilinear(&self, x: f64, y: f64) -> f64 {
        let u = (x * self.width as f64 - 0.5).clamp(0.0, (self.width - 1) as f64);
        let v = (y * self.height as f64 - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (i0, j0) = (u.floor() as usize, v.floor() as usize);
        let (i1, j1) = ((i0 + 1).min(self.width - 1), (j0 + 1).min(self.height - 1));
        let (fx, fy) = (u - i0 as f64, v - j0 as f64);
        self.pixel(i0, j0) * (1.0 - fx) * (1.0 - fy)
            + self.pixel(i1, j0) * fx * (1.0 - fy)
            + self.pixel(i0, j1) * (1.0 - fx) * fy
            + self.pixel(i1, j1) * fx * fy
    }

    /// Density used for sampling: bilinear, but exactly zero inside a
    /// zero-valued pixel so empty regions stay empty.
    pub fn sample_value(&self, x: f64, y: f64) -> f64 {
        if self.containing_pixel(x, y) <= 0.0 {
            0.0
        } else {
            self.bilinear(x, y)
        }
    }

    /// Fraction of the total mass inside `region`, with partial pixel
    /// coverage weighted by overlap area.
    pub fn integrate_region(&self, region: Region) -> f64 {
        let total = self.raw_sum();
        if total <= 0.0 {
            return 0.0;
        }
        self.region_sum(region) / total
    }

    /// Pixel values weighted by the covered fraction of each pixel.
    fn region_sum(&self, region: Region) -> f64 {
        let overlap = |lo: f64, hi: f64, a: f64, b: f64| (hi.min(b) - lo.max(a)).max(0.0);
        let (w, h) = (self.width as f64, self.height as f64);
        let i0 = ((region.x0 * w).floor().max(0.0)) as usize;
        let i1 = ((region.x1 * w).ceil().min(w)) as usize;
        let j0 = ((region.y0 * h).floor().max(0.0)) as usize;
        let j1 = ((region.y1 * h).ceil().min(h)) as usize;
        let mut acc = 0.0;
        for j in j0..j1 {
            let fy = overlap(j as f64 / h, (j + 1) as f64 / h, region.y0, region.y1) * h;
            if fy <= 0.0 {
                continue;
            }
            for i in i0..i1 {
                let fx = overlap(i as f64 / w, (i + 1) as f64 / w, region.x0, region.x1) * w;
                acc += self.pixel(i, j) * fx * fy;
            }
        }
        acc
    }

    /// Area-weighted resampling onto a `w x h` raster (mass preserving; a
    /// normalized input stays normalized).
    pub fn resample(&self, w: usize, h: usize) -> Self {
        let mut out = vec![0.0; w * h];
        let scale = (w * h) as f64 / (self.width * self.height) as f64;
        for (j, row) in out.chunks_mut(w).enumerate() {
            for (i, v) in row.iter_mut().enumerate() {
                let region = Region {
                    x0: i as f64 / w as f64,
                    y0: j as f64 / h as f64,
                    x1: (i + 1) as f64 / w as f64,
                    y1: (j + 1) as f64 / h as f64,
                };
                *v = self.region_sum(region) * scale;
            }
        }
        Self { width: w, height: h, values: out }
    }

    /// `n` i.i.d. points accepted with probability `rho(p) / rho_max` under
    /// [`DensityMap::sample_value`]. Deterministic per seed.
    pub fn rejection_sample(&self, n: usize, seed: u64) -> Result<PointSet, DensityError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.rejection_sample_with(n, &mut rng)
    }

    pub fn rejection_sample_with(&self, n: usize, rng: &mut impl Rng) -> Result<PointSet, DensityError> {
        if n == 0 {
            return Err(DensityError::NoPoints);
        }
        let max = self.max_value();
        if max <= 0.0 {
            return Err(DensityError::ZeroMass);
        }
        let ratio = self.raw_sum() / (self.values.len() as f64 * max);
        if ratio < 1e-4 {
            return Err(DensityError::LowAcceptance { ratio });
        }
        let mut points = Vec::with_capacity(n);
        while points.len() < n {
            let x: f64 = rng.random();
            let y: f64 = rng.random();
            let u: f64 = rng.random();
            if u * max < self.sample_value(x, y) {
                points.push([x, y]);
            }
        }
        Ok(PointSet::new(points))
    }

    /// Quantizes to 8 bits with white = densest; returns the image and the
    /// density value per gray level.
    pub fn to_gray(&self) -> (GrayImage, f64) {
        let max = self.max_value();
        let scale = if max > 0.0 { max / 255.0 } else { 1.0 };
        let pixels = self.values.iter().map(|v| (v / scale).round().clamp(0.0, 255.0) as u8).collect();
        (GrayImage { width: self.width, height: self.height, pixels }, scale)
    }

    /// Inverse of [`DensityMap::to_gray`].
    pub fn from_gray_scaled(image: &GrayImage, scale: f64) -> Result<Self, DensityError> {
        Self::new(image.width, image.height, image.pixels.iter().map(|&g| g as f64 * scale).collect())
    }
}

/// Declarative description of a density, rendered at any resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DensitySpec {
    Uniform,
    Quadratic,
    Stress {
        #[serde(default)]
        frame: StressFrame,
    },
    /// Mixture of isotropic Gaussians `(cx, cy, sigma, weight)` over a floor.
    Gaussians { components: Vec<[f64; 4]>, floor: f64 },
    /// Linear ramp along direction `angle` (radians) from `floor` to 1.
    Ramp { angle: f64, floor: f64 },
    /// Soft-edged disc.
    Disc { cx: f64, cy: f64, radius: f64, softness: f64, floor: f64 },
    /// `cells x cells` checkerboard alternating between `floor` and 1.
    Checker { cells: usize, floor: f64 },
    /// Soft step across the line `nx*x + ny*y = offset`.
    HalfPlane { nx: f64, ny: f64, offset: f64, softness: f64, floor: f64 },
}

fn smoothstep(edge: f64, softness: f64, v: f64) -> f64 {
    if softness <= 0.0 {
        return if v < edge { 1.0 } else { 0.0 };
    }
    let t = ((edge - v) / softness * 0.5 + 0.5).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

impl DensitySpec {
    pub fn render(&self, resolution: usize) -> Result<DensityMap, DensityError> {
        let r = resolution;
        let map = match self {
            DensitySpec::Uniform => return Ok(DensityMap::uniform(r)),
            DensitySpec::Quadratic => return Ok(DensityMap::analytic_quadratic(r)),
            DensitySpec::Stress { frame } => return DensityMap::analytic_stress(r, *frame),
            DensitySpec::Gaussians { components, floor } => DensityMap::from_fn(r, r, |x, y| {
                floor
                    + components
                        .iter()
                        .map(|c| c[3] * (-((x - c[0]).powi(2) + (y - c[1]).powi(2)) / (2.0 * c[2] * c[2])).exp())
                        .sum::<f64>()
            }),
            DensitySpec::Ramp { angle, floor } => {
                let (c, s) = (angle.cos(), angle.sin());
                // projection range over the square's corners
                let proj = |x: f64, y: f64| c * x + s * y;
                let corners = [proj(0.0, 0.0), proj(1.0, 0.0), proj(0.0, 1.0), proj(1.0, 1.0)];
                let lo = corners.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = corners.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                DensityMap::from_fn(r, r, |x, y| floor + (1.0 - floor) * (proj(x, y) - lo) / (hi - lo))
            }
            DensitySpec::Disc { cx, cy, radius, softness, floor } => DensityMap::from_fn(r, r, |x, y| {
                let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                floor + (1.0 - floor) * smoothstep(*radius, *softness, d)
            }),
            DensitySpec::Checker { cells, floor } => DensityMap::from_fn(r, r, |x, y| {
                let i = (x * *cells as f64) as usize;
                let j = (y * *cells as f64) as usize;
                if (i + j) % 2 == 0 {
                    1.0
                } else {
                    *floor
                }
            }),
            DensitySpec::HalfPlane { nx, ny, offset, softness, floor } => DensityMap::from_fn(r, r, |x, y| {
                floor + (1.0 - floor) * smoothstep(*offset, *softness, nx * x + ny * y)
            }),
        }?;
        if map.total_mass() <= 0.0 {
            return Err(DensityError::ZeroMass);
        }
        Ok(map.normalized())
    }

    /// A random synthetic density: Gaussian mixtures (1-5 components),
    /// ramps, discs, checkers or half-plane silhouettes.
    pub fn random(rng: &mut impl Rng) -> Self {
        let floor = rng.random_range(0.05..0.25);
        match rng.random_range(0..5) {
            0 => {
                let k = rng.random_range(1..=5);
                let components = (0..k)
                    .map(|_| {
                        [
                            rng.random_range(0.15..0.85),
                            rng.random_range(0.15..0.85),
                            rng.random_range(0.08..0.3),
                            rng.random_range(0.3..1.0),
                        ]
                    })
                    .collect();
                DensitySpec::Gaussians { components, floor }
            }
            1 => DensitySpec::Ramp { angle: rng.random_range(0.0..std::f64::consts::TAU), floor },
            2 => DensitySpec::Disc {
                cx: rng.random_range(0.3..0.7),
                cy: rng.random_range(0.3..0.7),
                radius: rng.random_range(0.15..0.4),
                softness: rng.random_range(0.02..0.15),
                floor,
            },
            3 => DensitySpec::Checker { cells: rng.random_range(2..=4), floor: floor.max(0.15) },
            _ => {
                let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let (nx, ny) = (angle.cos(), angle.sin());
                let offset = nx * rng.random_range(0.3..0.7) + ny * rng.random_range(0.3..0.7);
                DensitySpec::HalfPlane { nx, ny, offset, softness: rng.random_range(0.02..0.2), floor }
            }
        }
    }

    /// A deterministic list of `count` random densities.
    pub fn random_set(count: usize, seed: u64) -> Vec<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| Self::random(&mut rng)).collect()
    }
}
