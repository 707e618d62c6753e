//! Raster Voronoi diagrams over a density: nearest-site labels, cell
//! capacities, density-weighted centroids and second moments.

use rayon::prelude::*;

use crate::density::DensityMap;
use crate::points::{dist2, PointSet};

/// Per-cell integrals over the labelled raster.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CellStats {
    /// `∫ rho` over the cell.
    pub mass: f64,
    /// `∫ rho x`, `∫ rho y`.
    pub moment: [f64; 2],
    /// `∫ rho |x - site|^2`.
    pub second_moment: f64,
}

#[derive(Clone, Debug)]
pub struct VoronoiLabeling {
    resolution: usize,
    labels: Vec<u32>,
    sites: Vec<[f64; 2]>,
    cells: Vec<CellStats>,
}

impl VoronoiLabeling {
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Nearest-site index per pixel, row-major.
    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn cells(&self) -> &[CellStats] {
        &self.cells
    }

    pub fn sites(&self) -> &[[f64; 2]] {
        &self.sites
    }

    /// `c(s_i)`, the density mass of each cell.
    pub fn capacities(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.mass).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.cells.iter().map(|c| c.mass).sum()
    }

    /// Density-weighted centroid per cell; cells without mass keep their site.
    pub fn weighted_centroids(&self) -> Vec<[f64; 2]> {
        self.cells
            .iter()
            .zip(&self.sites)
            .map(|(c, s)| if c.mass > 0.0 { [c.moment[0] / c.mass, c.moment[1] / c.mass] } else { *s })
            .collect()
    }

    /// `Σ_i ∫_{V_i} rho |x - s_i|^2`, in the units of the supplied density.
    pub fn cvt_energy(&self) -> f64 {
        self.cells.iter().map(|c| c.second_moment).sum()
    }
}

/// Uniform bucket grid over the sites.
struct SiteGrid {
    g: usize,
    buckets: Vec<Vec<u32>>,
}

impl SiteGrid {
    fn new(sites: &[[f64; 2]]) -> Self {
        let g = ((sites.len() as f64).sqrt().ceil() as usize).max(1);
        let mut buckets = vec![Vec::new(); g * g];
        for (i, p) in sites.iter().enumerate() {
            let (bx, by) = Self::bucket_of(g, *p);
            buckets[by * g + bx].push(i as u32);
        }
        Self { g, buckets }
    }

    fn bucket_of(g: usize, p: [f64; 2]) -> (usize, usize) {
        let f = |v: f64| ((v * g as f64).floor().max(0.0) as usize).min(g - 1);
        (f(p[0]), f(p[1]))
    }
}

fn rect_min_dist2(lo: [f64; 2], hi: [f64; 2], p: [f64; 2]) -> f64 {
    let dx = (lo[0] - p[0]).max(0.0).max(p[0] - hi[0]);
    let dy = (lo[1] - p[1]).max(0.0).max(p[1] - hi[1]);
    dx * dx + dy * dy
}

fn rect_max_dist2(lo: [f64; 2], hi: [f64; 2], p: [f64; 2]) -> f64 {
    let dx = (p[0] - lo[0]).abs().max((hi[0] - p[0]).abs());
    let dy = (p[1] - lo[1]).abs().max((hi[1] - p[1]).abs());
    dx * dx + dy * dy
}

/// Sites that can be nearest to some point of the rectangle: all sites whose
/// distance to it does not exceed the smallest farthest-distance of any site.
fn candidates(grid: &SiteGrid, sites: &[[f64; 2]], lo: [f64; 2], hi: [f64; 2], out: &mut Vec<u32>) {
    let g = grid.g;
    let (bx0, by0) = SiteGrid::bucket_of(g, lo);
    let (bx1, by1) = SiteGrid::bucket_of(g, hi);
    let cs = 1.0 / g as f64;
    let mut upper = f64::INFINITY;
    let mut seen: Vec<u32> = Vec::new();
    let mut ring = 0usize;
    loop {
        let x0 = bx0 as isize - ring as isize;
        let x1 = (bx1 + ring) as isize;
        let y0 = by0 as isize - ring as isize;
        let y1 = (by1 + ring) as isize;
        let mut any_inside = false;
        for by in y0..=y1 {
            for bx in x0..=x1 {
                let on_ring = ring == 0 || by == y0 || by == y1 || bx == x0 || bx == x1;
                if !on_ring || bx < 0 || by < 0 || bx >= g as isize || by >= g as isize {
                    continue;
                }
                any_inside = true;
                for &s in &grid.buckets[by as usize * g + bx as usize] {
                    upper = upper.min(rect_max_dist2(lo, hi, sites[s as usize]));
                    seen.push(s);
                }
            }
        }
        // anything beyond this ring is at least `ring * cs` from the rectangle
        let bound = ring as f64 * cs;
        if (!any_inside && ring > 0) || (upper.is_finite() && bound * bound > upper) {
            break;
        }
        ring += 1;
    }
    out.clear();
    out.extend(seen.into_iter().filter(|&s| rect_min_dist2(lo, hi, sites[s as usize]) <= upper));
    out.sort_unstable();
}

const BLOCK: usize = 8;

/// Nearest-site labels for every pixel centre of an `r x r` raster; ties go
/// to the lowest site index.
pub fn nearest_labels(sites: &[[f64; 2]], r: usize) -> Vec<u32> {
    assert!(!sites.is_empty(), "at least one site");
    let grid = SiteGrid::new(sites);
    let blocks = r.div_ceil(BLOCK);
    let px = 1.0 / r as f64;
    let band_rows: Vec<Vec<u32>> = (0..blocks)
        .into_par_iter()
        .map(|by| {
            let y_start = by * BLOCK;
            let y_end = (y_start + BLOCK).min(r);
            let mut band = vec![0u32; (y_end - y_start) * r];
            let mut cand = Vec::new();
            for bx in 0..blocks {
                let x_start = bx * BLOCK;
                let x_end = (x_start + BLOCK).min(r);
                let lo = [(x_start as f64 + 0.5) * px, (y_start as f64 + 0.5) * px];
                let hi = [(x_end as f64 - 0.5) * px, (y_end as f64 - 0.5) * px];
                candidates(&grid, sites, lo, hi, &mut cand);
                for y in y_start..y_end {
                    let cy = (y as f64 + 0.5) * px;
                    for x in x_start..x_end {
                        let p = [(x as f64 + 0.5) * px, cy];
                        let mut best = cand[0];
                        let mut bd = dist2(p, sites[best as usize]);
                        for &s in &cand[1..] {
                            let d = dist2(p, sites[s as usize]);
                            if d < bd {
                                bd = d;
                                best = s;
                            }
                        }
                        band[(y - y_start) * r + x] = best;
                    }
                }
            }
            band
        })
        .collect();
    band_rows.concat()
}

/// Labels an `r x r` raster and integrates `density` over each cell. The
/// density is resampled (mass preserving) when its raster differs from `r`.
pub fn label(points: &PointSet, density: &DensityMap, r: usize) -> VoronoiLabeling {
    let resampled;
    let d = if density.width() == r && density.height() == r {
        density
    } else {
        resampled = density.resample(r, r);
        &resampled
    };
    let sites = points.points.clone();
    let labels = nearest_labels(&sites, r);
    let area = 1.0 / (r * r) as f64;
    let px = 1.0 / r as f64;
    let mut cells = vec![CellStats::default(); sites.len()];
    // fixed row-major accumulation order
    for y in 0..r {
        let cy = (y as f64 + 0.5) * px;
        for x in 0..r {
            let rho = d.values()[y * r + x] * area;
            if rho == 0.0 {
                continue;
            }
            let cx = (x as f64 + 0.5) * px;
            let s = labels[y * r + x] as usize;
            let c = &mut cells[s];
            c.mass += rho;
            c.moment[0] += rho * cx;
            c.moment[1] += rho * cy;
            c.second_moment += rho * dist2([cx, cy], sites[s]);
        }
    }
    VoronoiLabeling { resolution: r, labels, sites, cells }
}

/// Default raster resolution for `n` points: `32 * sqrt(n)` clamped to
/// `[256, 1024]`, which gives 1024 for 1024 points.
pub fn default_resolution(n: usize) -> usize {
    let k = (n as f64).sqrt().ceil() as usize;
    (32 * k).clamp(256, 1024)
}
