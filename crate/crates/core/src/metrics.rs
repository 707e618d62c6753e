//! Stipple quality metrics: CVT energy, capacity error, exact 2-Wasserstein
//! distance, Sinkhorn distance and the spatial measure, plus aggregation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::DensityMap;
use crate::netsimplex;
use crate::points::{dist2, PointSet};
use crate::voronoi;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("metric needs at least {0} points")]
    TooFewPoints(usize),
    #[error("sinkhorn did not converge in {iters} iterations; marginal violation {violation:.3e}")]
    SinkhornDiverged { iters: usize, violation: f64 },
    #[error("{stipples} stipples but {densities} densities")]
    Mismatch { stipples: usize, densities: usize },
    #[error("density has no mass")]
    ZeroMass,
}

/// Hexagonal-packing spacing in density-transformed units.
pub fn r_max() -> f64 {
    (2.0 / 3f64.sqrt()).sqrt()
}

/// `Σ_i ∫_{V_i} rho |x - s_i|^2` for the unit-mass density on an `r x r` raster.
pub fn cvt_energy(points: &PointSet, density: &DensityMap, r: usize) -> f64 {
    voronoi::label(points, &density.normalized(), r).cvt_energy()
}

/// Squared coefficient of variation of the cell capacities.
pub fn capacity_error(points: &PointSet, density: &DensityMap, r: usize) -> f64 {
    capacity_error_of(&voronoi::label(points, &density.normalized(), r).capacities())
}

/// `(1/n) Σ (c_i / c* - 1)^2` with `c*` the mean capacity.
pub fn capacity_error_of(capacities: &[f64]) -> f64 {
    let n = capacities.len() as f64;
    let mean = capacities.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return 0.0;
    }
    capacities.iter().map(|c| (c / mean - 1.0).powi(2)).sum::<f64>() / n
}

/// Weighted sites approximating a density: one site per cell of a
/// `g x g` stratification (`g = floor(sqrt(m))`), placed at the cell's
/// density-weighted centroid and carrying its mass. Empty cells are dropped.
pub fn support_sites(density: &DensityMap, m: usize) -> (Vec<[f64; 2]>, Vec<f64>) {
    let g = ((m as f64).sqrt().floor() as usize).max(1);
    let (w, h) = (density.width(), density.height());
    let mut acc = vec![[0.0f64; 3]; g * g];
    for j in 0..h {
        for i in 0..w {
            let v = density.pixel(i, j);
            if v == 0.0 {
                continue;
            }
            let c = density.pixel_center(i, j);
            let (gx, gy) = (((c[0] * g as f64) as usize).min(g - 1), ((c[1] * g as f64) as usize).min(g - 1));
            let a = &mut acc[gy * g + gx];
            a[0] += v;
            a[1] += v * c[0];
            a[2] += v * c[1];
        }
    }
    let total: f64 = acc.iter().map(|a| a[0]).sum();
    let mut sites = Vec::new();
    let mut weights = Vec::new();
    for a in &acc {
        if a[0] > 0.0 {
            sites.push([a[1] / a[0], a[2] / a[0]]);
            weights.push(a[0] / total);
        }
    }
    (sites, weights)
}

/// Support size for `n` points: at most 4096 sites, and `n * m <= 10^6`.
pub fn default_support(n: usize) -> usize {
    4096.min(1_000_000 / n.max(1)).max(1)
}

/// Integer masses summing to `total`, proportional to `weights`
/// (largest-remainder rounding).
fn quantize(weights: &[f64], total: i64) -> Vec<i64> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut q: Vec<i64> = exact.iter().map(|e| e.floor() as i64).collect();
    let mut rest = total - q.iter().sum::<i64>();
    let mut order: Vec<usize> = (0..q.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        q[i] += 1;
        rest -= 1;
    }
    q
}

/// Exact 2-Wasserstein distance between two discrete measures.
pub fn w2_discrete(a: &[[f64; 2]], wa: &[f64], b: &[[f64; 2]], wb: &[f64]) -> f64 {
    // masses in units of 2^-40 of the total
    let units: i64 = 1 << 40;
    let sa = quantize(wa, units);
    let sb = quantize(wb, units);
    let flows = netsimplex::solve(&sa, &sb, |i, j| dist2(a[i], b[j]));
    let cost: f64 = flows.iter().map(|&(i, j, f)| f as f64 * dist2(a[i], b[j])).sum();
    (cost / units as f64).max(0.0).sqrt()
}

/// W2 between equal-weight point sets.
pub fn w2_points(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    w2_discrete(a, &vec![1.0; a.len()], b, &vec![1.0; b.len()])
}

/// W2 between the points (weight `1/n` each) and the density discretized to
/// `m` weighted support sites.
pub fn emd(points: &PointSet, density: &DensityMap, m: usize) -> f64 {
    let (sites, weights) = support_sites(density, m);
    w2_discrete(&points.points, &vec![1.0; points.len()], &sites, &weights)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornConfig {
    /// Entropic regularization `lambda`.
    pub lambda: f64,
    pub max_iters: usize,
    /// L1 violation of the row marginal that counts as converged.
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self { lambda: 1e-3, max_iters: 100_000, tol: 1e-6 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornResult {
    /// Transport term `<gamma, C>` of the regularized plan.
    pub cost: f64,
    /// `H(gamma) = -Σ gamma log gamma`.
    pub entropy: f64,
    /// Final L1 row-marginal violation (columns are exact after each sweep).
    pub violation: f64,
    pub iterations: usize,
}

impl SinkhornResult {
    /// `sqrt(<gamma, C>)`, on the same scale as [`emd`].
    pub fn distance(&self) -> f64 {
        self.cost.max(0.0).sqrt()
    }
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Sinkhorn scaling iterations with epsilon scaling from the cost diameter
/// down to `lambda`; cost matrix `|x - y|^2`. Scalings are absorbed into
/// log-domain potentials whenever they grow large, so small `lambda` stays
/// stable.
pub fn sinkhorn_discrete(
    a: &[[f64; 2]],
    wa: &[f64],
    b: &[[f64; 2]],
    wb: &[f64],
    config: &SinkhornConfig,
) -> Result<SinkhornResult, MetricsError> {
    let (n, m) = (a.len(), b.len());
    let sa: f64 = wa.iter().sum();
    let sb: f64 = wb.iter().sum();
    let pa: Vec<f64> = wa.iter().map(|w| w / sa).collect();
    let pb: Vec<f64> = wb.iter().map(|w| w / sb).collect();
    let c: Vec<f64> = (0..n * m).map(|k| dist2(a[k / m], b[k % m])).collect();
    let cmax = c.iter().copied().fold(0.0, f64::max);

    // plan = u_i K_ij v_j with K_ij = exp((f_i + g_j - C_ij) / eps)
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut kernel = vec![0.0; n * m];
    let mut kv = vec![0.0; n];
    let mut ktu = vec![0.0; m];
    let mut eps = cmax.max(config.lambda);
    let mut iterations = 0;
    const BOUND: f64 = 1e100;

    let build = |kernel: &mut [f64], f: &[f64], g: &[f64], eps: f64| {
        kernel.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
            for (j, k) in row.iter_mut().enumerate() {
                *k = ((f[i] + g[j] - c[i * m + j]) / eps).exp();
            }
        });
    };
    let absorb = |f: &mut [f64], g: &mut [f64], u: &mut [f64], v: &mut [f64], eps: f64| {
        for (fi, ui) in f.iter_mut().zip(u.iter_mut()) {
            *fi += eps * ui.ln();
            *ui = 1.0;
        }
        for (gj, vj) in g.iter_mut().zip(v.iter_mut()) {
            *gj += eps * vj.ln();
            *vj = 1.0;
        }
    };
    // log-domain sweep, used when a kernel row or column underflows entirely
    let log_sweep = |f: &mut [f64], g: &mut [f64], eps: f64| {
        f.par_iter_mut().enumerate().for_each(|(i, fi)| {
            let terms = (0..m).map(|j| (g[j] - c[i * m + j]) / eps);
            *fi = eps * (pa[i].ln() - logsumexp(terms));
        });
        g.par_iter_mut().enumerate().for_each(|(j, gj)| {
            let terms = (0..n).map(|i| (f[i] - c[i * m + j]) / eps);
            *gj = eps * (pb[j].ln() - logsumexp(terms));
        });
    };

    build(&mut kernel, &f, &g, eps);
    loop {
        let last = eps <= config.lambda;
        let stage_tol = if last { config.tol } else { config.tol.max(1e-3) };
        let stage_cap = if last { config.max_iters } else { 1000 };
        let mut violation = f64::INFINITY;
        for _ in 0..stage_cap {
            kv.par_iter_mut().zip(kernel.par_chunks(m)).for_each(|(s, row)| {
                *s = row.iter().zip(&v).map(|(k, vj)| k * vj).sum();
            });
            violation = u.iter().zip(&kv).zip(&pa).map(|((ui, s), p)| (ui * s - p).abs()).sum();
            if violation < stage_tol {
                break;
            }
            iterations += 1;
            for ((ui, s), p) in u.iter_mut().zip(&kv).zip(&pa) {
                *ui = p / s;
            }
            ktu.iter_mut().for_each(|x| *x = 0.0);
            for (row, ui) in kernel.chunks(m).zip(&u) {
                for (t, k) in ktu.iter_mut().zip(row) {
                    *t += ui * k;
                }
            }
            for ((vj, t), p) in v.iter_mut().zip(&ktu).zip(&pb) {
                *vj = p / t;
            }
            let finite = u.iter().chain(&v).all(|x| x.is_finite() && *x > 0.0);
            if !finite {
                u.iter_mut().chain(v.iter_mut()).for_each(|x| *x = 1.0);
                log_sweep(&mut f, &mut g, eps);
                build(&mut kernel, &f, &g, eps);
            } else if u.iter().chain(&v).any(|x| *x > BOUND || *x < 1.0 / BOUND) {
                absorb(&mut f, &mut g, &mut u, &mut v, eps);
                build(&mut kernel, &f, &g, eps);
            }
        }
        if last {
            if !(violation < config.tol) {
                return Err(MetricsError::SinkhornDiverged { iters: iterations, violation });
            }
            let (cost, entropy) = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut cost = 0.0;
                    let mut ent = 0.0;
                    for j in 0..m {
                        let p = u[i] * kernel[i * m + j] * v[j];
                        if p > 0.0 {
                            cost += p * c[i * m + j];
                            ent -= p * p.ln();
                        }
                    }
                    (cost, ent)
                })
                .collect::<Vec<_>>()
                .into_iter()
                .fold((0.0, 0.0), |x, y| (x.0 + y.0, x.1 + y.1));
            return Ok(SinkhornResult { cost, entropy, violation, iterations });
        }
        absorb(&mut f, &mut g, &mut u, &mut v, eps);
        eps = (eps * 0.5).max(config.lambda);
        build(&mut kernel, &f, &g, eps);
    }
}

/// Sinkhorn between the points and the density support of size `m`.
pub fn sinkhorn(
    points: &PointSet,
    density: &DensityMap,
    m: usize,
    config: &SinkhornConfig,
) -> Result<SinkhornResult, MetricsError> {
    let (sites, weights) = support_sites(density, m);
    sinkhorn_discrete(&points.points, &vec![1.0; points.len()], &sites, &weights, config)
}

/// `r_min / r_max` where `r_min` is the smallest pairwise distance scaled by
/// `sqrt(n * rho(midpoint))` under the unit-mass density.
pub fn spatial_measure(points: &PointSet, density: &DensityMap) -> Result<f64, MetricsError> {
    let n = points.len();
    if n < 2 {
        return Err(MetricsError::TooFewPoints(2));
    }
    if density.total_mass() <= 0.0 {
        return Err(MetricsError::ZeroMass);
    }
    let d = density.normalized();
    let p = &points.points;
    let r_min = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut best = f64::INFINITY;
            for j in i + 1..n {
                let mid = [(p[i][0] + p[j][0]) * 0.5, (p[i][1] + p[j][1]) * 0.5];
                let r = dist2(p[i], p[j]).sqrt() * (n as f64 * d.bilinear(mid[0], mid[1])).sqrt();
                best = best.min(r);
            }
            best
        })
        .reduce(|| f64::INFINITY, f64::min);
    Ok(r_min / r_max())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsConfig {
    /// Voronoi raster side; `None` uses [`voronoi::default_resolution`].
    pub resolution: Option<usize>,
    /// Support size for the transport metrics; `None` uses [`default_support`].
    pub support: Option<usize>,
    pub sinkhorn: SinkhornConfig,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { resolution: None, support: None, sinkhorn: SinkhornConfig::default() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemMetrics {
    pub cvt_energy: f64,
    pub capacity_error: f64,
    pub emd: f64,
    pub sinkhorn: f64,
    pub spatial_measure: f64,
}

impl ItemMetrics {
    pub const NAMES: [&'static str; 5] = ["cvt_energy", "capacity_error", "emd", "sinkhorn", "spatial_measure"];

    pub fn values(&self) -> [f64; 5] {
        [self.cvt_energy, self.capacity_error, self.emd, self.sinkhorn, self.spatial_measure]
    }

    fn from_values(v: [f64; 5]) -> Self {
        Self { cvt_energy: v[0], capacity_error: v[1], emd: v[2], sinkhorn: v[3], spatial_measure: v[4] }
    }
}

/// All five metrics for one stipple.
pub fn evaluate(points: &PointSet, density: &DensityMap, config: &MetricsConfig) -> Result<ItemMetrics, MetricsError> {
    if points.len() < 2 {
        return Err(MetricsError::TooFewPoints(2));
    }
    let n = points.len();
    let r = config.resolution.unwrap_or_else(|| voronoi::default_resolution(n));
    let d = density.normalized();
    let lab = voronoi::label(points, &d, r);
    let m = config.support.unwrap_or_else(|| default_support(n));
    let (sites, weights) = support_sites(&d, m);
    let unit = vec![1.0; n];
    Ok(ItemMetrics {
        cvt_energy: lab.cvt_energy(),
        capacity_error: capacity_error_of(&lab.capacities()),
        emd: w2_discrete(&points.points, &unit, &sites, &weights),
        sinkhorn: sinkhorn_discrete(&points.points, &unit, &sites, &weights, &config.sinkhorn)?.distance(),
        spatial_measure: spatial_measure(points, &d)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub n: usize,
    pub per_item: Vec<ItemMetrics>,
    pub mean: ItemMetrics,
    pub std: ItemMetrics,
}

impl MetricsReport {
    /// Mean and (population) standard deviation, accumulated in index order.
    pub fn from_items(method: &str, n: usize, per_item: Vec<ItemMetrics>) -> Self {
        let count = per_item.len().max(1) as f64;
        let mut mean = [0.0; 5];
        for it in &per_item {
            for (m, v) in mean.iter_mut().zip(it.values()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = [0.0; 5];
        for it in &per_item {
            for ((s, v), m) in var.iter_mut().zip(it.values()).zip(mean) {
                *s += (v - m).powi(2);
            }
        }
        let std = var.map(|s| (s / count).sqrt());
        Self {
            method: method.to_owned(),
            n,
            per_item,
            mean: ItemMetrics::from_values(mean),
            std: ItemMetrics::from_values(std),
        }
    }

    pub fn csv_header() -> String {
        let mut cols = vec!["method".to_owned()];
        for name in ItemMetrics::NAMES {
            cols.push(format!("{name}_mean"));
            cols.push(format!("{name}_std"));
        }
        cols.join(",")
    }

    /// One row: method, then mean and std per metric.
    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.method.clone()];
        for (m, s) in self.mean.values().iter().zip(self.std.values()) {
            cols.push(format!("{m:.6}"));
            cols.push(format!("{s:.6}"));
        }
        cols.join(",")
    }
}

/// Metrics for every `(stipple, density)` pair, evaluated in parallel and
/// aggregated in index order.
pub fn evaluate_set(
    method: &str,
    stipples: &[PointSet],
    densities: &[DensityMap],
    config: &MetricsConfig,
) -> Result<MetricsReport, MetricsError> {
    if stipples.len() != densities.len() {
        return Err(MetricsError::Mismatch { stipples: stipples.len(), densities: densities.len() });
    }
    let per_item = stipples
        .par_iter()
        .zip(densities)
        .map(|(p, d)| evaluate(p, d, config))
        .collect::<Result<Vec<_>, _>>()?;
    let n = stipples.first().map_or(0, PointSet::len);
    Ok(MetricsReport::from_items(method, n, per_item))
}
