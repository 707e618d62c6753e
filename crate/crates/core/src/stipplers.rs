//! Classical stipplers (weighted Voronoi stippling, rejection sampling) and
//! generation of training pairs from them.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::{DensityError, DensityMap, DensitySpec};
use crate::image::{GrayImage, ImageError};
use crate::points::{PointSet, PointsError};
use crate::transport::{self, OtGrid, TransportError};
use crate::voronoi;

#[derive(Debug, Error)]
pub enum StippleError {
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Points(#[from] PointsError),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub const DEFAULT_MAX_ITERS: usize = 200;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Side of the grayscale image handed to the image-feature extractor.
pub const IMAGE_RESOLUTION: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WvsConfig {
    pub max_iters: usize,
    /// Stop once no site moves farther than this.
    pub tol: f64,
    /// Raster side for the Voronoi labeling; `None` picks
    /// [`voronoi::default_resolution`].
    pub resolution: Option<usize>,
}

impl Default for WvsConfig {
    fn default() -> Self {
        Self { max_iters: DEFAULT_MAX_ITERS, tol: DEFAULT_TOL, resolution: None }
    }
}

/// Density-weighted Lloyd relaxation of `init`. `on_iter` sees the labeling of
/// every iterate before its sites move.
pub fn lloyd(
    density: &DensityMap,
    init: PointSet,
    config: &WvsConfig,
    mut on_iter: impl FnMut(usize, &voronoi::VoronoiLabeling),
) -> PointSet {
    let r = config.resolution.unwrap_or_else(|| voronoi::default_resolution(init.len()));
    let d = density.normalized();
    let d = if d.width() == r && d.height() == r { d } else { d.resample(r, r) };
    let mut points = init;
    for it in 0..config.max_iters {
        let lab = voronoi::label(&points, &d, r);
        on_iter(it, &lab);
        let next = lab.weighted_centroids();
        let moved = next.iter().zip(&points.points).map(|(a, b)| crate::points::dist2(*a, *b)).fold(0.0, f64::max).sqrt();
        points = PointSet::new(next);
        if moved < config.tol {
            break;
        }
    }
    points
}

/// Weighted Voronoi stippling: rejection-sampled start, then Lloyd relaxation.
pub fn wvs(density: &DensityMap, n: usize, max_iters: usize, tol: f64, seed: u64) -> Result<PointSet, DensityError> {
    wvs_with(density, n, seed, &WvsConfig { max_iters, tol, resolution: None })
}

pub fn wvs_with(density: &DensityMap, n: usize, seed: u64, config: &WvsConfig) -> Result<PointSet, DensityError> {
    let init = density.rejection_sample(n, seed)?;
    Ok(lloyd(density, init, config, |_, _| {}))
}

/// Density-weighted rejection sampling, the unrelaxed baseline.
pub fn rejection(density: &DensityMap, n: usize, seed: u64) -> Result<PointSet, DensityError> {
    density.rejection_sample(n, seed)
}

/// The static conditioning inputs for a `k x k` grid: the grayscale image
/// (bright = dense) and the density in expected points per stratum.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionInputs {
    pub k: usize,
    /// Row-major `k x k`; averages to 1.
    pub density: Vec<f64>,
    pub image: GrayImage,
}

impl ConditionInputs {
    pub fn from_density(density: &DensityMap, k: usize) -> Result<Self, DensityError> {
        Self::from_image(density_image(density), k)
    }

    /// The density channel is recovered from the quantized image so that a
    /// stored image reproduces the condition exactly.
    pub fn from_image(image: GrayImage, k: usize) -> Result<Self, DensityError> {
        let d = DensityMap::from_grayscale(&image, false)?.resample(k, k);
        Ok(Self { k, density: d.values().to_vec(), image })
    }

    /// Same image, density re-rasterized for another grid size.
    pub fn resized(&self, k: usize) -> Result<Self, DensityError> {
        Self::from_image(self.image.clone(), k)
    }
}

/// `IMAGE_RESOLUTION`-square 8-bit rendering of a density, white = densest.
pub fn density_image(density: &DensityMap) -> GrayImage {
    density.normalized().resample(IMAGE_RESOLUTION, IMAGE_RESOLUTION).to_gray().0
}

#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub spec: DensitySpec,
    pub seed: u64,
    /// The WVS target in generation order.
    pub points: PointSet,
    pub grid: OtGrid,
    pub condition: ConditionInputs,
    /// The density the target was relaxed against, at labeling resolution.
    pub density: DensityMap,
}

/// WVS target for `spec` with `n` points, its OT grid and condition inputs.
pub fn make_training_pair(spec: &DensitySpec, n: usize, seed: u64) -> Result<TrainingPair, StippleError> {
    make_training_pair_with(spec, n, seed, &WvsConfig::default())
}

pub fn make_training_pair_with(
    spec: &DensitySpec,
    n: usize,
    seed: u64,
    config: &WvsConfig,
) -> Result<TrainingPair, StippleError> {
    let k = transport::grid_side(n)?;
    let r = config.resolution.unwrap_or_else(|| voronoi::default_resolution(n));
    let density = spec.render(r)?;
    let points = wvs_with(&density, n, seed, config)?;
    let grid = transport::encode(&points)?;
    let condition = ConditionInputs::from_density(&density, k)?;
    Ok(TrainingPair { spec: spec.clone(), seed, points, grid, condition, density })
}

/// Pairs for `specs[i]` with seed `base_seed + i`, generated in parallel.
pub fn make_training_pairs(
    specs: &[DensitySpec],
    n: usize,
    base_seed: u64,
    config: &WvsConfig,
) -> Result<Vec<TrainingPair>, StippleError> {
    specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| make_training_pair_with(spec, n, base_seed + i as u64, config))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub spec: DensitySpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub k: usize,
    pub n: usize,
    pub pairs: Vec<ManifestEntry>,
}

/// A stored pair as read back for training.
#[derive(Clone, Debug)]
pub struct DatasetItem {
    pub grid: OtGrid,
    pub condition: ConditionInputs,
}

/// Writes `file` via a sibling temporary and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn write_pair(dir: &Path, id: &str, pair: &TrainingPair) -> Result<ManifestEntry, StippleError> {
    let pdir = pair_dir(dir, id);
    fs::create_dir_all(&pdir)?;
    let mut buf = Vec::new();
    pair.density.to_gray().0.write_pgm(&mut buf)?;
    write_atomic(&pdir.join("density.pgm"), &buf)?;
    buf.clear();
    pair.condition.image.write_pgm(&mut buf)?;
    write_atomic(&pdir.join("image.pgm"), &buf)?;
    write_atomic(&pdir.join("points.csv"), pair.points.to_csv().as_bytes())?;
    buf.clear();
    pair.grid.write_to(&mut buf)?;
    write_atomic(&pdir.join("grid.bin"), &buf)?;
    Ok(ManifestEntry { id: id.to_owned(), seed: pair.seed, spec: pair.spec.clone() })
}

fn write_manifest(dir: &Path, k: usize, pairs: Vec<ManifestEntry>) -> Result<Manifest, StippleError> {
    let manifest = Manifest { k, n: k * k, pairs };
    write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

/// `pairs/NNNN/{density.pgm, image.pgm, points.csv, grid.bin}` plus
/// `manifest.json` under `dir`.
pub fn write_dataset(dir: &Path, pairs: &[TrainingPair]) -> Result<Manifest, StippleError> {
    let k = pairs.first().map(|p| p.grid.k()).unwrap_or(0);
    let entries = pairs
        .iter()
        .enumerate()
        .map(|(i, pair)| write_pair(dir, &format!("{i:04}"), pair))
        .collect::<Result<Vec<_>, _>>()?;
    write_manifest(dir, k, entries)
}

/// Same layout as [`write_dataset`] for the pairs [`make_training_pairs`]
/// would produce, but each pair goes to disk as soon as it is generated, so
/// memory stays bounded by the pairs in flight. The manifest is written last.
pub fn generate_dataset(
    dir: &Path,
    specs: &[DensitySpec],
    n: usize,
    base_seed: u64,
    config: &WvsConfig,
) -> Result<Manifest, StippleError> {
    let k = transport::grid_side(n)?;
    let entries = specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let pair = make_training_pair_with(spec, n, base_seed + i as u64, config)?;
            write_pair(dir, &format!("{i:04}"), &pair)
        })
        .collect::<Result<Vec<_>, _>>()?;
    write_manifest(dir, k, entries)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, StippleError> {
    Ok(serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?)
}

fn pair_dir(dir: &Path, id: &str) -> PathBuf {
    dir.join("pairs").join(id)
}

/// Loads every pair listed in the manifest.
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<DatasetItem>), StippleError> {
    let manifest = read_manifest(dir)?;
    let items = manifest
        .pairs
        .iter()
        .map(|e| {
            let pdir = pair_dir(dir, &e.id);
            let grid = OtGrid::read_from(io::BufReader::new(fs::File::open(pdir.join("grid.bin"))?))?;
            let image = GrayImage::read_pgm(fs::File::open(pdir.join("image.pgm"))?)?;
            let condition = ConditionInputs::from_image(image, grid.k())?;
            Ok(DatasetItem { grid, condition })
        })
        .collect::<Result<Vec<_>, StippleError>>()?;
    Ok((manifest, items))
}
