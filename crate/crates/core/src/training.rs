//! Min-SNR-weighted noise-prediction training for the base U-Net and the
//! control branch, with Adam and step-seeded randomness so that a resumed
//! run continues exactly where it stopped.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint;
use crate::diffusion::{forward_noise, DiffusionError, NoiseSchedule};
use crate::model::{
    self, denoise_graph, feature_map, stored_variant, Binder, ConditionNodes, ModelError, ParamSet, Variant,
};
use crate::scalar::Scalar;
use crate::stipplers::{write_atomic, DatasetItem};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error("loss became non-finite at step {0}")]
    NonFinite(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Timesteps are drawn uniformly from `1..=t_trunc`.
    pub t_trunc: usize,
    /// SNR clamp of the loss weight.
    pub gamma: f64,
    pub batch: usize,
    pub lr: f64,
    /// Total optimizer steps; a resumed run stops at the same count.
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { t_trunc: 300, gamma: 5.0, batch: 8, lr: 2e-4, steps: 3000, seed: 0 }
    }
}

impl TrainConfig {
    fn validate(&self, schedule: &NoiseSchedule) -> Result<(), TrainError> {
        if self.t_trunc == 0 || self.t_trunc > schedule.steps() {
            return Err(TrainError::Config(format!("t_trunc {} outside 1..={}", self.t_trunc, schedule.steps())));
        }
        if !(self.gamma > 0.0) {
            return Err(TrainError::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.batch == 0 {
            return Err(TrainError::Config("batch must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {}", self.lr)));
        }
        Ok(())
    }
}

pub fn snr(schedule: &NoiseSchedule, t: usize) -> f64 {
    schedule.snr(t)
}

/// `min(snr, gamma) / snr`.
pub fn min_snr_weight(snr: f64, gamma: f64) -> f64 {
    snr.min(gamma) / snr
}

/// Adam with bias correction. Moments are kept per parameter name.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed steps.
    pub step: usize,
    m: ParamSet<T>,
    v: ParamSet<T>,
}

const STEP_KEY: &str = "adam.step";
const HYPER_KEY: &str = "adam.hyper";

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: ParamSet::new(), v: ParamSet::new() }
    }

    /// Applies one update from named gradients.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &[(String, Tensor<T>)]) -> Result<(), TrainError> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            if self.m.get(name).is_none() {
                self.m.insert(name.clone(), Tensor::zeros(g.shape().to_vec()));
                self.v.insert(name.clone(), Tensor::zeros(g.shape().to_vec()));
            }
            let (b1, b2) = (self.beta1, self.beta2);
            let mut mv = Vec::new();
            self.m.update(name, |m| {
                for (m, &g) in m.data_mut().iter_mut().zip(g.data()) {
                    *m = T::of(b1 * m.to_f64_lossy() + (1.0 - b1) * g.to_f64_lossy());
                }
                mv = m.data().to_vec();
            })?;
            let mut vv = Vec::new();
            self.v.update(name, |v| {
                for (v, &g) in v.data_mut().iter_mut().zip(g.data()) {
                    let g = g.to_f64_lossy();
                    *v = T::of(b2 * v.to_f64_lossy() + (1.0 - b2) * g * g);
                }
                vv = v.data().to_vec();
            })?;
            let (lr, eps) = (self.lr, self.eps);
            params.update(name, |p| {
                for ((p, m), v) in p.data_mut().iter_mut().zip(&mv).zip(&vv) {
                    let mhat = m.to_f64_lossy() / c1;
                    let vhat = v.to_f64_lossy() / c2;
                    *p = T::of(p.to_f64_lossy() - lr * mhat / (vhat.sqrt() + eps));
                }
            })?;
        }
        Ok(())
    }

    /// Hyperparameters and the step count are stored in f64, the moments
    /// at the training precision.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut buf = checkpoint::header();
        checkpoint::append(&mut buf, STEP_KEY, &Tensor::new(vec![1], vec![self.step as f64])?)?;
        checkpoint::append(&mut buf, HYPER_KEY, &Tensor::new(vec![4], vec![self.lr, self.beta1, self.beta2, self.eps])?)?;
        for (n, t) in self.m.iter() {
            checkpoint::append(&mut buf, &format!("m.{n}"), &**t)?;
        }
        for (n, t) in self.v.iter() {
            checkpoint::append(&mut buf, &format!("v.{n}"), &**t)?;
        }
        write_atomic(path, &buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let set = ParamSet::<f64>::load(path)?;
        let get = |k: &str| set.get(k).ok_or_else(|| ModelError::Missing(k.into()));
        let step = get(STEP_KEY)?.data()[0];
        let h = get(HYPER_KEY)?.data().to_vec();
        if h.len() != 4 {
            return Err(ModelError::Missing(HYPER_KEY.into()));
        }
        let mut opt = Self { lr: h[0], beta1: h[1], beta2: h[2], eps: h[3], step: step as usize, m: ParamSet::new(), v: ParamSet::new() };
        for (n, t) in set.iter() {
            if let Some(rest) = n.strip_prefix("m.") {
                opt.m.insert(rest, t.cast());
            } else if let Some(rest) = n.strip_prefix("v.") {
                opt.v.insert(rest, t.cast());
            }
        }
        Ok(opt)
    }
}

/// One training example as tensors.
#[derive(Clone, Debug)]
pub struct TrainItem<T> {
    /// `[1, 2, k, k]` target offsets.
    pub x0: Tensor<T>,
    /// `[1, 1, H, W]` image in `[0, 1]`.
    pub image: Tensor<T>,
    /// `[1, 1, k, k]` density in expected points per stratum.
    pub density: Tensor<T>,
}

impl<T: Scalar> TrainItem<T> {
    pub fn from_dataset(item: &DatasetItem) -> Self {
        Self {
            x0: item.grid.to_tensor(),
            image: model::image_tensor(&item.condition),
            density: model::density_tensor(&item.condition),
        }
    }
}

/// Records the weighted per-item loss `weight * mean((eps_hat - eps)^2)`.
/// `control` selects the controlled denoiser.
pub fn item_loss<T: Scalar>(
    b: &mut Binder<'_, T>,
    g: &mut Graph<T>,
    item: &TrainItem<T>,
    x_t: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    weight: f64,
    control: Option<Variant>,
) -> Result<NodeId, ModelError> {
    let x = g.constant(x_t.clone());
    let cond = match control {
        Some(v) => {
            let features = if v.features {
                let img = g.constant(item.image.clone());
                Some(feature_map(b, g, img)?)
            } else {
                None
            };
            let density = g.constant(item.density.clone());
            Some((ConditionNodes { features, density }, v))
        }
        None => None,
    };
    let out = denoise_graph(b, g, x, t, cond.as_ref().map(|(c, v)| (c, *v)))?;
    let target = g.constant(eps.clone());
    let diff = g.sub(out, target)?;
    let sq = g.mul(diff, diff)?;
    let s = g.sum(sq);
    Ok(g.scale(s, T::of(weight / eps.numel() as f64)))
}

/// Noise and timestep for one batch slot.
struct Draw<T> {
    index: usize,
    t: usize,
    eps: Tensor<T>,
}

fn draw_batch<T: Scalar>(cfg: &TrainConfig, step: usize, len: usize, shape_of: impl Fn(usize) -> Vec<usize>) -> Vec<Draw<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step as u64);
    (0..cfg.batch)
        .map(|_| {
            let index = rng.random_range(0..len);
            let t = rng.random_range(1..=cfg.t_trunc);
            let shape = shape_of(index);
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    T::of(v)
                })
                .collect();
            Draw { index, t, eps: Tensor::new(shape, data).expect("shape matches data") }
        })
        .collect()
}

/// Log line written after each step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub wall_time: f64,
}

type Grads<T> = Vec<(String, Tensor<T>)>;

/// Batch loss and summed gradients. Items are evaluated in parallel and
/// reduced in batch order.
fn batch_step<T: Scalar>(
    sets: &[(&ParamSet<T>, bool)],
    data: &[TrainItem<T>],
    draws: &[Draw<T>],
    schedule: &NoiseSchedule,
    gamma: f64,
    control: Option<Variant>,
) -> Result<(f64, Grads<T>), TrainError> {
    let scale = 1.0 / draws.len() as f64;
    let per_item: Vec<Result<(f64, Grads<T>), TrainError>> = draws
        .par_iter()
        .map(|d| {
            let item = &data[d.index];
            let x_t = forward_noise(schedule, &item.x0, d.t, &d.eps)?;
            let w = min_snr_weight(schedule.snr(d.t), gamma) * scale;
            let mut g = Graph::new();
            let mut b = Binder::new(sets.to_vec());
            let loss = item_loss(&mut b, &mut g, item, &x_t, d.t, &d.eps, w, control)?;
            let grads = g.backward(loss)?;
            Ok((g.value(loss).item().to_f64_lossy(), b.gradients(&grads)))
        })
        .collect();
    let mut total = 0.0;
    let mut acc: Grads<T> = Vec::new();
    for r in per_item {
        let (l, grads) = r?;
        total += l;
        for (name, gr) in grads {
            match acc.iter_mut().find(|(n, _)| *n == name) {
                Some((_, a)) => a.add_assign(&gr),
                None => acc.push((name, gr)),
            }
        }
    }
    acc.sort_by(|a, b| a.0.cmp(&b.0));
    Ok((total, acc))
}

fn run<T: Scalar>(
    frozen: Option<&ParamSet<T>>,
    params: &mut ParamSet<T>,
    opt: &mut Adam<T>,
    data: &[TrainItem<T>],
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    control: Option<Variant>,
    on_step: &mut dyn FnMut(&StepLog, &ParamSet<T>, &Adam<T>) -> Result<(), TrainError>,
) -> Result<(), TrainError> {
    cfg.validate(schedule)?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    opt.lr = cfg.lr;
    let start = Instant::now();
    while opt.step < cfg.steps {
        let step = opt.step;
        let draws = draw_batch::<T>(cfg, step, data.len(), |i| data[i].x0.shape().to_vec());
        let (loss, grads) = {
            let mut sets = Vec::new();
            if let Some(f) = frozen {
                sets.push((f, false));
            }
            sets.push((&*params, true));
            batch_step(&sets, data, &draws, schedule, cfg.gamma, control)?
        };
        if !loss.is_finite() {
            return Err(TrainError::NonFinite(step));
        }
        opt.update(params, &grads)?;
        on_step(&StepLog { step: opt.step, loss, wall_time: start.elapsed().as_secs_f64() }, params, opt)?;
    }
    Ok(())
}

/// Trains the unconditional U-Net. Continues from `opt.step` up to
/// `cfg.steps`.
pub fn train_base<T: Scalar>(
    params: &mut ParamSet<T>,
    opt: &mut Adam<T>,
    data: &[TrainItem<T>],
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    on_step: &mut dyn FnMut(&StepLog, &ParamSet<T>, &Adam<T>) -> Result<(), TrainError>,
) -> Result<(), TrainError> {
    run(None, params, opt, data, cfg, schedule, None, on_step)
}

/// Trains the control branch, feature extractor and condition encoder
/// against a frozen base.
pub fn train_control<T: Scalar>(
    base: &ParamSet<T>,
    control: &mut ParamSet<T>,
    opt: &mut Adam<T>,
    data: &[TrainItem<T>],
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    on_step: &mut dyn FnMut(&StepLog, &ParamSet<T>, &Adam<T>) -> Result<(), TrainError>,
) -> Result<(), TrainError> {
    base.check_layout(&model::base_layout())?;
    let variant = stored_variant(control)?;
    run(Some(base), control, opt, data, cfg, schedule, Some(variant), on_step)
}

/// Mean weighted loss of one fixed batch, without updating anything.
pub fn evaluate_loss<T: Scalar>(
    sets: &[(&ParamSet<T>, bool)],
    data: &[TrainItem<T>],
    cfg: &TrainConfig,
    step: usize,
    schedule: &NoiseSchedule,
    control: Option<Variant>,
) -> Result<f64, TrainError> {
    let draws = draw_batch::<T>(cfg, step, data.len(), |i| data[i].x0.shape().to_vec());
    let frozen: Vec<(&ParamSet<T>, bool)> = sets.iter().map(|(s, _)| (*s, false)).collect();
    let mut total = 0.0;
    for d in &draws {
        let item = &data[d.index];
        let x_t = forward_noise(schedule, &item.x0, d.t, &d.eps)?;
        let w = min_snr_weight(schedule.snr(d.t), cfg.gamma) / draws.len() as f64;
        let mut g = Graph::new();
        let mut b = Binder::new(frozen.clone());
        let loss = item_loss(&mut b, &mut g, item, &x_t, d.t, &d.eps, w, control)?;
        total += g.value(loss).item().to_f64_lossy();
    }
    Ok(total)
}
