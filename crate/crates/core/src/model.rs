//! The conditioned denoiser: a U-Net over OT-grid offsets, and a control
//! branch that reads a 19-channel condition and injects into the U-Net's
//! skip connections and middle block through gated zero convolutions.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::density::{DensityError, DensityMap};
use crate::diffusion::{self, DiffusionError, NoisePredictor, NoiseSchedule, SamplerConfig};
use crate::points::PointSet;
use crate::scalar::Scalar;
use crate::stipplers::ConditionInputs;
use crate::tensor::{Conv2dSpec, Gradients, Graph, NodeId, Tensor, TensorError};
use crate::transport::{self, stratum_center, TransportError};

/// Encoder widths per level.
pub const WIDTHS: [usize; 3] = [32, 64, 128];
pub const BLOCKS_PER_LEVEL: usize = 2;
/// Sinusoidal timestep embedding size.
pub const TEMB_DIM: usize = 64;
/// Width of the embedding MLP and of its per-block projections' input.
pub const EMB_WIDTH: usize = 128;
/// Channels of the image features sampled at point positions.
pub const FEATURE_CHANNELS: usize = 16;
/// Image features, noisy offsets and density.
pub const CONDITION_CHANNELS: usize = FEATURE_CHANNELS + 2 + 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("parameter {0:?} is missing")]
    Missing(String),
    #[error("input shape {0:?}: expected [1, 2, k, k]")]
    Input(Vec<usize>),
    #[error("condition is for a {cond}x{cond} grid but the input is {k}x{k}")]
    ConditionSize { cond: usize, k: usize },
    #[error("checkpoint variant {stored} does not match requested {requested}")]
    Variant { stored: String, requested: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Sampling(#[from] DiffusionError),
}

/// Which control-branch mechanisms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Variant {
    /// Sigmoid-gated injections; plain zero convolutions otherwise.
    pub gating: bool,
    /// Image features sampled at point positions; zero-filled otherwise.
    pub features: bool,
}

impl Variant {
    pub const VANILLA: Self = Self { gating: false, features: false };
    pub const GECCO: Self = Self { gating: false, features: true };
    pub const GATED: Self = Self { gating: true, features: false };
    pub const FULL: Self = Self { gating: true, features: true };

    pub fn name(&self) -> &'static str {
        match (self.gating, self.features) {
            (false, false) => "vanilla",
            (false, true) => "gecco",
            (true, false) => "gated",
            (true, true) => "full",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [Self::VANILLA, Self::GECCO, Self::GATED, Self::FULL].into_iter().find(|v| v.name() == name)
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    entries: Vec<(String, Arc<Tensor<T>>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = Arc::new(t),
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, Arc::new(t)));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Tensor<T>>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Tensor<T>>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Applies `f` to the tensor called `name`, copying it if shared.
    pub fn update(&mut self, name: &str, f: impl FnOnce(&mut Tensor<T>)) -> Result<(), ModelError> {
        let &i = self.index.get(name).ok_or_else(|| ModelError::Missing(name.to_owned()))?;
        f(Arc::make_mut(&mut self.entries[i].1));
        Ok(())
    }

    /// Bitwise equality of names, shapes and values.
    pub fn identical(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_f64_lossy().to_bits() == y.to_f64_lossy().to_bits())
            })
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (n, t) in self.iter() {
            out.insert(n, t.cast());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut buf = Vec::new();
        checkpoint::write(&mut buf, self.entries.iter().map(|(n, t)| (n.as_str(), &**t)))?;
        crate::stipplers::write_atomic(path, &buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut out = Self::new();
        for (n, t) in checkpoint::read(fs::File::open(path)?)? {
            out.insert(n, t);
        }
        Ok(out)
    }

    /// Checks that every tensor of `layout` is present with its shape.
    pub fn check_layout(&self, layout: &[(String, Vec<usize>)]) -> Result<(), ModelError> {
        for (name, shape) in layout {
            let t = self.get(name).ok_or_else(|| ModelError::Missing(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(CheckpointError::Shape { name: name.clone(), expected: shape.clone(), got: t.shape().to_vec() }.into());
            }
        }
        Ok(())
    }
}

type Layout = Vec<(String, Vec<usize>)>;

fn conv_layout(out: &mut Layout, name: &str, cout: usize, cin: usize, ks: usize) {
    out.push((format!("{name}.w"), vec![cout, cin, ks, ks]));
    out.push((format!("{name}.b"), vec![cout]));
}

fn res_layout(out: &mut Layout, name: &str, cin: usize, cout: usize) {
    conv_layout(out, &format!("{name}.conv1"), cout, cin, 3);
    conv_layout(out, &format!("{name}.emb"), cout, EMB_WIDTH, 1);
    conv_layout(out, &format!("{name}.conv2"), cout, cout, 3);
    if cin != cout {
        conv_layout(out, &format!("{name}.skip"), cout, cin, 1);
    }
}

/// Encoder blocks shared in structure by the U-Net and the control branch.
fn encoder_layout(out: &mut Layout, prefix: &str) {
    conv_layout(out, &format!("{prefix}.conv_in"), WIDTHS[0], 2, 3);
    let mut cin = WIDTHS[0];
    for (l, &w) in WIDTHS.iter().enumerate() {
        for r in 0..BLOCKS_PER_LEVEL {
            res_layout(out, &format!("{prefix}.down{l}.res{r}"), cin, w);
            cin = w;
        }
    }
    res_layout(out, &format!("{prefix}.mid.res0"), WIDTHS[2], WIDTHS[2]);
}

pub fn base_layout() -> Layout {
    let mut out = Vec::new();
    conv_layout(&mut out, "base.temb.fc1", EMB_WIDTH, TEMB_DIM, 1);
    conv_layout(&mut out, "base.temb.fc2", EMB_WIDTH, EMB_WIDTH, 1);
    encoder_layout(&mut out, "base");
    let mut cin = WIDTHS[2];
    for l in (0..WIDTHS.len()).rev() {
        res_layout(&mut out, &format!("base.up{l}.res0"), cin + WIDTHS[l], WIDTHS[l]);
        for r in 1..BLOCKS_PER_LEVEL {
            res_layout(&mut out, &format!("base.up{l}.res{r}"), WIDTHS[l], WIDTHS[l]);
        }
        cin = WIDTHS[l];
    }
    conv_layout(&mut out, "base.out", 2, WIDTHS[0], 3);
    out
}

/// Injection points: one per skip level, then the middle block.
fn injection_widths() -> [usize; 4] {
    [WIDTHS[0], WIDTHS[1], WIDTHS[2], WIDTHS[2]]
}

pub fn control_layout() -> Layout {
    let mut out = Vec::new();
    conv_layout(&mut out, "feat.conv1", 8, 1, 3);
    conv_layout(&mut out, "feat.conv2", 16, 8, 3);
    conv_layout(&mut out, "feat.conv3", FEATURE_CHANNELS, 16, 3);
    conv_layout(&mut out, "cond.conv1", 32, CONDITION_CHANNELS, 3);
    conv_layout(&mut out, "cond.conv2", 64, 32, 3);
    conv_layout(&mut out, "cond.conv3", 128, 64, 3);
    conv_layout(&mut out, "control.hint", WIDTHS[0], 128, 1);
    encoder_layout(&mut out, "control");
    for (i, w) in injection_widths().into_iter().enumerate() {
        conv_layout(&mut out, &format!("control.inject{i}.value"), w, w, 1);
        conv_layout(&mut out, &format!("control.inject{i}.gate"), w, w, 1);
    }
    out
}

/// Uniform `±1/sqrt(fan_in)` initialization for every tensor of `layout`.
fn init_params<T: Scalar>(layout: &Layout, seed: u64) -> ParamSet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fan_in = 1;
    let mut set = ParamSet::new();
    for (name, shape) in layout {
        if name.ends_with(".w") {
            fan_in = shape[1..].iter().product::<usize>();
        }
        let bound = 1.0 / (fan_in as f64).sqrt();
        set.insert(name.clone(), Tensor::from_fn(shape.clone(), |_| T::of(rng.random_range(-bound..bound))));
    }
    set
}

pub fn init_base<T: Scalar>(seed: u64) -> ParamSet<T> {
    init_params(&base_layout(), seed)
}

const VARIANT_KEY: &str = "control.variant";

/// A fresh control branch: encoder copied from `base`, injections zero
/// (value and gate weights zero, biases zero).
pub fn init_control<T: Scalar>(base: &ParamSet<T>, variant: Variant, seed: u64) -> Result<ParamSet<T>, ModelError> {
    let mut set = init_params(&control_layout(), seed);
    let mut enc = Vec::new();
    encoder_layout(&mut enc, "base");
    for (name, _) in enc {
        let t = base.get(&name).ok_or_else(|| ModelError::Missing(name.clone()))?;
        set.insert(name.replacen("base.", "control.", 1), (**t).clone());
    }
    for (i, w) in injection_widths().into_iter().enumerate() {
        for part in ["value", "gate"] {
            set.insert(format!("control.inject{i}.{part}.w"), Tensor::zeros(vec![w, w, 1, 1]));
            set.insert(format!("control.inject{i}.{part}.b"), Tensor::zeros(vec![w]));
        }
    }
    set.insert(VARIANT_KEY, Tensor::new(vec![2], vec![T::of(variant.gating as u8 as f64), T::of(variant.features as u8 as f64)])?);
    Ok(set)
}

/// The variant a control checkpoint was built for.
pub fn stored_variant<T: Scalar>(control: &ParamSet<T>) -> Result<Variant, ModelError> {
    let t = control.get(VARIANT_KEY).ok_or_else(|| ModelError::Missing(VARIANT_KEY.into()))?;
    Ok(Variant { gating: t.data()[0] != T::zero(), features: t.data()[1] != T::zero() })
}

/// Registers parameters on a graph on first use.
pub struct Binder<'a, T> {
    sets: Vec<(&'a ParamSet<T>, bool)>,
    bound: HashMap<String, NodeId>,
}

impl<'a, T: Scalar> Binder<'a, T> {
    /// `sets` pairs each parameter set with whether it receives gradients.
    pub fn new(sets: Vec<(&'a ParamSet<T>, bool)>) -> Self {
        Self { sets, bound: HashMap::new() }
    }

    pub fn param(&mut self, g: &mut Graph<T>, name: &str) -> Result<NodeId, ModelError> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        for (set, trainable) in &self.sets {
            if let Some(t) = set.get(name) {
                let id = g.param(t, *trainable);
                self.bound.insert(name.to_owned(), id);
                return Ok(id);
            }
        }
        Err(ModelError::Missing(name.to_owned()))
    }

    /// Gradients of the bound trainable parameters, by name.
    pub fn gradients(&self, grads: &Gradients<T>) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> =
            self.bound.iter().filter_map(|(n, &id)| grads.get(id).map(|t| (n.clone(), t.clone()))).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

fn conv<T: Scalar>(
    b: &mut Binder<'_, T>,
    g: &mut Graph<T>,
    x: NodeId,
    name: &str,
    spec: Conv2dSpec,
) -> Result<NodeId, ModelError> {
    let w = b.param(g, &format!("{name}.w"))?;
    let bias = b.param(g, &format!("{name}.b"))?;
    Ok(g.conv2d(x, w, Some(bias), spec)?)
}

fn conv3<T: Scalar>(b: &mut Binder<'_, T>, g: &mut Graph<T>, x: NodeId, name: &str) -> Result<NodeId, ModelError> {
    conv(b, g, x, name, Conv2dSpec::same(3, 1))
}

fn conv1<T: Scalar>(b: &mut Binder<'_, T>, g: &mut Graph<T>, x: NodeId, name: &str) -> Result<NodeId, ModelError> {
    conv(b, g, x, name, Conv2dSpec::default())
}

fn resblock<T: Scalar>(
    b: &mut Binder<'_, T>,
    g: &mut Graph<T>,
    x: NodeId,
    emb: NodeId,
    name: &str,
) -> Result<NodeId, ModelError> {
    let h = g.silu(x);
    let h = conv3(b, g, h, &format!("{name}.conv1"))?;
    let e = conv1(b, g, emb, &format!("{name}.emb"))?;
    let h = g.add_channels(h, e)?;
    let h = g.silu(h);
    let h = conv3(b, g, h, &format!("{name}.conv2"))?;
    let skip_w = format!("{name}.skip.w");
    let has_skip = b.sets.iter().any(|(s, _)| s.get(&skip_w).is_some());
    let skip = if has_skip { conv1(b, g, x, &format!("{name}.skip"))? } else { x };
    Ok(g.add(skip, h)?)
}

/// `[sin(t w_i), cos(t w_i)]` with `w_i = 10000^(-i / (d/2))`, as `[1, d, 1, 1]`.
pub fn timestep_embedding<T: Scalar>(t: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn([1, dim, 1, 1], |i| {
        let j = i % half;
        let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
        let a = t as f64 * freq;
        T::of(if i < half { a.sin() } else { a.cos() })
    })
}

/// SiLU of the embedding MLP output, shared by every residual block.
fn embed<T: Scalar>(b: &mut Binder<'_, T>, g: &mut Graph<T>, t: usize) -> Result<NodeId, ModelError> {
    let s = g.constant(timestep_embedding(t, TEMB_DIM));
    let h = conv1(b, g, s, "base.temb.fc1")?;
    let h = g.silu(h);
    let h = conv1(b, g, h, "base.temb.fc2")?;
    Ok(g.silu(h))
}

/// Encoder pass; returns the per-level outputs and the middle block output.
fn encode<T: Scalar>(
    b: &mut Binder<'_, T>,
    g: &mut Graph<T>,
    h: NodeId,
    emb: NodeId,
    prefix: &str,
) -> Result<([NodeId; 3], NodeId), ModelError> {
    let mut h = h;
    let mut levels = [h; 3];
    for (l, level) in levels.iter_mut().enumerate() {
        if l > 0 {
            h = g.downsample2x(h)?;
        }
        for r in 0..BLOCKS_PER_LEVEL {
            h = resblock(b, g, h, emb, &format!("{prefix}.down{l}.res{r}"))?;
        }
        *level = h;
    }
    let mid = resblock(b, g, h, emb, &format!("{prefix}.mid.res0"))?;
    Ok((levels, mid))
}

/// Graph nodes describing the condition of one denoiser call.
#[derive(Clone, Copy, Debug)]
pub struct ConditionNodes {
    /// `[1, 16, H, W]` image feature map, or `None` to zero-fill.
    pub features: Option<NodeId>,
    /// `[1, 1, k, k]` density in expected points per stratum.
    pub density: NodeId,
}

/// Point positions implied by noisy offsets (cell units), clamped to the
/// unit square, in stratum order.
pub fn positions_from_offsets<T: Scalar>(x_t: &Tensor<T>) -> Result<Vec<[T; 2]>, ModelError> {
    let (n, c, h, w) = x_t.dims4()?;
    if n != 1 || c != 2 || h != w {
        return Err(ModelError::Input(x_t.shape().to_vec()));
    }
    let k = h;
    let kk = k * k;
    let d = x_t.data();
    Ok((0..kk)
        .map(|s| {
            let c = stratum_center(k, s);
            let px = (c[0] + d[s].to_f64_lossy() / k as f64).clamp(0.0, 1.0);
            let py = (c[1] + d[kk + s].to_f64_lossy() / k as f64).clamp(0.0, 1.0);
            [T::of(px), T::of(py)]
        })
        .collect())
}

/// Feature extractor over a `[1, 1, H, W]` image in `[0, 1]`.
pub fn feature_map<T: Scalar>(b: &mut Binder<'_, T>, g: &mut Graph<T>, image: NodeId) -> Result<NodeId, ModelError> {
    let h = conv3(b, g, image, "feat.conv1")?;
    let h = g.silu(h);
    let h = conv3(b, g, h, "feat.conv2")?;
    let h = g.silu(h);
    conv3(b, g, h, "feat.conv3")
}

/// `[image features (16) | noisy offsets (2) | density (1)]` at `k x k`.
pub fn build_condition<T: Scalar>(
    g: &mut Graph<T>,
    x_t: NodeId,
    cond: &ConditionNodes,
) -> Result<NodeId, ModelError> {
    let k = g.value(x_t).shape()[2];
    let dk = g.value(cond.density).shape()[2];
    if dk != k {
        return Err(ModelError::ConditionSize { cond: dk, k });
    }
    let feats = match cond.features {
        Some(map) => {
            let coords = positions_from_offsets(g.value(x_t))?;
            g.bilinear_sample(map, &coords, (k, k))?
        }
        None => g.constant(Tensor::zeros(vec![1, FEATURE_CHANNELS, k, k])),
    };
    Ok(g.concat_channels(&[feats, x_t, cond.density])?)
}

/// Dilated encoder `19 -> 32 (d1) -> 64 (d2) -> 128 (d4)`, size preserving.
pub fn condition_encode<T: Scalar>(b: &mut Binder<'_, T>, g: &mut Graph<T>, c: NodeId) -> Result<NodeId, ModelError> {
    let mut h = c;
    for (i, d) in [1, 2, 4].into_iter().enumerate() {
        h = conv(b, g, h, &format!("cond.conv{}", i + 1), Conv2dSpec::same(3, d))?;
        h = g.silu(h);
    }
    Ok(h)
}

fn inject<T: Scalar>(
    b: &mut Binder<'_, T>,
    g: &mut Graph<T>,
    x: NodeId,
    name: &str,
    gating: bool,
) -> Result<NodeId, ModelError> {
    let value = conv1(b, g, x, &format!("{name}.value"))?;
    if !gating {
        return Ok(value);
    }
    let gate = conv1(b, g, x, &format!("{name}.gate"))?;
    let gate = g.sigmoid(gate);
    Ok(g.mul(gate, value)?)
}

/// Records the denoiser on `g` and returns the predicted noise node. With
/// `control = None` this is the plain U-Net.
pub fn denoise_graph<T: Scalar>(
    b: &mut Binder<'_, T>,
    g: &mut Graph<T>,
    x_t: NodeId,
    t: usize,
    control: Option<(&ConditionNodes, Variant)>,
) -> Result<NodeId, ModelError> {
    let (n, c, h, w) = g.value(x_t).dims4()?;
    if n != 1 || c != 2 || h != w {
        return Err(ModelError::Input(g.value(x_t).shape().to_vec()));
    }
    let emb = embed(b, g, t)?;
    let h0 = conv3(b, g, x_t, "base.conv_in")?;
    let (mut skips, mut mid) = encode(b, g, h0, emb, "base")?;

    if let Some((cond, variant)) = control {
        let cnodes = ConditionNodes { features: if variant.features { cond.features } else { None }, density: cond.density };
        let c = build_condition(g, x_t, &cnodes)?;
        let hint = condition_encode(b, g, c)?;
        let hint = conv1(b, g, hint, "control.hint")?;
        let ch = conv3(b, g, x_t, "control.conv_in")?;
        let ch = g.add(ch, hint)?;
        let (clevels, cmid) = encode(b, g, ch, emb, "control")?;
        for (l, skip) in skips.iter_mut().enumerate() {
            let inj = inject(b, g, clevels[l], &format!("control.inject{l}"), variant.gating)?;
            *skip = g.add(*skip, inj)?;
        }
        let inj = inject(b, g, cmid, "control.inject3", variant.gating)?;
        mid = g.add(mid, inj)?;
    }

    let sizes: Vec<(usize, usize)> = skips.iter().map(|&s| (g.value(s).shape()[2], g.value(s).shape()[3])).collect();
    let mut h = mid;
    for l in (0..WIDTHS.len()).rev() {
        if l < WIDTHS.len() - 1 {
            h = g.upsample2x(h, sizes[l])?;
        }
        h = g.concat_channels(&[h, skips[l]])?;
        for r in 0..BLOCKS_PER_LEVEL {
            h = resblock(b, g, h, emb, &format!("base.up{l}.res{r}"))?;
        }
    }
    let h = g.silu(h);
    conv3(b, g, h, "base.out")
}

/// A condition prepared for repeated denoiser calls: the image feature map
/// is computed once.
#[derive(Clone, Debug)]
pub struct PreparedCondition<T> {
    pub features: Option<Tensor<T>>,
    pub density: Tensor<T>,
}

impl<T: Scalar> PreparedCondition<T> {
    pub fn k(&self) -> usize {
        self.density.shape()[2]
    }
}

/// `[1, 1, H, W]` image tensor with values `g / 255`.
pub fn image_tensor<T: Scalar>(c: &ConditionInputs) -> Tensor<T> {
    let img = &c.image;
    Tensor::from_fn([1, 1, img.height, img.width], |i| T::of(img.pixels[i] as f64 / 255.0))
}

pub fn density_tensor<T: Scalar>(c: &ConditionInputs) -> Tensor<T> {
    Tensor::from_fn([1, 1, c.k, c.k], |i| T::of(c.density[i]))
}

/// Base U-Net plus an optional control branch.
#[derive(Clone, Debug)]
pub struct Denoiser<T> {
    pub base: ParamSet<T>,
    pub control: Option<ParamSet<T>>,
    pub variant: Variant,
}

impl<T: Scalar> Denoiser<T> {
    pub fn unconditional(base: ParamSet<T>) -> Self {
        Self { base, control: None, variant: Variant::FULL }
    }

    pub fn controlled(base: ParamSet<T>, control: ParamSet<T>) -> Result<Self, ModelError> {
        let variant = stored_variant(&control)?;
        Ok(Self { base, control: Some(control), variant })
    }

    /// Loads checkpoints and checks their layouts; the control variant must
    /// match `variant` when given.
    pub fn load(base: &Path, control: Option<&Path>, variant: Option<Variant>) -> Result<Self, ModelError> {
        let b = ParamSet::load(base)?;
        b.check_layout(&base_layout())?;
        let Some(cpath) = control else {
            return Ok(Self::unconditional(b));
        };
        let c = ParamSet::load(cpath)?;
        c.check_layout(&control_layout())?;
        let d = Self::controlled(b, c)?;
        if let Some(v) = variant {
            if v != d.variant {
                return Err(ModelError::Variant { stored: d.variant.name().into(), requested: v.name().into() });
            }
        }
        Ok(d)
    }

    fn binder(&self) -> Binder<'_, T> {
        let mut sets = vec![(&self.base, false)];
        if let Some(c) = &self.control {
            sets.push((c, false));
        }
        Binder::new(sets)
    }

    pub fn prepare(&self, inputs: &ConditionInputs) -> Result<PreparedCondition<T>, ModelError> {
        let features = match (&self.control, self.variant.features) {
            (Some(_), true) => {
                let mut g = Graph::new();
                let mut b = self.binder();
                let img = g.constant(image_tensor(inputs));
                let map = feature_map(&mut b, &mut g, img)?;
                Some(g.value(map).clone())
            }
            _ => None,
        };
        Ok(PreparedCondition { features, density: density_tensor(inputs) })
    }

    /// Predicted noise for one `[1, 2, k, k]` input.
    pub fn denoise(&self, x_t: &Tensor<T>, t: usize, cond: Option<&PreparedCondition<T>>) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let mut b = self.binder();
        let x = g.constant(x_t.clone());
        let control = match (&self.control, cond) {
            (Some(_), Some(c)) => {
                let features = c.features.as_ref().map(|f| g.constant(f.clone()));
                let density = g.constant(c.density.clone());
                Some((ConditionNodes { features, density }, self.variant))
            }
            _ => None,
        };
        let out = denoise_graph(&mut b, &mut g, x, t, control.as_ref().map(|(c, v)| (c, *v)))?;
        Ok(g.value(out).clone())
    }

    /// The full stippling pipeline: a rejection-sampled prior with the same
    /// seed, conditioned sampling on the default schedule, then clamping to
    /// the unit square.
    pub fn stipple(&self, density: &DensityMap, n: usize, config: &SamplerConfig) -> Result<PointSet, ModelError> {
        let k = transport::grid_side(n)?;
        let cond = self.prepare(&ConditionInputs::from_density(density, k)?)?;
        let init = density.rejection_sample(n, config.seed)?;
        let points = diffusion::sample(self, &NoiseSchedule::default(), &Some(cond), &init, config)?;
        Ok(points.clamped())
    }
}

impl<T: Scalar> NoisePredictor<T> for Denoiser<T> {
    type Condition = Option<PreparedCondition<T>>;

    fn predict(&self, x_t: &Tensor<T>, t: usize, cond: &Self::Condition) -> Result<Tensor<T>, DiffusionError> {
        self.denoise(x_t, t, cond.as_ref()).map_err(|e| DiffusionError::Denoiser(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layouts_have_unique_names() {
        for layout in [base_layout(), control_layout()] {
            let mut names: Vec<_> = layout.iter().map(|(n, _)| n.clone()).collect();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), layout.len());
        }
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in [Variant::VANILLA, Variant::GECCO, Variant::GATED, Variant::FULL] {
            assert_eq!(Variant::from_name(v.name()), Some(v));
        }
    }

    #[test]
    fn unet_preserves_grid_shape() {
        let base = init_base::<f32>(1);
        let d = Denoiser::unconditional(base);
        for k in [4, 6, 16] {
            let x = Tensor::<f32>::from_fn([1, 2, k, k], |i| (i as f32 * 0.37).sin());
            let y = d.denoise(&x, 10, None).unwrap();
            assert_eq!(y.shape(), &[1, 2, k, k]);
            assert!(y.is_finite());
        }
    }

    #[test]
    fn embedding_values() {
        let e = timestep_embedding::<f64>(0, 8);
        assert_eq!(e.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let e = timestep_embedding::<f64>(3, 8);
        assert!((e.data()[0] - 3f64.sin()).abs() < 1e-15);
        assert!((e.data()[5] - (3.0 * 0.1f64).cos()).abs() < 1e-15);
    }
}
