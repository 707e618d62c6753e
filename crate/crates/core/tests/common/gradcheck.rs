//! Finite-difference gradient checks shared by the unit-level tests and the
//! acceptance report.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use stipple::model::{self, init_base, init_control, Binder, ParamSet, Variant};
use stipple::stipplers::ConditionInputs;
use stipple::tensor::{Conv2dSpec, Graph, NodeId, Tensor};
use stipple::training::{item_loss, TrainItem};
use stipple::{transport, GrayImage, PointSet, Scalar};

use super::{grad_rel_errors, random_tensor, rng, GraphFn};

macro_rules! op_fn {
    ($name:ident, |$g:ident, $ins:ident| $body:expr) => {
        struct $name;
        impl GraphFn for $name {
            fn build<T: Scalar>(&self, $g: &mut Graph<T>, $ins: &[NodeId]) -> NodeId {
                $body
            }
        }
    };
}

op_fn!(ConvD2, |g, i| g.conv2d(i[0], i[1], Some(i[2]), Conv2dSpec::same(3, 2)).unwrap());
op_fn!(ConvS2, |g, i| g.conv2d(i[0], i[1], Some(i[2]), Conv2dSpec { stride: 2, dilation: 1, padding: 1 }).unwrap());
op_fn!(Conv1x1, |g, i| g.conv2d(i[0], i[1], Some(i[2]), Conv2dSpec::default()).unwrap());
op_fn!(Silu, |g, i| g.silu(i[0]));
op_fn!(Sigmoid, |g, i| g.sigmoid(i[0]));
op_fn!(Add, |g, i| g.add(i[0], i[1]).unwrap());
op_fn!(Sub, |g, i| g.sub(i[0], i[1]).unwrap());
op_fn!(Mul, |g, i| g.mul(i[0], i[1]).unwrap());
op_fn!(AddChannels, |g, i| g.add_channels(i[0], i[1]).unwrap());
op_fn!(Concat, |g, i| g.concat_channels(&[i[0], i[1]]).unwrap());
op_fn!(Down, |g, i| g.downsample2x(i[0]).unwrap());
op_fn!(Up, |g, i| {
    let (_, _, h, w) = g.value(i[0]).dims4().unwrap();
    g.upsample2x(i[0], (2 * h, 2 * w - 1)).unwrap()
});
op_fn!(Scale, |g, i| g.scale(i[0], T::of(-1.7)));
op_fn!(Bilinear, |g, i| {
    let pts: Vec<[T; 2]> = (0..12).map(|j| [T::of((j as f64 * 0.37) % 1.0), T::of((j as f64 * 0.61 + 0.05) % 1.0)]).collect();
    g.bilinear_sample(i[0], &pts, (3, 4)).unwrap()
});
op_fn!(Reshape, |g, i| g.reshape(i[0], &[1, 1, 6, 4]).unwrap());

/// Worst relative gradient error in f32 and f64 over 10 random configs.
fn check<F: GraphFn>(
    out: &mut Vec<(&'static str, f64, f64)>,
    name: &'static str,
    f: &F,
    make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
) {
    let (mut w32, mut w64) = (0.0f64, 0.0f64);
    for cfg in 0..10u64 {
        let mut r = rng(100 + cfg);
        let inputs = make(&mut r);
        w32 = grad_rel_errors::<f32, F>(f, &inputs, cfg).into_iter().fold(w32, f64::max);
        w64 = grad_rel_errors::<f64, F>(f, &inputs, cfg).into_iter().fold(w64, f64::max);
    }
    out.push((name, w32, w64));
}

/// `(primitive, worst f32 error, worst f64 error)` for every differentiable op.
pub fn primitive_gradient_errors() -> Vec<(&'static str, f64, f64)> {
    let mut out = Vec::new();
    check(&mut out, "conv d2", &ConvD2, |r| {
        let c = r.random_range(1..4);
        let o = r.random_range(1..4);
        vec![random_tensor(r, &[2, c, 6, 5], 1.0), random_tensor(r, &[o, c, 3, 3], 1.0), random_tensor(r, &[o], 1.0)]
    });
    check(&mut out, "conv s2", &ConvS2, |r| {
        let c = r.random_range(1..4);
        vec![random_tensor(r, &[1, c, 7, 6], 1.0), random_tensor(r, &[2, c, 3, 3], 1.0), random_tensor(r, &[2], 1.0)]
    });
    check(&mut out, "conv 1x1", &Conv1x1, |r| {
        vec![random_tensor(r, &[2, 3, 4, 4], 1.0), random_tensor(r, &[5, 3, 1, 1], 1.0), random_tensor(r, &[5], 1.0)]
    });
    let ew = |r: &mut ChaCha8Rng| vec![random_tensor(r, &[1, 2, 3, 4], 3.0), random_tensor(r, &[1, 2, 3, 4], 3.0)];
    check(&mut out, "silu", &Silu, ew);
    check(&mut out, "sigmoid", &Sigmoid, ew);
    check(&mut out, "add", &Add, ew);
    check(&mut out, "sub", &Sub, ew);
    check(&mut out, "mul", &Mul, ew);
    check(&mut out, "scale", &Scale, ew);
    check(&mut out, "add_channels", &AddChannels, |r| vec![random_tensor(r, &[2, 3, 3, 2], 1.0), random_tensor(r, &[2, 3, 1, 1], 1.0)]);
    check(&mut out, "concat", &Concat, |r| vec![random_tensor(r, &[2, 1, 3, 3], 1.0), random_tensor(r, &[2, 2, 3, 3], 1.0)]);
    check(&mut out, "downsample", &Down, |r| vec![random_tensor(r, &[1, 2, 5, 4], 1.0)]);
    check(&mut out, "upsample", &Up, |r| vec![random_tensor(r, &[1, 2, 3, 3], 1.0)]);
    check(&mut out, "bilinear", &Bilinear, |r| vec![random_tensor(r, &[1, 2, 5, 6], 1.0)]);
    check(&mut out, "reshape", &Reshape, |r| vec![random_tensor(r, &[2, 3, 4], 1.0)]);
    out
}

fn random_image(seed: u64, side: usize) -> GrayImage {
    let mut r = rng(seed);
    GrayImage::new(side, side, (0..side * side).map(|_| r.random_range(20..=255)).collect()).unwrap()
}

/// Randomizes every tensor of `set` whose name starts with `prefix`, so that
/// zero-initialized injections pass gradient upstream.
fn perturb<T: Scalar>(set: &mut ParamSet<T>, prefix: &str, scale: f64, seed: u64) {
    let mut r = rng(seed);
    let names: Vec<String> = set.iter().map(|(n, _)| n.to_owned()).filter(|n| n.starts_with(prefix)).collect();
    for n in names {
        set.update(&n, |t| {
            for v in t.data_mut() {
                *v += T::of(r.random_range(-scale..scale));
            }
        })
        .unwrap();
    }
}

fn small_item(seed: u64, k: usize) -> TrainItem<f64> {
    let mut r = rng(seed);
    let pts: Vec<[f64; 2]> = (0..k * k).map(|_| [r.random(), r.random()]).collect();
    let grid = transport::encode(&PointSet::new(pts)).unwrap();
    let cond = ConditionInputs::from_image(random_image(seed, 16), k).unwrap();
    TrainItem { x0: grid.to_tensor(), image: model::image_tensor(&cond), density: model::density_tensor(&cond) }
}

struct LossCase {
    base: ParamSet<f64>,
    control: ParamSet<f64>,
    item: TrainItem<f64>,
    x_t: Tensor<f64>,
    eps: Tensor<f64>,
    t: usize,
    variant: Variant,
}

impl LossCase {
    fn new(seed: u64, variant: Variant) -> Self {
        let base = init_base::<f64>(seed);
        let mut control = init_control(&base, variant, seed + 1).unwrap();
        perturb(&mut control, "control.inject", 0.5, seed + 2);
        let item = small_item(seed, 4);
        let mut r = rng(seed + 3);
        let eps = Tensor::from_fn([1, 2, 4, 4], |_| r.random_range(-1.0..1.0));
        let t = r.random_range(1..300);
        let x_t = stipple::diffusion::forward_noise(&Default::default(), &item.x0, t, &eps).unwrap();
        Self { base, control, item, x_t, eps, t, variant }
    }

    /// Loss in `T` with the chosen set trainable; returns the loss and the
    /// gradient by name.
    fn eval<T: Scalar>(&self, base: &ParamSet<T>, control: &ParamSet<T>, train_base: bool) -> (f64, Vec<(String, Tensor<T>)>) {
        let item = TrainItem { x0: self.item.x0.cast(), image: self.item.image.cast(), density: self.item.density.cast() };
        let mut g = Graph::<T>::new();
        let mut b = Binder::new(vec![(base, train_base), (control, !train_base)]);
        let loss = item_loss(&mut b, &mut g, &item, &self.x_t.cast(), self.t, &self.eps.cast(), 0.7, Some(self.variant)).unwrap();
        let grads = g.backward(loss).unwrap();
        (g.value(loss).item().to_f64_lossy(), b.gradients(&grads))
    }
}

/// Central-difference directional derivative of the f64 loss along `dir`
/// (restricted to `names`), against the analytic gradient in `T`.
fn directional_error<T: Scalar>(case: &LossCase, names: &[String], train_base: bool, seed: u64) -> f64 {
    let mut r = rng(seed);
    let dir: Vec<(String, Tensor<f64>)> = names
        .iter()
        .map(|n| {
            let src = if train_base { case.base.get(n) } else { case.control.get(n) }.unwrap();
            (n.clone(), Tensor::from_fn(src.shape().to_vec(), |_| r.random_range(-1.0..1.0)))
        })
        .collect();
    let (_, grads) = case.eval::<T>(&case.base.cast(), &case.control.cast(), train_base);
    let analytic: f64 = dir
        .iter()
        .map(|(n, d)| {
            grads.iter().find(|(gn, _)| gn == n).map_or(0.0, |(_, g)| {
                g.data().iter().zip(d.data()).map(|(a, b)| a.to_f64_lossy() * b).sum::<f64>()
            })
        })
        .sum();
    let (loss, _) = case.eval::<f64>(&case.base, &case.control, train_base);
    // keep the first-order change well above roundoff of the loss, and
    // cancel the h^2 error term by Richardson extrapolation
    let h = (1e-6 * loss.abs().max(1e-3) / analytic.abs().max(1e-300)).clamp(1e-6, 1e-3);
    let shifted = |step: f64| {
        let (mut base, mut control) = (case.base.clone(), case.control.clone());
        for (n, d) in &dir {
            let set = if train_base { &mut base } else { &mut control };
            set.update(n, |t| {
                for (v, dv) in t.data_mut().iter_mut().zip(d.data()) {
                    *v += step * dv;
                }
            })
            .unwrap();
        }
        case.eval::<f64>(&base, &control, train_base).0
    };
    let central = |h: f64| (shifted(h) - shifted(-h)) / (2.0 * h);
    let fd = (4.0 * central(h / 2.0) - central(h)) / 3.0;
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-12)
}

fn trainable_names(set: &ParamSet<f64>, variant: Variant) -> Vec<String> {
    set.iter()
        .map(|(n, _)| n.to_owned())
        .filter(|n| n != "control.variant")
        .filter(|n| variant.gating || !n.contains(".gate."))
        .filter(|n| variant.features || !n.starts_with("feat."))
        .collect()
}

pub struct LossGradientErrors {
    pub config: u64,
    pub variant: Variant,
    pub f64_control: f64,
    pub f32_control: f64,
    pub f64_base: f64,
}

/// Directional checks of the full denoising loss for 10 configs cycling
/// through the variants: control parameters in f64 and f32, and the base
/// parameters in f64.
pub fn loss_gradient_errors() -> Vec<LossGradientErrors> {
    (0..10u64)
        .map(|cfg| {
            let variant = [Variant::FULL, Variant::VANILLA, Variant::GATED, Variant::GECCO][cfg as usize % 4];
            let case = LossCase::new(40 + cfg, variant);
            let names = trainable_names(&case.control, variant);
            let base_names: Vec<String> = case.base.iter().map(|(n, _)| n.to_owned()).collect();
            LossGradientErrors {
                config: cfg,
                variant,
                f64_control: directional_error::<f64>(&case, &names, false, cfg),
                f32_control: directional_error::<f32>(&case, &names, false, cfg),
                f64_base: directional_error::<f64>(&case, &base_names, true, cfg),
            }
        })
        .collect()
}

/// f64 error of the loss gradient restricted to each control tensor alone.
pub fn per_tensor_control_errors() -> Vec<(String, f64)> {
    let case = LossCase::new(7, Variant::FULL);
    trainable_names(&case.control, Variant::FULL)
        .into_iter()
        .enumerate()
        .map(|(i, name)| {
            let e = directional_error::<f64>(&case, std::slice::from_ref(&name), false, 500 + i as u64);
            (name, e)
        })
        .collect()
}
