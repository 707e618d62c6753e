#![allow(dead_code)]

pub mod gradcheck;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stipple::tensor::{Graph, NodeId, Tensor};
use stipple::Scalar;

/// A scalar-generic graph builder, so the same expression can be evaluated
/// in f32 (checked precision) and f64 (finite-difference oracle).
pub trait GraphFn {
    fn build<T: Scalar>(&self, g: &mut Graph<T>, inputs: &[NodeId]) -> NodeId;
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

fn projected_loss<T: Scalar, F: GraphFn>(f: &F, inputs: &[Tensor<f64>], probe: &Tensor<f64>, grad: bool) -> (Graph<T>, Vec<NodeId>, NodeId) {
    let mut g = Graph::<T>::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.cast(), grad)).collect();
    let out = f.build(&mut g, &ids);
    let p = g.constant(probe.cast::<T>().reshape(g.value(out).shape().to_vec()).unwrap());
    let prod = g.mul(out, p).unwrap();
    let loss = g.sum(prod);
    (g, ids, loss)
}

/// Relative error `|a - b| / max(|a|, |b|)` in the Euclidean norm, per input,
/// between analytic gradients in `T` and central differences evaluated in f64.
pub fn grad_rel_errors<T: Scalar, F: GraphFn>(f: &F, inputs: &[Tensor<f64>], seed: u64) -> Vec<f64> {
    let mut r = rng(seed ^ 0xA5A5);
    // Probe vector turns any output into a scalar loss with a generic gradient.
    let probe_shape = {
        let mut g = Graph::<f64>::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f.build(&mut g, &ids);
        g.value(out).shape().to_vec()
    };
    let probe = random_tensor(&mut r, &probe_shape, 1.0);

    let (g, ids, loss) = projected_loss::<T, F>(f, inputs, &probe, true);
    let grads = g.backward(loss).expect("backward");

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let (g, _, loss) = projected_loss::<f64, F>(f, xs, &probe, false);
        g.value(loss).item()
    };

    let mut errs = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        let scale = input.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let h = 1e-3 * scale;
        let analytic: Vec<f64> = grads
            .get(ids[i])
            .map(|t| t.data().iter().map(|v| v.to_f64_lossy()).collect())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut xs = inputs.to_vec();
        let mut num = 0.0;
        let mut den_a = 0.0;
        let mut den_b = 0.0;
        for e in 0..input.numel() {
            let orig = xs[i].data()[e];
            xs[i].data_mut()[e] = orig + h;
            let lp = eval(&xs);
            xs[i].data_mut()[e] = orig - h;
            let lm = eval(&xs);
            xs[i].data_mut()[e] = orig;
            let fd = (lp - lm) / (2.0 * h);
            num += (analytic[e] - fd).powi(2);
            den_a += analytic[e].powi(2);
            den_b += fd.powi(2);
        }
        let den = den_a.max(den_b).sqrt();
        errs.push(if den < 1e-12 { num.sqrt() } else { num.sqrt() / den });
    }
    errs
}

/// Minimum assignment cost over every permutation, by Heap's algorithm.
pub fn brute_force(n: usize, cost: &[f64]) -> (f64, Vec<usize>) {
    let mut perm: Vec<usize> = (0..n).collect();
    let total = |p: &[usize]| p.iter().enumerate().map(|(r, &c)| cost[r * n + c]).sum::<f64>();
    let mut best = (total(&perm), perm.clone());
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let t = total(&perm);
            if t < best.0 {
                best = (t, perm.clone());
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}
