mod common;

use common::gradcheck::primitive_gradient_errors;
use common::{random_tensor, rng};
use rand::Rng;
use stipple::tensor::{Conv2dSpec, Graph, Tensor, TensorError};

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], s: usize, d: usize, p: usize) -> Tensor<f64> {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (o, _, kh, kw) = w.dims4().unwrap();
    let ho = (h + 2 * p - d * (kh - 1) - 1) / s + 1;
    let wo = (wd + 2 * p - d * (kw - 1) - 1) / s + 1;
    let mut out = Tensor::zeros([n, o, ho, wo]);
    for bn in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[oc];
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * s + ky * d) as isize - p as isize;
                                let ix = (ox * s + kx * d) as isize - p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at4(bn, ic, iy as usize, ix as usize) * w.at4(oc, ic, ky, kx);
                                }
                            }
                        }
                    }
                    out.data_mut()[((bn * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

fn conv_once(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, spec: Conv2dSpec) -> Tensor<f64> {
    let mut g = Graph::new();
    let (xi, wi, bi) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv2d(xi, wi, Some(bi), spec).unwrap();
    g.value(y).clone()
}

#[test]
fn conv_all_ones_sums_to_nine() {
    let x = Tensor::full([1, 1, 3, 3], 1.0);
    let w = Tensor::full([1, 1, 3, 3], 1.0);
    let y = conv_once(&x, &w, &Tensor::zeros([1]), Conv2dSpec::default());
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.item(), 9.0);
}

#[test]
fn conv_identity_kernel_is_identity() {
    let mut r = rng(1);
    let x = random_tensor(&mut r, &[2, 3, 5, 4], 2.0);
    let w = Tensor::from_fn([3, 3, 1, 1], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let y = conv_once(&x, &w, &Tensor::zeros([3]), Conv2dSpec::default());
    assert_eq!(y, x);
}

#[test]
fn conv_matches_naive_oracle() {
    let mut r = rng(2);
    let x = random_tensor(&mut r, &[2, 3, 8, 8], 1.0);
    let w = random_tensor(&mut r, &[4, 3, 3, 3], 1.0);
    let b = random_tensor(&mut r, &[4], 1.0);
    for (s, d, p) in [(1, 2, 0), (1, 2, 2), (2, 1, 1), (1, 1, 1), (2, 2, 3), (3, 1, 0)] {
        let got = conv_once(&x, &w, &b, Conv2dSpec { stride: s, dilation: d, padding: p });
        let want = naive_conv(&x, &w, b.data(), s, d, p);
        assert_eq!(got.shape(), want.shape(), "s={s} d={d} p={p}");
        assert!(got.max_abs_diff(&want) < 1e-6, "s={s} d={d} p={p}");
    }
    // Output extent formula floor((H + 2p - d(k-1) - 1)/s) + 1.
    let y = conv_once(&x, &w, &b, Conv2dSpec { stride: 2, dilation: 2, padding: 1 });
    assert_eq!(y.shape(), &[2, 4, 3, 3]);
}

#[test]
fn conv_shape_errors_are_descriptive() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros([1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros([3, 5, 3, 3]));
    let err = g.conv2d(x, w, None, Conv2dSpec::default()).unwrap_err();
    assert!(err.to_string().contains("2 channels"), "{err}");
    let w2 = g.constant(Tensor::zeros([3, 2, 3, 3]));
    let err = g.conv2d(x, w2, None, Conv2dSpec { stride: 1, dilation: 4, padding: 0 }).unwrap_err();
    assert!(matches!(err, TensorError::Shape { op: "conv2d", .. }));
}

#[test]
fn silu_values() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new([3], vec![0.0, 30.0, 1.0]).unwrap());
    let y = g.silu(x);
    let v = g.value(y).data();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 30.0).abs() < 1e-9);
    assert!((v[2] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
}

#[test]
fn bilinear_sample_hits_pixel_centres_and_midpoints() {
    let map = Tensor::<f64>::from_fn([1, 2, 4, 4], |i| (i * 7 % 11) as f64);
    let mut g = Graph::new();
    let m = g.constant(map.clone());
    // centre of pixel (x=1, y=2) and midpoint between (x=1,y=2) and (x=2,y=2)
    let pts = [[1.5 / 4.0, 2.5 / 4.0], [2.0 / 4.0, 2.5 / 4.0]];
    let s = g.bilinear_sample(m, &pts, (1, 2)).unwrap();
    let v = g.value(s);
    for c in 0..2 {
        let a = map.at4(0, c, 2, 1);
        let b = map.at4(0, c, 2, 2);
        assert!((v.at4(0, c, 0, 0) - a).abs() < 1e-12);
        assert!((v.at4(0, c, 0, 1) - 0.5 * (a + b)).abs() < 1e-12);
    }
}

fn scratch_bilinear(map: &Tensor<f64>, c: usize, x: f64, y: f64) -> f64 {
    let (_, _, h, w) = map.dims4().unwrap();
    let u = (x * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
    let v = (y * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    let p = |yy: usize, xx: usize| map.at4(0, c, yy, xx);
    p(y0, x0) * (1.0 - fx) * (1.0 - fy) + p(y0, x1) * fx * (1.0 - fy) + p(y1, x0) * (1.0 - fx) * fy + p(y1, x1) * fx * fy
}

#[test]
fn bilinear_sample_matches_four_corner_oracle_with_clamping() {
    let mut r = rng(3);
    let map = random_tensor(&mut r, &[1, 3, 9, 7], 1.0);
    let pts: Vec<[f64; 2]> = (0..100).map(|_| [r.random_range(-0.2..1.2), r.random_range(-0.2..1.2)]).collect();
    let mut g = Graph::new();
    let m = g.constant(map.clone());
    let s = g.bilinear_sample(m, &pts, (10, 10)).unwrap();
    let v = g.value(s);
    for (i, p) in pts.iter().enumerate() {
        for c in 0..3 {
            let want = scratch_bilinear(&map, c, p[0], p[1]);
            assert!((v.data()[c * 100 + i] - want).abs() < 1e-6);
        }
    }
}

#[test]
fn backward_simple_cases() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::full([4], 3.0), true);
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);

    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::scalar(3.0), true);
    let sq = g.mul(x, x).unwrap();
    let l = g.sum(sq);
    assert_eq!(g.backward(l).unwrap().get(x).unwrap().item(), 6.0);
}

#[test]
fn backward_rejects_detached_and_non_scalar() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full([3], 1.0));
    let s = g.sum(x);
    assert_eq!(g.backward(s).unwrap_err(), TensorError::Detached);
    let y = g.leaf(Tensor::full([3], 1.0), true);
    assert!(matches!(g.backward(y), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn backward_is_bitwise_deterministic() {
    let mut r = rng(4);
    let x = random_tensor(&mut r, &[1, 3, 6, 6], 1.0).cast::<f32>();
    let w = random_tensor(&mut r, &[5, 3, 3, 3], 1.0).cast::<f32>();
    let run = || {
        let mut g = Graph::<f32>::new();
        let xi = g.leaf(x.clone(), true);
        let wi = g.leaf(w.clone(), true);
        let y = g.conv2d(xi, wi, None, Conv2dSpec::same(3, 2)).unwrap();
        let a = g.silu(y);
        let l = g.sum(a);
        let grads = g.backward(l).unwrap();
        (grads.get(xi).unwrap().clone(), grads.get(wi).unwrap().clone())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert!(a1.data().iter().zip(a2.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(b1.data().iter().zip(b2.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn finite_differences_every_primitive() {
    for (name, e32, e64) in primitive_gradient_errors() {
        assert!(e32 < 1e-3, "{name}: f32 rel err {e32:e}");
        assert!(e64 < 1e-6, "{name}: f64 rel err {e64:e}");
    }
}
