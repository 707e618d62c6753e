use std::sync::Arc;

use super::kernels::{self, BilinearTaps, ConvGeom};
use super::{shape_err, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    /// Stride 1 with the padding that preserves spatial size for an odd
    /// kernel of side `k`.
    pub fn same(k: usize, dilation: usize) -> Self {
        Self { stride: 1, dilation, padding: dilation * (k - 1) / 2 }
    }
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self { stride: 1, dilation: 1, padding: 0 }
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddChannels { x: NodeId, v: NodeId },
    Scale(NodeId, T),
    Sigmoid(NodeId),
    Silu(NodeId),
    Concat(Vec<NodeId>),
    AvgPool2(NodeId),
    Upsample(NodeId),
    Bilinear { map: NodeId, taps: Vec<BilinearTaps<T>> },
    Reshape(NodeId),
    Sum(NodeId),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-threaded recording of tensor operations.
///
/// Nodes are appended in evaluation order, so the record itself is a
/// topological order and backward walks it once in reverse.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        debug_assert!(value.is_finite() || !self.all_finite(&op), "non-finite output from finite inputs");
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn all_finite(&self, op: &Op<T>) -> bool {
        let inputs: Vec<NodeId> = match op {
            Op::Leaf => return false,
            Op::Conv2d { x, w, b, .. } => [Some(*x), Some(*w), *b].into_iter().flatten().collect(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddChannels { x, v } => vec![*x, *v],
            Op::Concat(ids) => ids.clone(),
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Silu(a)
            | Op::AvgPool2(a)
            | Op::Upsample(a)
            | Op::Reshape(a)
            | Op::Sum(a) => vec![*a],
            Op::Bilinear { map, .. } => vec![*map],
        };
        inputs.iter().all(|id| self.value(*id).is_finite())
    }

    fn grad_of(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value: Arc::new(value), op: Op::Leaf, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    /// Records a shared parameter without copying its storage.
    pub fn param(&mut self, value: &Arc<Tensor<T>>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value: Arc::clone(value), op: Op::Leaf, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Cross-correlation of an NCHW input with an OIkk weight.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, spec: Conv2dSpec) -> Result<NodeId, TensorError> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, ci, kh, kw) = self
            .value(w)
            .dims4()
            .map_err(|_| shape_err("conv2d", format!("weight must be OIkk, got {:?}", self.value(w).shape())))?;
        if ci != c {
            return Err(shape_err("conv2d", format!("input has {c} channels, weight expects {ci}")));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(shape_err("conv2d", format!("bias shape {:?}, expected [{o}]", self.value(b).shape())));
            }
        }
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(shape_err("conv2d", "stride and dilation must be positive"));
        }
        let ho = kernels::conv_out_len(h, kh, spec.stride, spec.dilation, spec.padding);
        let wo = kernels::conv_out_len(wd, kw, spec.stride, spec.dilation, spec.padding);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(shape_err(
                "conv2d",
                format!("{kh}x{kw} kernel with dilation {} does not fit {h}x{wd} input padded by {}", spec.dilation, spec.padding),
            ));
        };
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            stride: spec.stride,
            dilation: spec.dilation,
            padding: spec.padding,
            ho,
            wo,
        };
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let out = Tensor::new([n, o, ho, wo], data)?;
        let rg = self.grad_of(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, rg))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("operands differ: {:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor { shape: va.shape().to_vec(), data }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a per-channel vector `v` of shape `[N, C, 1, 1]` (or `[1, C, 1, 1]`)
    /// to every pixel of `x`.
    pub fn add_channels(&mut self, x: NodeId, v: NodeId) -> Result<NodeId, TensorError> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (vn, vc, vh, vw) = self.value(v).dims4()?;
        if vc != c || vh != 1 || vw != 1 || (vn != n && vn != 1) {
            return Err(shape_err("add_channels", format!("cannot broadcast {:?} over {:?}", self.value(v).shape(), self.value(x).shape())));
        }
        let plane = h * w;
        let mut out = self.value(x).clone();
        let vd = self.value(v).data();
        for b in 0..n {
            for ch in 0..c {
                let add = vd[(if vn == 1 { 0 } else { b }) * c + ch];
                for e in &mut out.data[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                    *e += add;
                }
            }
        }
        let rg = self.grad_of(&[x, v]);
        Ok(self.push(out, Op::AddChannels { x, v }, rg))
    }

    pub fn scale(&mut self, a: NodeId, k: T) -> NodeId {
        let out = self.value(a).map(|v| v * k);
        let rg = self.requires_grad(a);
        self.push(out, Op::Scale(a, k), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(sigmoid);
        let rg = self.requires_grad(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|v| v * sigmoid(v));
        let rg = self.requires_grad(a);
        self.push(out, Op::Silu(a), rg)
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_channels", "no inputs"));
        };
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(shape_err("concat_channels", format!("{:?} vs {:?}", self.value(p).shape(), self.value(first).shape())));
            }
            total_c += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for &p in parts {
                let v = self.value(p);
                let pc = v.shape()[1];
                data.extend_from_slice(&v.data()[b * pc * plane..(b + 1) * pc * plane]);
            }
        }
        let out = Tensor::new([n, total_c, h, w], data)?;
        let rg = self.grad_of(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// 2x2 average pooling (ceil output extent).
    pub fn downsample2x(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (n, c, h, w) = self.value(a).dims4()?;
        let (data, ho, wo) = kernels::avgpool2_forward(self.value(a).data(), n * c, h, w);
        let out = Tensor::new([n, c, ho, wo], data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(out, Op::AvgPool2(a), rg))
    }

    /// Nearest-neighbour upsampling to an explicit extent (normally twice the
    /// input, or the size of the matching skip connection).
    pub fn upsample2x(&mut self, a: NodeId, out_hw: (usize, usize)) -> Result<NodeId, TensorError> {
        let (n, c, h, w) = self.value(a).dims4()?;
        let (ho, wo) = out_hw;
        if ho == 0 || wo == 0 || ho > 2 * h || wo > 2 * w {
            return Err(shape_err("upsample2x", format!("cannot upsample {h}x{w} to {ho}x{wo}")));
        }
        let data = kernels::upsample_forward(self.value(a).data(), n * c, h, w, ho, wo);
        let out = Tensor::new([n, c, ho, wo], data)?;
        let rg = self.requires_grad(a);
        Ok(self.push(out, Op::Upsample(a), rg))
    }

    /// Samples a `[1, C, H, W]` map at continuous unit-square coordinates
    /// `(x, y)`; the result has shape `[1, C, out_hw.0, out_hw.1]` with the
    /// samples laid out row-major. Coordinates are constants of the graph.
    pub fn bilinear_sample(&mut self, map: NodeId, coords: &[[T; 2]], out_hw: (usize, usize)) -> Result<NodeId, TensorError> {
        let (n, c, h, w) = self.value(map).dims4()?;
        if n != 1 {
            return Err(shape_err("bilinear_sample", format!("map batch must be 1, got {n}")));
        }
        if out_hw.0 * out_hw.1 != coords.len() || coords.is_empty() {
            return Err(shape_err("bilinear_sample", format!("{} points do not fill {:?}", coords.len(), out_hw)));
        }
        let taps: Vec<BilinearTaps<T>> = coords.iter().map(|p| kernels::bilinear_taps(p[0], p[1], h, w)).collect();
        let np = coords.len();
        let src = self.value(map).data();
        let mut data = vec![T::zero(); c * np];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for (i, tap) in taps.iter().enumerate() {
                let mut acc = T::zero();
                for k in 0..4 {
                    acc += tap.wt[k] * plane[tap.idx[k]];
                }
                data[ch * np + i] = acc;
            }
        }
        let out = Tensor::new([1, c, out_hw.0, out_hw.1], data)?;
        let rg = self.requires_grad(map);
        Ok(self.push(out, Op::Bilinear { map, taps }, rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.requires_grad(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.requires_grad(a);
        self.push(out, Op::Sum(a), rg)
    }

    /// Reverse-mode sweep from a scalar loss. Returns gradients for every
    /// differentiable leaf the loss depends on.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, TensorError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.requires_grad(loss) {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaves = Vec::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => leaves.push((NodeId(i), Tensor { shape: node.value.shape().to_vec(), data: g })),
                Op::Conv2d { x, w, b, geom } => {
                    let xv = self.value(*x).data();
                    let wv = self.value(*w).data();
                    let mut dx = self.requires_grad(*x).then(|| take_or_zero(&mut grads, *x, xv.len()));
                    let mut dw = self.requires_grad(*w).then(|| take_or_zero(&mut grads, *w, wv.len()));
                    let mut db = b.filter(|b| self.requires_grad(*b)).map(|b| take_or_zero(&mut grads, b, geom.o));
                    kernels::conv2d_backward(xv, wv, &g, geom, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                    if let Some(dx) = dx {
                        grads[x.0] = Some(dx);
                    }
                    if let Some(dw) = dw {
                        grads[w.0] = Some(dw);
                    }
                    if let (Some(db), Some(b)) = (db, b) {
                        grads[b.0] = Some(db);
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, &g, |v, _| v);
                    self.accumulate(&mut grads, *b, &g, |v, _| v);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, &g, |v, _| v);
                    self.accumulate(&mut grads, *b, &g, |v, _| -v);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    self.accumulate(&mut grads, *a, &g, |v, i| v * vb[i]);
                    self.accumulate(&mut grads, *b, &g, |v, i| v * va[i]);
                }
                Op::AddChannels { x, v } => {
                    self.accumulate(&mut grads, *x, &g, |gv, _| gv);
                    if self.requires_grad(*v) {
                        let (n, c, h, w) = self.value(*x).dims4().expect("recorded NCHW");
                        let vn = self.value(*v).shape()[0];
                        let mut dv = take_or_zero(&mut grads, *v, vn * c);
                        for b in 0..n {
                            for ch in 0..c {
                                let s: T = g[(b * c + ch) * h * w..(b * c + ch + 1) * h * w].iter().copied().sum();
                                dv[(if vn == 1 { 0 } else { b }) * c + ch] += s;
                            }
                        }
                        grads[v.0] = Some(dv);
                    }
                }
                Op::Scale(a, k) => self.accumulate(&mut grads, *a, &g, |v, _| v * *k),
                Op::Sigmoid(a) => {
                    let out = node.value.data();
                    self.accumulate(&mut grads, *a, &g, |v, i| v * out[i] * (T::one() - out[i]));
                }
                Op::Silu(a) => {
                    let xa = self.value(*a).data();
                    self.accumulate(&mut grads, *a, &g, |v, i| {
                        let s = sigmoid(xa[i]);
                        v * s * (T::one() + xa[i] * (T::one() - s))
                    });
                }
                Op::Concat(parts) => {
                    let (n, total_c, h, w) = node.value.dims4().expect("recorded NCHW");
                    let plane = h * w;
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.value(p).shape()[1];
                        if self.requires_grad(p) {
                            let mut dp = take_or_zero(&mut grads, p, n * pc * plane);
                            for b in 0..n {
                                let src = &g[(b * total_c + offset) * plane..(b * total_c + offset + pc) * plane];
                                for (d, &s) in dp[b * pc * plane..(b + 1) * pc * plane].iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                            grads[p.0] = Some(dp);
                        }
                        offset += pc;
                    }
                }
                Op::AvgPool2(a) => {
                    if self.requires_grad(*a) {
                        let (n, c, h, w) = self.value(*a).dims4().expect("recorded NCHW");
                        let mut da = take_or_zero(&mut grads, *a, n * c * h * w);
                        kernels::avgpool2_backward(&g, n * c, h, w, &mut da);
                        grads[a.0] = Some(da);
                    }
                }
                Op::Upsample(a) => {
                    if self.requires_grad(*a) {
                        let (n, c, h, w) = self.value(*a).dims4().expect("recorded NCHW");
                        let (_, _, ho, wo) = node.value.dims4().expect("recorded NCHW");
                        let mut da = take_or_zero(&mut grads, *a, n * c * h * w);
                        kernels::upsample_backward(&g, n * c, h, w, ho, wo, &mut da);
                        grads[a.0] = Some(da);
                    }
                }
                Op::Bilinear { map, taps } => {
                    if self.requires_grad(*map) {
                        let (_, c, h, w) = self.value(*map).dims4().expect("recorded NCHW");
                        let np = taps.len();
                        let mut dm = take_or_zero(&mut grads, *map, c * h * w);
                        for ch in 0..c {
                            let plane = &mut dm[ch * h * w..(ch + 1) * h * w];
                            for (i, tap) in taps.iter().enumerate() {
                                let gv = g[ch * np + i];
                                for k in 0..4 {
                                    plane[tap.idx[k]] += tap.wt[k] * gv;
                                }
                            }
                        }
                        grads[map.0] = Some(dm);
                    }
                }
                Op::Reshape(a) => self.accumulate(&mut grads, *a, &g, |v, _| v),
                Op::Sum(a) => {
                    let gv = g[0];
                    self.accumulate(&mut grads, *a, &[], |_, _| gv);
                }
            }
        }
        leaves.reverse();
        Ok(Gradients { leaves })
    }

    /// `grads[id] += f(g[i], i)` elementwise, if `id` is differentiable.
    fn accumulate(&self, grads: &mut [Option<Vec<T>>], id: NodeId, g: &[T], f: impl Fn(T, usize) -> T) {
        if !self.requires_grad(id) {
            return;
        }
        let len = self.value(id).numel();
        let zero = T::zero();
        match &mut grads[id.0] {
            Some(acc) => {
                for (i, a) in acc.iter_mut().enumerate() {
                    *a += f(g.get(i).copied().unwrap_or(zero), i);
                }
            }
            slot @ None => {
                *slot = Some((0..len).map(|i| f(g.get(i).copied().unwrap_or(zero), i)).collect());
            }
        }
    }
}

fn take_or_zero<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, len: usize) -> Vec<T> {
    grads[id.0].take().unwrap_or_else(|| vec![T::zero(); len])
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Gradients of differentiable leaves, in recording order.
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: Vec<(NodeId, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.leaves
            .binary_search_by_key(&id, |(i, _)| *i)
            .ok()
            .map(|pos| &self.leaves[pos].1)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        let pos = self.leaves.binary_search_by_key(&id, |(i, _)| *i).ok()?;
        Some(std::mem::replace(&mut self.leaves[pos].1, Tensor { shape: vec![1], data: vec![T::zero()] }))
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}
