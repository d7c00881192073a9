use std::hash::{Hash, Hasher};

use super::kernels::{self, Window};
use super::{dim_err, Scalar, Tensor4, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization statistics mode for [`Graph::batchnorm`].
#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a, T> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the supplied running statistics.
    Eval { running_mean: &'a [T], running_var: &'a [T] },
}

/// Per-channel batch statistics from a training-mode batchnorm, for the
/// caller to fold into running averages. `var` is the unbiased estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    /// Output of an op whose inputs need no gradient; no saved context.
    Detached,
    Conv2d { x: Var, w: Var, b: Option<Var>, win: Window },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, win: Window },
    MaxPool { x: Var, argmax: Vec<u32> },
    Upsample { x: Var },
    Prelu { x: Var, a: Var },
    Norm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, per_instance: bool, batch_stats: bool },
    Add { a: Var, b: Var },
    Concat { a: Var, b: Var },
    Sigmoid { x: Var },
    Mse { pred: Var, label: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only tape. Node order is a topological order, so backward is a
/// single reverse sweep.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    kink_hasher: Option<std::collections::hash_map::DefaultHasher>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), kink_hasher: None }
    }

    /// Also fingerprints every piecewise branch taken (maxpool argmax, PReLU
    /// sign). Two evaluations with equal fingerprints lie on the same smooth piece.
    pub fn with_kink_tracking() -> Self {
        Graph { kink_hasher: Some(Default::default()), ..Self::new() }
    }

    pub fn kink_fingerprint(&self) -> Option<u64> {
        self.kink_hasher.as_ref().map(|h| h.finish())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor4<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor4<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor4<T>, op: Op<T>, requires_grad: bool) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let op = if requires_grad { op } else { Op::Detached };
        Ok(self.push(value, op, requires_grad))
    }

    fn any_grad(&self, vars: &[Option<Var>]) -> bool {
        vars.iter().flatten().any(|v| self.nodes[v.0].requires_grad)
    }

    fn vector_len(&self, op: &'static str, v: Var, expect: usize, what: &str) -> Result<(), TensorError> {
        let len = self.nodes[v.0].value.len();
        if len != expect {
            return dim_err(op, format!("{what} has {len} elements, expected {expect}"));
        }
        Ok(())
    }

    /// Cross-correlation with zero padding. `weight`: `(co, ci, k, k)`, `bias`: `co` values.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let [n, ci, h, w] = self.value(x).dims;
        let [co, wci, kh, kw] = self.value(weight).dims;
        if wci != ci || kh != kw {
            return dim_err("conv2d", format!("input {:?} vs weight {:?}", self.value(x).dims, self.value(weight).dims));
        }
        if let Some(b) = bias {
            self.vector_len("conv2d", b, co, "bias")?;
        }
        let win = Window::new(ci, h, w, kh, stride, pad)
            .ok_or_else(|| TensorError::DimMismatch { op: "conv2d", msg: format!("{h}x{w} with k={kh}, s={stride}, p={pad}") })?;
        let out = kernels::conv2d_forward(
            &self.value(x).data,
            n,
            &win,
            &self.value(weight).data,
            co,
            bias.map(|b| self.value(b).data.as_slice()),
        );
        let value = Tensor4 { dims: [n, co, win.oh, win.ow], data: out };
        let rg = self.any_grad(&[Some(x), Some(weight), bias]);
        self.push_checked("conv2d", value, Op::Conv2d { x, w: weight, b: bias, win }, rg)
    }

    /// Transposed convolution with padding 0. `weight`: `(ci, co, k, k)`.
    /// Output spatial size is `(h - 1) * stride + k`.
    pub fn conv_transpose2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize) -> Result<Var, TensorError> {
        let [n, ci, h, w] = self.value(x).dims;
        let [wci, co, kh, kw] = self.value(weight).dims;
        if wci != ci || kh != kw || stride == 0 || h == 0 || w == 0 {
            return dim_err("conv_transpose2d", format!("input {:?} vs weight {:?}", self.value(x).dims, self.value(weight).dims));
        }
        if let Some(b) = bias {
            self.vector_len("conv_transpose2d", b, co, "bias")?;
        }
        let (oh, ow) = ((h - 1) * stride + kh, (w - 1) * stride + kw);
        let win = Window::new(co, oh, ow, kh, stride, 0).expect("transposed geometry is exact");
        debug_assert_eq!((win.oh, win.ow), (h, w));
        let out = kernels::conv_transpose2d_forward(
            &self.value(x).data,
            n,
            ci,
            &win,
            &self.value(weight).data,
            bias.map(|b| self.value(b).data.as_slice()),
        );
        let value = Tensor4 { dims: [n, co, oh, ow], data: out };
        let rg = self.any_grad(&[Some(x), Some(weight), bias]);
        self.push_checked("conv_transpose2d", value, Op::ConvTranspose2d { x, w: weight, b: bias, win }, rg)
    }

    /// Max pooling with `-inf` padding; ties resolve to the first element in
    /// row-major window order.
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.value(x).dims;
        if pad >= k {
            return dim_err("maxpool2d", format!("padding {pad} must be smaller than window {k}"));
        }
        let win = Window::new(c, h, w, k, stride, pad)
            .ok_or_else(|| TensorError::DimMismatch { op: "maxpool2d", msg: format!("{h}x{w} with k={k}, s={stride}, p={pad}") })?;
        let (out, argmax) = kernels::maxpool_forward(&self.value(x).data, n * c, &win);
        if let Some(hs) = self.kink_hasher.as_mut() {
            argmax.hash(hs);
        }
        let value = Tensor4 { dims: [n, c, win.oh, win.ow], data: out };
        let rg = self.requires_grad(x);
        self.push_checked("maxpool2d", value, Op::MaxPool { x, argmax }, rg)
    }

    /// Bilinear 2x upsampling, half-pixel centres, border clamp.
    pub fn upsample_bilinear2x(&mut self, x: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.value(x).dims;
        if h == 0 || w == 0 {
            return dim_err("upsample_bilinear2x", "empty spatial extent");
        }
        let out = kernels::upsample_forward(&self.value(x).data, n * c, h, w);
        let value = Tensor4 { dims: [n, c, 2 * h, 2 * w], data: out };
        let rg = self.requires_grad(x);
        self.push_checked("upsample_bilinear2x", value, Op::Upsample { x }, rg)
    }

    /// `y = x` for `x >= 0`, else `a[c] * x`, with one slope per channel.
    pub fn prelu(&mut self, x: Var, a: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.value(x).dims;
        self.vector_len("prelu", a, c, "slope")?;
        let plane = h * w;
        let slopes = &self.value(a).data;
        let xs = &self.value(x).data;
        let mut out = Vec::with_capacity(xs.len());
        for (inst, slab) in xs.chunks(plane.max(1)).enumerate() {
            let a = slopes[inst % c];
            out.extend(slab.iter().map(|&v| if v >= T::zero() { v } else { a * v }));
        }
        if self.kink_hasher.is_some() {
            let signs: Vec<u64> = xs
                .chunks(64)
                .map(|chunk| chunk.iter().enumerate().fold(0u64, |acc, (k, v)| acc | (((*v >= T::zero()) as u64) << k)))
                .collect();
            if let Some(hs) = self.kink_hasher.as_mut() {
                signs.hash(hs);
            }
        }
        let value = Tensor4 { dims: [n, c, h, w], data: out };
        let rg = self.any_grad(&[Some(x), Some(a)]);
        self.push_checked("prelu", value, Op::Prelu { x, a }, rg)
    }

    /// ReLU as PReLU with a fixed zero slope.
    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let c = self.value(x).c();
        let zero = self.constant(Tensor4::zeros([c, 1, 1, 1]));
        self.prelu(x, zero)
    }

    /// Batch normalization over `(N, H, W)` per channel.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        mode: NormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>), TensorError> {
        let [n, c, h, w] = self.value(x).dims;
        self.vector_len("batchnorm", gamma, c, "gamma")?;
        self.vector_len("batchnorm", beta, c, "beta")?;
        let plane = h * w;
        let xs = &self.value(x).data;
        let (mean, var, stats) = match mode {
            NormMode::Train => {
                let count = n * plane;
                if count == 0 {
                    return dim_err("batchnorm", "empty batch");
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let slabs = (0..n).map(|s| &xs[(s * c + ch) * plane..(s * c + ch + 1) * plane]);
                    let m = slabs.clone().flat_map(|sl| sl.iter().copied()).sum::<T>() / T::from_f64(count as f64);
                    let v = slabs.flat_map(|sl| sl.iter().map(move |&q| (q - m) * (q - m))).sum::<T>() / T::from_f64(count as f64);
                    mean[ch] = m;
                    var[ch] = v;
                }
                let unbiased = if count > 1 {
                    let f = T::from_f64(count as f64 / (count - 1) as f64);
                    var.iter().map(|&v| v * f).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats))
            }
            NormMode::Eval { running_mean, running_var } => {
                if running_mean.len() != c || running_var.len() != c {
                    return dim_err("batchnorm", "running statistics length differs from channel count");
                }
                (running_mean.to_vec(), running_var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for (inst, ((slab, xh), o)) in xs.chunks(plane.max(1)).zip(xhat.chunks_mut(plane.max(1))).zip(out.chunks_mut(plane.max(1))).enumerate() {
            let ch = inst % c;
            let (m, is, gc, bc) = (mean[ch], inv_std[ch], g[ch], b[ch]);
            for ((&v, xh), o) in slab.iter().zip(xh.iter_mut()).zip(o.iter_mut()) {
                *xh = (v - m) * is;
                *o = gc * *xh + bc;
            }
        }
        let value = Tensor4 { dims: [n, c, h, w], data: out };
        let rg = self.any_grad(&[Some(x), Some(gamma), Some(beta)]);
        let op = Op::Norm { x, gamma, beta, xhat, inv_std, per_instance: false, batch_stats: stats.is_some() };
        let v = self.push_checked("batchnorm", value, op, rg)?;
        Ok((v, stats))
    }

    /// Instance normalization over `(H, W)` per sample and channel, with a
    /// per-channel affine transform.
    pub fn instancenorm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.value(x).dims;
        self.vector_len("instancenorm", gamma, c, "gamma")?;
        self.vector_len("instancenorm", beta, c, "beta")?;
        let plane = h * w;
        if plane == 0 {
            return dim_err("instancenorm", "empty spatial extent");
        }
        let xs = &self.value(x).data;
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let cnt = T::from_f64(plane as f64);
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        let mut inv_std = vec![T::zero(); n * c];
        for (inst, slab) in xs.chunks(plane).enumerate() {
            let ch = inst % c;
            let m = slab.iter().copied().sum::<T>() / cnt;
            let v = slab.iter().map(|&q| (q - m) * (q - m)).sum::<T>() / cnt;
            let is = T::one() / (v + eps).sqrt();
            inv_std[inst] = is;
            let base = inst * plane;
            for (k, &q) in slab.iter().enumerate() {
                let xh = (q - m) * is;
                xhat[base + k] = xh;
                out[base + k] = g[ch] * xh + b[ch];
            }
        }
        let value = Tensor4 { dims: [n, c, h, w], data: out };
        let rg = self.any_grad(&[Some(x), Some(gamma), Some(beta)]);
        let op = Op::Norm { x, gamma, beta, xhat, inv_std, per_instance: true, batch_stats: true };
        self.push_checked("instancenorm", value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (da, db) = (self.value(a).dims, self.value(b).dims);
        if da != db {
            return dim_err("add", format!("{da:?} vs {db:?}"));
        }
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(&p, &q)| p + q).collect();
        let rg = self.any_grad(&[Some(a), Some(b)]);
        self.push_checked("add", Tensor4 { dims: da, data }, Op::Add { a, b }, rg)
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let [n, ca, h, w] = self.value(a).dims;
        let [nb, cb, hb, wb] = self.value(b).dims;
        if (n, h, w) != (nb, hb, wb) {
            return dim_err("concat_channels", format!("{:?} vs {:?}", self.value(a).dims, self.value(b).dims));
        }
        let (pa, pb) = (ca * h * w, cb * h * w);
        let mut data = Vec::with_capacity(n * (pa + pb));
        for s in 0..n {
            data.extend_from_slice(&self.value(a).data[s * pa..(s + 1) * pa]);
            data.extend_from_slice(&self.value(b).data[s * pb..(s + 1) * pb]);
        }
        let rg = self.any_grad(&[Some(a), Some(b)]);
        self.push_checked("concat_channels", Tensor4 { dims: [n, ca + cb, h, w], data }, Op::Concat { a, b }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        let data = self
            .value(x)
            .data
            .iter()
            .map(|&v| {
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            })
            .collect();
        let dims = self.value(x).dims;
        let rg = self.requires_grad(x);
        self.push_checked("sigmoid", Tensor4 { dims, data }, Op::Sigmoid { x }, rg)
    }

    /// Mean squared error over all elements; output dims `(1, 1, 1, 1)`.
    pub fn mse_loss(&mut self, pred: Var, label: Var) -> Result<Var, TensorError> {
        let (dp, dl) = (self.value(pred).dims, self.value(label).dims);
        if dp != dl {
            return dim_err("mse_loss", format!("{dp:?} vs {dl:?}"));
        }
        let p = &self.value(pred).data;
        let l = &self.value(label).data;
        if p.is_empty() {
            return dim_err("mse_loss", "empty input");
        }
        let sum: T = p.iter().zip(l).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let loss = sum / T::from_f64(p.len() as f64);
        let rg = self.any_grad(&[Some(pred), Some(label)]);
        self.push_checked("mse_loss", Tensor4::vector(vec![loss]), Op::Mse { pred, label }, rg)
    }

    fn accumulate(&mut self, v: Var, delta: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reverse sweep from a single-element `loss`, summing gradients over
    /// fan-out. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let dims = self.value(loss).dims;
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(dims));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = self.grads[idx].take() else { continue };
            let deltas = self.local_grads(idx, &gy)?;
            self.grads[idx] = Some(gy);
            for (v, d) in deltas {
                self.accumulate(v, d);
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `idx` to its inputs.
    fn local_grads(&self, idx: usize, gy: &[T]) -> Result<Vec<(Var, Vec<T>)>, TensorError> {
        let node = &self.nodes[idx];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf | Op::Detached => {}
            Op::Conv2d { x, w, b, win } => {
                let [n, ..] = self.value(*x).dims;
                let co = self.value(*w).dims[0];
                let (dx, dw, db) =
                    kernels::conv2d_backward(&self.value(*x).data, n, win, &self.value(*w).data, co, gy, rg(*x), rg(*w));
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dw.map(|d| (*w, d)));
                if let Some(b) = b.filter(|b| rg(*b)) {
                    out.push((b, db));
                }
            }
            Op::ConvTranspose2d { x, w, b, win } => {
                let [n, ci, ..] = self.value(*x).dims;
                let (dx, dw, db) =
                    kernels::conv_transpose2d_backward(&self.value(*x).data, n, ci, win, &self.value(*w).data, gy, rg(*x), rg(*w));
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dw.map(|d| (*w, d)));
                if let Some(b) = b.filter(|b| rg(*b)) {
                    out.push((b, db));
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&src, &g) in argmax.iter().zip(gy) {
                    dx[src as usize] += g;
                }
                out.push((*x, dx));
            }
            Op::Upsample { x } => {
                let [n, c, h, w] = self.value(*x).dims;
                out.push((*x, kernels::upsample_backward(gy, n * c, h, w)));
            }
            Op::Prelu { x, a } => {
                let [_, c, h, w] = self.value(*x).dims;
                let plane = h * w;
                let xs = &self.value(*x).data;
                let slopes = &self.value(*a).data;
                if rg(*x) {
                    let mut dx = Vec::with_capacity(xs.len());
                    for (inst, (slab, gs)) in xs.chunks(plane.max(1)).zip(gy.chunks(plane.max(1))).enumerate() {
                        let a = slopes[inst % c];
                        dx.extend(slab.iter().zip(gs).map(|(&v, &g)| if v >= T::zero() { g } else { a * g }));
                    }
                    out.push((*x, dx));
                }
                if rg(*a) {
                    let mut da = vec![T::zero(); c];
                    for (inst, (slab, gs)) in xs.chunks(plane.max(1)).zip(gy.chunks(plane.max(1))).enumerate() {
                        da[inst % c] += slab.iter().zip(gs).filter(|(&v, _)| v < T::zero()).map(|(&v, &g)| v * g).sum::<T>();
                    }
                    out.push((*a, da));
                }
            }
            Op::Norm { x, gamma, beta, xhat, inv_std, per_instance, batch_stats } => {
                let [n, c, h, w] = self.value(*x).dims;
                let plane = (h * w).max(1);
                let g = &self.value(*gamma).data;
                let group_of = |inst: usize| if *per_instance { inst } else { inst % c };
                let groups = if *per_instance { n * c } else { c };
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut s1 = vec![T::zero(); groups];
                let mut s2 = vec![T::zero(); groups];
                for (inst, (gs, xh)) in gy.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                    let ch = inst % c;
                    let sb = gs.iter().copied().sum::<T>();
                    let sg = gs.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
                    dbeta[ch] += sb;
                    dgamma[ch] += sg;
                    s1[group_of(inst)] += sb * g[ch];
                    s2[group_of(inst)] += sg * g[ch];
                }
                if rg(*x) {
                    let mut dx = vec![T::zero(); gy.len()];
                    let m = T::from_f64(if *per_instance { plane } else { n * plane } as f64);
                    for (inst, ((d, gs), xh)) in dx.chunks_mut(plane).zip(gy.chunks(plane)).zip(xhat.chunks(plane)).enumerate() {
                        let (ch, grp) = (inst % c, group_of(inst));
                        let gc = g[ch];
                        if !batch_stats {
                            let f = gc * inv_std[ch];
                            d.iter_mut().zip(gs).for_each(|(d, &gv)| *d = gv * f);
                        } else {
                            // dx = inv_std/M * (M*dxh - sum(dxh) - xhat * sum(dxh * xhat)) per group
                            let (is, a, b) = (inv_std[grp] / m, s1[grp], s2[grp]);
                            for ((d, &gv), &xv) in d.iter_mut().zip(gs).zip(xh) {
                                *d = is * (m * gv * gc - a - xv * b);
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                if rg(*gamma) {
                    out.push((*gamma, dgamma));
                }
                if rg(*beta) {
                    out.push((*beta, dbeta));
                }
            }
            Op::Add { a, b } => {
                out.push((*a, gy.to_vec()));
                out.push((*b, gy.to_vec()));
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = self.value(*a).dims;
                let cb = self.value(*b).c();
                let (pa, pb) = (ca * h * w, cb * h * w);
                let mut ga = Vec::with_capacity(n * pa);
                let mut gb = Vec::with_capacity(n * pb);
                for s in 0..n {
                    let base = s * (pa + pb);
                    ga.extend_from_slice(&gy[base..base + pa]);
                    gb.extend_from_slice(&gy[base + pa..base + pa + pb]);
                }
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Sigmoid { x } => {
                let y = &node.value.data;
                let dx = y.iter().zip(gy).map(|(&s, &g)| g * s * (T::one() - s)).collect();
                out.push((*x, dx));
            }
            Op::Mse { pred, label } => {
                let p = &self.value(*pred).data;
                let l = &self.value(*label).data;
                let scale = T::from_f64(2.0) * gy[0] / T::from_f64(p.len() as f64);
                let dp: Vec<T> = p.iter().zip(l).map(|(&a, &b)| scale * (a - b)).collect();
                if rg(*label) {
                    out.push((*label, dp.iter().map(|&v| -v).collect()));
                }
                out.push((*pred, dp));
            }
        }
        for (_, d) in &out {
            if d.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: [usize; 4], data: &[f64]) -> Tensor4<f64> {
        Tensor4::new(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let w = g.constant(Tensor4::full([1, 1, 2, 2], 1.0));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data, vec![10.0]);

        let id = g.constant(Tensor4::full([1, 1, 1, 1], 1.0));
        let zero = g.constant(Tensor4::vector(vec![0.0]));
        let y = g.conv2d(x, id, Some(zero), 1, 0).unwrap();
        assert_eq!(g.value(y).data, g.value(x).data);

        let zw = g.constant(Tensor4::zeros([1, 1, 3, 3]));
        let b = g.constant(Tensor4::vector(vec![0.7]));
        let y = g.conv2d(x, zw, Some(b), 1, 1).unwrap();
        assert!(g.value(y).data.iter().all(|&v| v == 0.7));
        assert!(matches!(g.conv2d(x, zw, None, 2, 0), Err(TensorError::DimMismatch { .. })));
    }

    #[test]
    fn maxpool_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.maxpool2d(x, 2, 2, 0).unwrap();
        assert_eq!(g.value(y).data, vec![4.0]);
        let c = g.constant(Tensor4::full([1, 2, 5, 5], 3.0));
        let y = g.maxpool2d(c, 3, 1, 1).unwrap();
        assert_eq!(g.value(y).dims, [1, 2, 5, 5]);
        assert!(g.value(y).data.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn maxpool_ties_route_to_first() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor4::full([1, 1, 2, 2], 1.0), true);
        let y = g.maxpool2d(x, 2, 2, 0).unwrap();
        let target = g.constant(Tensor4::zeros([1, 1, 1, 1]));
        let loss = g.mse_loss(y, target).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn prelu_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t([1, 1, 1, 3], &[-1.0, 0.0, 2.0]));
        let a = g.constant(Tensor4::vector(vec![0.25]));
        let y = g.prelu(x, a).unwrap();
        assert_eq!(g.value(y).data, vec![-0.25, 0.0, 2.0]);
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data, vec![0.0, 0.0, 2.0]);
        let pos = g.constant(t([1, 1, 1, 2], &[0.5, 3.0]));
        let y = g.prelu(pos, a).unwrap();
        assert_eq!(g.value(y).data, vec![0.5, 3.0]);
    }

    #[test]
    fn prelu_slope_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t([1, 1, 1, 3], &[-1.0, -2.0, 2.0]));
        let a = g.leaf(Tensor4::vector(vec![0.25]), true);
        let y = g.prelu(x, a).unwrap();
        let zero = g.constant(Tensor4::zeros([1, 1, 1, 3]));
        let loss = g.mse_loss(y, zero).unwrap();
        g.backward(loss).unwrap();
        // d/da mean((a x_neg)^2 + 4) = 2 a (1 + 4) / 3
        let expect = 2.0 * 0.25 * 5.0 / 3.0;
        assert!((g.grad(a).unwrap()[0] - expect).abs() < 1e-15);
    }

    fn channel_moments(v: &Tensor4<f64>, ch: usize) -> (f64, f64) {
        let [n, _, h, w] = v.dims;
        let vals: Vec<f64> = (0..n).flat_map(|s| (0..h * w).map(move |k| (s, k))).map(|(s, k)| v.at(s, ch, k / w, k % w)).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        (m, var)
    }

    #[test]
    fn batchnorm_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor4::from_fn([3, 2, 4, 4], |k| ((k * 7919) % 101) as f64 * 0.3 - 4.0));
        let one = g.constant(Tensor4::full([2, 1, 1, 1], 1.0));
        let zero = g.constant(Tensor4::zeros([2, 1, 1, 1]));
        let (y, stats) = g.batchnorm(x, one, zero, 1e-5, NormMode::Train).unwrap();
        for ch in 0..2 {
            let (m, v) = channel_moments(g.value(y), ch);
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-5, "{m} {v}");
        }
        let stats = stats.unwrap();
        assert_eq!(stats.mean.len(), 2);

        let (y2, _) = g.batchnorm(y, one, zero, 0.0, NormMode::Train).unwrap();
        let diff = g.value(y2).data.iter().zip(&g.value(y).data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-5, "{diff}");

        let gz = g.constant(Tensor4::zeros([2, 1, 1, 1]));
        let beta = g.constant(Tensor4::vector(vec![0.5, -2.0]));
        let (y, _) = g.batchnorm(x, gz, beta, 1e-5, NormMode::Train).unwrap();
        let v = g.value(y);
        assert!((0..v.len()).all(|k| v.data[k] == if (k / 16) % 2 == 0 { 0.5 } else { -2.0 }));

        let rm = [1.0, 2.0];
        let rv = [4.0, 9.0];
        let (y, stats) = g.batchnorm(x, one, zero, 0.0, NormMode::Eval { running_mean: &rm, running_var: &rv }).unwrap();
        assert!(stats.is_none());
        assert!((g.value(y).data[0] - (g.value(x).data[0] - 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn instancenorm_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor4::from_fn([2, 3, 4, 4], |k| ((k * 31) % 17) as f64 + (k / 16) as f64));
        let one = g.constant(Tensor4::full([3, 1, 1, 1], 1.0));
        let zero = g.constant(Tensor4::zeros([3, 1, 1, 1]));
        let y = g.instancenorm(x, one, zero, 1e-5).unwrap();
        for inst in g.value(y).data.chunks(16) {
            let m = inst.iter().sum::<f64>() / 16.0;
            let v = inst.iter().map(|q| (q - m).powi(2)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-4);
        }
        let beta = g.constant(Tensor4::vector(vec![1.0, 2.0, 3.0]));
        let gz = g.constant(Tensor4::zeros([3, 1, 1, 1]));
        let y = g.instancenorm(x, gz, beta, 1e-5).unwrap();
        assert!(g.value(y).data.iter().enumerate().all(|(k, &v)| v == ((k / 16) % 3 + 1) as f64));
        let std = g.constant(Tensor4::from_fn([1, 3, 4, 4], |k| if k % 2 == 0 { 1.0 } else { -1.0 }));
        let y = g.instancenorm(std, one, zero, 0.0).unwrap();
        assert_eq!(g.value(y).data, g.value(std).data);
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t([1, 2, 1, 2], &[1.0, -2.0, 3.0, 0.5]));
        let z = g.constant(Tensor4::zeros([1, 2, 1, 2]));
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y).data, g.value(x).data);
        let y = g.concat_channels(x, z).unwrap();
        assert_eq!(g.value(y).dims, [1, 4, 1, 2]);
        let s = g.sigmoid(z).unwrap();
        assert!(g.value(s).data.iter().all(|&v| v == 0.5));
        let big = g.constant(t([1, 1, 1, 2], &[-800.0, 800.0]));
        let s = g.sigmoid(big).unwrap();
        assert_eq!(g.value(s).data, vec![0.0, 1.0]);
    }

    #[test]
    fn mse_examples() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(t([1, 1, 1, 2], &[0.0, 1.0]));
        let l = g.constant(t([1, 1, 1, 2], &[1.0, 1.0]));
        let loss = g.mse_loss(p, l).unwrap();
        assert_eq!(g.value(loss).data, vec![0.5]);
        let loss = g.mse_loss(l, l).unwrap();
        assert_eq!(g.value(loss).data, vec![0.0]);
        let l1 = g.constant(t([1, 1, 1, 2], &[2.0, 2.0]));
        let loss = g.mse_loss(l1, l).unwrap();
        assert_eq!(g.value(loss).data, vec![1.0]);
    }

    #[test]
    fn fan_out_gradients_sum() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t([1, 1, 1, 1], &[3.0]), true);
        let y = g.add(x, x).unwrap();
        let y = g.add(y, x).unwrap();
        let zero = g.constant(Tensor4::zeros([1, 1, 1, 1]));
        let loss = g.mse_loss(y, zero).unwrap();
        g.backward(loss).unwrap();
        // loss = (3x)^2 -> 18x
        assert_eq!(g.grad(x).unwrap(), &[54.0]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t([1, 1, 1, 1], &[f64::MAX]));
        let y = g.add(x, x);
        assert_eq!(y, Err(TensorError::NonFinite { op: "add" }));
        let loss = g.constant(Tensor4::zeros([1, 1, 1, 2]));
        assert!(matches!(g.backward(loss), Err(TensorError::NotScalar(_))));
    }
}
