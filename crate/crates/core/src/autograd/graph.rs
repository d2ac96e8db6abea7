//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every leaf that was registered with `requires_grad = true`. Gradients of
//! frozen leaves are never materialized, but they still pass gradients
//! through to their inputs.

use crate::autograd::conv::{self, ConvGeom, ConvTransposeGeom};
use crate::autograd::resize;
use crate::error::{Error, Result};
use crate::tensor::{cast, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvTransposeGeom,
    },
    InstanceNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        normed: Vec<T>,
        inv_std: Vec<T>,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Upsample2x {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Softmax {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    /// Elementwise product with a constant (ReLU and dropout masks).
    Mask {
        x: Var,
        mask: Vec<T>,
    },
    MaskedAvgPool {
        features: Var,
        mask: Var,
        eps: T,
    },
    MeanSquaredTo {
        x: Var,
        target: T,
    },
    MeanAbsDiff {
        a: Var,
        b: Var,
    },
    Dice {
        pred: Var,
        target: Var,
        eps: T,
    },
    NegLog {
        probs: Var,
        class: usize,
        floor: T,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the leaves of a graph, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    /// 3D convolution of a `[cin, D, H, W]` input with `[cout, cin, k, k, k]`
    /// weights.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 || ws.len() != 5 || xs[0] != ws[1] || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(shape_err(format!("conv3d input {xs:?} vs weight {ws:?}")));
        }
        let geom = ConvGeom::new(ws[1], ws[0], ws[2], stride, pad, [xs[1], xs[2], xs[3]])
            .ok_or_else(|| shape_err(format!("input {xs:?} smaller than kernel {}", ws[2])))?;
        let out = conv::conv3d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let [d, h, wd] = geom.output;
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        let value = Tensor::from_vec(&[geom.cout, d, h, wd], out)?;
        Ok(self.push(value, Op::Conv { x, w, b, geom }, rg))
    }

    /// Transposed convolution with kernel size equal to stride;
    /// weights are `[cin, cout, k, k, k]`.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 || ws.len() != 5 || xs[0] != ws[0] {
            return Err(shape_err(format!("conv_transpose3d input {xs:?} vs weight {ws:?}")));
        }
        let geom = ConvTransposeGeom {
            cin: ws[0],
            cout: ws[1],
            kernel: ws[2],
            input: [xs[1], xs[2], xs[3]],
        };
        let out = conv::conv_transpose3d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let [d, h, wd] = geom.output();
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        let value = Tensor::from_vec(&[geom.cout, d, h, wd], out)?;
        Ok(self.push(value, Op::ConvTranspose { x, w, b, geom }, rg))
    }

    /// Per-channel normalization over all spatial positions, followed by an
    /// optional affine transform.
    pub fn instance_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.channels();
        let n = xv.inner_len();
        if n == 0 {
            return Err(shape_err("instance_norm on empty tensor".into()));
        }
        let mut normed = vec![T::zero(); xv.numel()];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let src = xv.channel(ch);
            let mean = src.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / n as f64;
            let var = src
                .iter()
                .map(|v| {
                    let d = v.to_f64().unwrap() - mean;
                    d * d
                })
                .sum::<f64>()
                / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            inv_std[ch] = cast(r);
            let (m, rt): (T, T) = (cast(mean), cast(r));
            for (o, &v) in normed[ch * n..][..n].iter_mut().zip(src) {
                *o = (v - m) * rt;
            }
        }
        let mut out = normed.clone();
        for ch in 0..c {
            let gv = gamma.map_or(T::one(), |g| self.value(g).data()[ch]);
            let bv = beta.map_or(T::zero(), |b| self.value(b).data()[ch]);
            for o in &mut out[ch * n..][..n] {
                *o = *o * gv + bv;
            }
        }
        let rg = self.requires_grad(x)
            || gamma.is_some_and(|g| self.requires_grad(g))
            || beta.is_some_and(|b| self.requires_grad(b));
        let value = Tensor::from_vec(self.shape(x), out)?;
        Ok(self.push(
            value,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
            rg,
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope: T = cast(slope);
        let value = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        let rg = self.requires_grad(x);
        self.push(value, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mask: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > T::zero() { T::one() } else { T::zero() })
            .collect();
        self.mask(x, mask)
    }

    /// Elementwise multiplication by a constant mask of the same size.
    pub fn mask(&mut self, x: Var, mask: Vec<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.numel(), mask.len(), "mask length");
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::from_vec(xv.shape(), data).expect("same shape");
        let rg = self.requires_grad(x);
        self.push(value, Op::Mask { x, mask }, rg)
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 4 {
            return Err(shape_err(format!("upsample2x on {:?}", xv.shape())));
        }
        let [d, h, w] = xv.spatial();
        let c = xv.channels();
        let data = resize::upsample2x(xv.data(), c, [d, h, w]);
        let value = Tensor::from_vec(&[c, 2 * d, 2 * h, 2 * w], data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Upsample2x { x }, rg))
    }

    /// Concatenation along the leading dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat of nothing".into()))?;
        let tail: Vec<usize> = self.shape(*first).iter().skip(1).copied().collect();
        let scalar_parts = self.shape(*first).is_empty();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            let ptail: Vec<usize> = s.iter().skip(1).copied().collect();
            if ptail != tail || s.is_empty() != scalar_parts {
                return Err(shape_err(format!("concat of {s:?} with tail {tail:?}")));
            }
            lead += self.value(p).channels();
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let value = Tensor::from_vec(&shape, data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }, rg))
    }

    /// Slice `[start, start+len)` of the leading dimension.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.channels() {
            return Err(shape_err(format!("slice {start}..{} of {:?}", start + len, xv.shape())));
        }
        let n = xv.inner_len();
        let data = xv.data()[start * n..(start + len) * n].to_vec();
        let mut shape = xv.shape().to_vec();
        shape[0] = len;
        let value = Tensor::from_vec(&shape, data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Slice { x, start }, rg))
    }

    /// Softmax over the leading dimension, independently at every inner
    /// position.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.channels();
        let n = xv.inner_len();
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for i in 0..n {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(src[ch * n + i]);
            }
            let mut z = T::zero();
            for ch in 0..c {
                let e = (src[ch * n + i] - m).exp();
                out[ch * n + i] = e;
                z += e;
            }
            for ch in 0..c {
                out[ch * n + i] /= z;
            }
        }
        let value = Tensor::from_vec(xv.shape(), out).expect("same shape");
        let rg = self.requires_grad(x);
        self.push(value, Op::Softmax { x }, rg)
    }

    /// Fully connected layer: `w` is `[out, in]`, `b` is `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] || bs != [ws[0]] {
            return Err(shape_err(format!("linear input {xs:?}, weight {ws:?}, bias {bs:?}")));
        }
        let (out_n, in_n) = (ws[0], ws[1]);
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let data = (0..out_n)
            .map(|o| {
                let mut acc = bv[o];
                for i in 0..in_n {
                    acc += wv[o * in_n + i] * xv[i];
                }
                acc
            })
            .collect();
        let value = Tensor::from_vec(&[out_n], data)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// `f[k] = Σ_x F[k,x]·m[x] / (Σ_x m[x] + eps)` for a `[K, ...]` feature
    /// map and a single-channel mask with the same inner size.
    pub fn masked_avg_pool(&mut self, features: Var, mask: Var, eps: f64) -> Result<Var> {
        let fv = self.value(features);
        let mv = self.value(mask);
        if fv.inner_len() != mv.numel() || fv.shape().len() < 2 {
            return Err(shape_err(format!(
                "masked_avg_pool features {:?} vs mask {:?}",
                fv.shape(),
                mv.shape()
            )));
        }
        let eps: T = cast(eps);
        let n = fv.inner_len();
        let m = mv.data();
        let z = m.iter().copied().sum::<T>() + eps;
        let data = (0..fv.channels())
            .map(|k| {
                let mut acc = T::zero();
                for (&f, &w) in fv.channel(k).iter().zip(m) {
                    acc += f * w;
                }
                acc / z
            })
            .collect();
        debug_assert_eq!(n, m.len());
        let value = Tensor::from_vec(&[fv.channels()], data)?;
        let rg = self.any_grad(&[features, mask]);
        Ok(self.push(value, Op::MaskedAvgPool { features, mask, eps }, rg))
    }

    /// `mean((x - target)²)`.
    pub fn mean_squared_to(&mut self, x: Var, target: f64) -> Var {
        let target: T = cast(target);
        let xv = self.value(x);
        let n: T = cast(xv.numel() as f64);
        let s = xv.data().iter().map(|&v| (v - target) * (v - target)).sum::<T>();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s / n), Op::MeanSquaredTo { x, target }, rg)
    }

    /// `mean(|a - b|)`.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "mean_abs_diff {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n: T = cast(av.len() as f64);
        let s = av.iter().zip(bv).map(|(&x, &y)| (x - y).abs()).sum::<T>();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(s / n), Op::MeanAbsDiff { a, b }, rg))
    }

    /// `1 - 2Σ s·p / (Σ s² + Σ p² + eps)`.
    pub fn dice_loss(&mut self, pred: Var, target: Var, eps: f64) -> Result<Var> {
        let (pv, sv) = (self.value(pred), self.value(target));
        if pv.numel() != sv.numel() {
            return Err(shape_err(format!("dice_loss {:?} vs {:?}", pv.shape(), sv.shape())));
        }
        let eps: T = cast(eps);
        let (mut inter, mut ss, mut pp) = (T::zero(), T::zero(), T::zero());
        for (&p, &s) in pv.data().iter().zip(sv.data()) {
            inter += s * p;
            ss += s * s;
            pp += p * p;
        }
        let two: T = cast(2.0);
        let loss = T::one() - two * inter / (ss + pp + eps);
        let rg = self.any_grad(&[pred, target]);
        Ok(self.push(Tensor::scalar(loss), Op::Dice { pred, target, eps }, rg))
    }

    /// `-ln(max(probs[class], floor))`.
    pub fn neg_log(&mut self, probs: Var, class: usize, floor: f64) -> Result<Var> {
        let pv = self.value(probs);
        if pv.shape().len() != 1 || class >= pv.numel() {
            return Err(Error::Argument(format!(
                "class {class} for distribution of shape {:?}",
                pv.shape()
            )));
        }
        let floor: T = cast(floor);
        let p = pv.data()[class].max(floor);
        let rg = self.requires_grad(probs);
        Ok(self.push(Tensor::scalar(-p.ln()), Op::NegLog { probs, class, floor }, rg))
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = T::zero();
        let mut ts = Vec::with_capacity(terms.len());
        for &(v, w) in terms {
            if self.value(v).numel() != 1 {
                return Err(shape_err(format!("weighted_sum term of shape {:?}", self.shape(v))));
            }
            let w: T = cast(w);
            total += w * self.value(v).item();
            ts.push((v, w));
        }
        let rg = ts.iter().any(|&(v, _)| self.requires_grad(v));
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum { terms: ts }, rg))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        assert_eq!(self.value(root).numel(), 1, "backward from a non-scalar");
        if self.requires_grad(root) {
            grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.requires_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_vec(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Vec<T>) {
        if !self.requires_grad(v) {
            return;
        }
        let t = Tensor::from_vec(self.shape(v), g).expect("gradient shape");
        self.accumulate(grads, v, t);
    }

    fn backprop(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                if self.requires_grad(*x) {
                    let gx = conv::conv3d_backward_input(geom, gd, self.value(*w).data());
                    self.accumulate_vec(grads, *x, gx);
                }
                let need_b = b.is_some_and(|b| self.requires_grad(b));
                if self.requires_grad(*w) {
                    let (gw, gb) = conv::conv3d_backward_params(geom, self.value(*x).data(), gd);
                    self.accumulate_vec(grads, *w, gw);
                    if let Some(b) = b {
                        self.accumulate_vec(grads, *b, gb);
                    }
                } else if need_b {
                    let b = b.unwrap();
                    self.accumulate_vec(grads, b, channel_sums(g));
                }
            }
            Op::ConvTranspose { x, w, b, geom } => {
                if self.requires_grad(*x) {
                    let gx = conv::conv_transpose3d_backward_input(geom, gd, self.value(*w).data());
                    self.accumulate_vec(grads, *x, gx);
                }
                if self.requires_grad(*w) || b.is_some_and(|b| self.requires_grad(b)) {
                    let (gw, gb) = conv::conv_transpose3d_backward_params(geom, self.value(*x).data(), gd);
                    self.accumulate_vec(grads, *w, gw);
                    if let Some(b) = b {
                        self.accumulate_vec(grads, *b, gb);
                    }
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                let c = g.channels();
                let n = g.inner_len();
                let nt: T = cast(n as f64);
                let mut ggamma = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                let mut gx = vec![T::zero(); g.numel()];
                for ch in 0..c {
                    let gc = &gd[ch * n..][..n];
                    let xh = &normed[ch * n..][..n];
                    let gv = gamma.map_or(T::one(), |gm| self.value(gm).data()[ch]);
                    let (mut sg, mut sgx) = (T::zero(), T::zero());
                    for (&a, &b) in gc.iter().zip(xh) {
                        sg += a;
                        sgx += a * b;
                    }
                    ggamma[ch] = sgx;
                    gbeta[ch] = sg;
                    // dx = r/n · (n·dx̂ − Σdx̂ − x̂·Σ(dx̂·x̂)) with dx̂ = γ·g
                    let k = gv * inv_std[ch] / nt;
                    for ((o, &a), &b) in gx[ch * n..][..n].iter_mut().zip(gc).zip(xh) {
                        *o = k * (nt * a - sg - b * sgx);
                    }
                }
                self.accumulate_vec(grads, *x, gx);
                if let Some(gm) = gamma {
                    self.accumulate_vec(grads, *gm, ggamma);
                }
                if let Some(bt) = beta {
                    self.accumulate_vec(grads, *bt, gbeta);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let gx = gd
                    .iter()
                    .zip(xv)
                    .map(|(&a, &v)| if v > T::zero() { a } else { a * *slope })
                    .collect();
                self.accumulate_vec(grads, *x, gx);
            }
            Op::Mask { x, mask } => {
                let gx = gd.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                self.accumulate_vec(grads, *x, gx);
            }
            Op::Upsample2x { x } => {
                let xv = self.value(*x);
                let gx = resize::upsample2x_adjoint(gd, xv.channels(), xv.spatial());
                self.accumulate_vec(grads, *x, gx);
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.requires_grad(p) {
                        self.accumulate_vec(grads, p, gd[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::Slice { x, start } => {
                if self.requires_grad(*x) {
                    let xv = self.value(*x);
                    let n = xv.inner_len();
                    let mut gx = vec![T::zero(); xv.numel()];
                    gx[start * n..start * n + gd.len()].copy_from_slice(gd);
                    self.accumulate_vec(grads, *x, gx);
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let c = node.value.channels();
                let n = node.value.inner_len();
                let mut gx = vec![T::zero(); y.len()];
                for i in 0..n {
                    let mut dot = T::zero();
                    for ch in 0..c {
                        dot += gd[ch * n + i] * y[ch * n + i];
                    }
                    for ch in 0..c {
                        gx[ch * n + i] = y[ch * n + i] * (gd[ch * n + i] - dot);
                    }
                }
                self.accumulate_vec(grads, *x, gx);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let (out_n, in_n) = (gd.len(), xv.len());
                if self.requires_grad(*x) {
                    let mut gx = vec![T::zero(); in_n];
                    for o in 0..out_n {
                        for i in 0..in_n {
                            gx[i] += wv[o * in_n + i] * gd[o];
                        }
                    }
                    self.accumulate_vec(grads, *x, gx);
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![T::zero(); out_n * in_n];
                    for o in 0..out_n {
                        for i in 0..in_n {
                            gw[o * in_n + i] = gd[o] * xv[i];
                        }
                    }
                    self.accumulate_vec(grads, *w, gw);
                }
                self.accumulate_vec(grads, *b, gd.to_vec());
            }
            Op::MaskedAvgPool { features, mask, eps } => {
                let fv = self.value(*features);
                let m = self.value(*mask).data();
                let f = node.value.data();
                let n = fv.inner_len();
                let z = m.iter().copied().sum::<T>() + *eps;
                if self.requires_grad(*features) {
                    let mut gf = vec![T::zero(); fv.numel()];
                    for k in 0..fv.channels() {
                        let s = gd[k] / z;
                        for (o, &w) in gf[k * n..][..n].iter_mut().zip(m) {
                            *o = s * w;
                        }
                    }
                    self.accumulate_vec(grads, *features, gf);
                }
                if self.requires_grad(*mask) {
                    // ∂f_k/∂m_x = (F_kx − f_k) / Z
                    let mut gm = vec![T::zero(); n];
                    for k in 0..fv.channels() {
                        let (gk, fk) = (gd[k] / z, f[k]);
                        for (o, &fx) in gm.iter_mut().zip(fv.channel(k)) {
                            *o += gk * (fx - fk);
                        }
                    }
                    self.accumulate_vec(grads, *mask, gm);
                }
            }
            Op::MeanSquaredTo { x, target } => {
                let xv = self.value(*x).data();
                let k = cast::<T>(2.0) * gd[0] / cast(xv.len() as f64);
                let gx = xv.iter().map(|&v| k * (v - *target)).collect();
                self.accumulate_vec(grads, *x, gx);
            }
            Op::MeanAbsDiff { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let k = gd[0] / cast(av.len() as f64);
                let sign: Vec<T> = av
                    .iter()
                    .zip(bv)
                    .map(|(&x, &y)| {
                        if x > y {
                            k
                        } else if x < y {
                            -k
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if self.requires_grad(*b) {
                    self.accumulate_vec(grads, *b, sign.iter().map(|&v| -v).collect());
                }
                self.accumulate_vec(grads, *a, sign);
            }
            Op::Dice { pred, target, eps } => {
                let (pv, sv) = (self.value(*pred).data(), self.value(*target).data());
                let (mut inter, mut den) = (T::zero(), *eps);
                for (&p, &s) in pv.iter().zip(sv) {
                    inter += s * p;
                    den += s * s + p * p;
                }
                let two: T = cast(2.0);
                let four: T = cast(4.0);
                let k = gd[0];
                let grad = |this: &[T], other: &[T]| -> Vec<T> {
                    this.iter()
                        .zip(other)
                        .map(|(&t, &o)| k * (four * inter * t / (den * den) - two * o / den))
                        .collect()
                };
                if self.requires_grad(*pred) {
                    self.accumulate_vec(grads, *pred, grad(pv, sv));
                }
                if self.requires_grad(*target) {
                    self.accumulate_vec(grads, *target, grad(sv, pv));
                }
            }
            Op::NegLog { probs, class, floor } => {
                let pv = self.value(*probs).data();
                let mut gp = vec![T::zero(); pv.len()];
                if pv[*class] > *floor {
                    gp[*class] = -gd[0] / pv[*class];
                }
                self.accumulate_vec(grads, *probs, gp);
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    let t = Tensor::full(self.shape(v), w * gd[0]);
                    self.accumulate(grads, v, t);
                }
            }
        }
    }
}

fn channel_sums<T: Scalar>(g: &Tensor<T>) -> Vec<T> {
    (0..g.channels()).map(|c| g.channel(c).iter().copied().sum()).collect()
}
