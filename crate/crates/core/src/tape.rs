//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its values in execution
//! order, so the node list is topologically sorted by construction.
//! [`Tape::backward`] walks it once in reverse, accumulating gradients, writes
//! them into the leaf tensors and releases every intermediate value.

use crate::error::{shape_err, Error, Result};
use crate::ops::attention::{self, AttnGeom};
use crate::ops::conv::ConvGeom;
use crate::ops::matmul::MatMulGeom;
use crate::ops::norm::{self, NormGeom, NormSaved, BN_MOMENTUM};
use crate::ops::{self as kernels, shape};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Per channel over batch and spatial positions.
    Batch,
    /// Over channels at each batch/spatial position.
    Layer,
}

/// Running estimates kept by a batch-normalization layer for eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Real = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn cast<U: Real>(&self) -> RunningStats<U> {
        RunningStats {
            mean: self.mean.iter().map(|v| U::of(v.as_f64())).collect(),
            var: self.var.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    fn update(&mut self, mean: &[T], biased_var: &[T], count: usize) {
        let m = T::of(BN_MOMENTUM);
        let keep = T::one() - m;
        let correction = if count > 1 {
            T::of(count as f64 / (count - 1) as f64)
        } else {
            T::one()
        };
        for c in 0..self.mean.len() {
            self.mean[c] = keep * self.mean[c] + m * mean[c];
            self.var[c] = keep * self.var[c] + m * biased_var[c] * correction;
        }
    }
}

enum Op<T: Real> {
    Leaf,
    /// Recorded without gradient tracking; nothing to propagate.
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Norm {
        kind: NormKind,
        x: Var,
        scale: Var,
        shift: Var,
        geom: NormGeom,
        saved: NormSaved<T>,
    },
    MatMul(Var, Var, MatMulGeom),
    Softmax(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    PixelShuffle(Var, usize),
    PixelUnshuffle(Var, usize),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: T,
        geom: AttnGeom,
    },
    PadReflect(Var, usize, usize),
    Crop(Var),
    Sum(Var),
    Mean(Var),
}

impl<T: Real> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Const => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b, _) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::PixelShuffle(x, _)
            | Op::PixelUnshuffle(x, _)
            | Op::PadReflect(x, _, _)
            | Op::Crop(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(*b);
                v
            }
            Op::Norm { x, scale, shift, .. } => vec![*x, *scale, *shift],
            Op::Concat(parts, _) => parts.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

struct Node<T: Real> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations for one forward pass and differentiates them.
///
/// A tape is single-use: after [`backward`](Tape::backward) only leaf values
/// (and their gradients) remain readable.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    consumed: bool,
    relu_mask_hash: u64,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
            relu_mask_hash: FNV_OFFSET,
        }
    }

    /// A tape that keeps no backward context; [`compact`](Tape::compact)
    /// may drop dead intermediates to bound memory.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = self.grad_enabled
            && op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Const };
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn build(&mut self, dims: &[usize], data: Vec<T>, op: Op<T>) -> Result<Var> {
        let t = Tensor::new(dims, data)?;
        Ok(self.push(t, op))
    }

    /// Records an input tensor; it is differentiated iff `requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = self.grad_enabled && t.requires_grad();
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    /// Panics if the value was released by `backward` or `compact`.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.try_value(v)
            .unwrap_or_else(|| panic!("value of {v:?} has been released"))
    }

    pub fn try_value(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|n| n.value.as_ref())
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.value(v).dims()
    }

    fn data(&self, v: Var) -> &[T] {
        self.value(v).data()
    }

    /// Gradient of a leaf after [`backward`](Tape::backward).
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.try_value(v).and_then(|t| t.grad())
    }

    /// Hash of every ReLU sign pattern recorded so far. Two forward passes with
    /// equal fingerprints went through the same linear pieces.
    pub fn relu_fingerprint(&self) -> u64 {
        self.relu_mask_hash
    }

    /// Drops every intermediate value not listed in `keep`. No-op on tapes
    /// that track gradients.
    pub fn compact(&mut self, keep: &[Var]) {
        if self.grad_enabled {
            return;
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if !matches!(node.op, Op::Leaf) && !keep.contains(&Var(i)) {
                node.value = None;
            }
        }
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(shape_err(op, format!("{da:?} vs {db:?}")));
        }
        Ok(da.to_vec())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        let dims = self.same_dims(op, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((dims, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (dims, data) = self.zip_with("add", a, b, |x, y| x + y)?;
        self.build(&dims, data, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (dims, data) = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.build(&dims, data, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (dims, data) = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.build(&dims, data, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        let data = self.data(x).iter().map(|&v| v * c).collect();
        self.build(&dims, data, Op::Scale(x, c))
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Gelu => self.gelu(x),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        let mut hash = self.relu_mask_hash;
        let data = self
            .data(x)
            .iter()
            .map(|&v| {
                let on = v > T::zero();
                hash = (hash ^ on as u64).wrapping_mul(FNV_PRIME);
                if on {
                    v
                } else {
                    T::zero()
                }
            })
            .collect();
        self.relu_mask_hash = hash;
        self.build(&dims, data, Op::Relu(x))
    }

    /// Exact GELU, `0.5·v·(1 + erf(v/√2))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        let data = self.data(x).iter().map(|&v| kernels::gelu(v)).collect();
        self.build(&dims, data, Op::Gelu(x))
    }

    /// Cross-correlation of `N x Cin x H x W` input with `Cout x Cin x k x k`
    /// weights, zero padding, optional per-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.dims(x), self.dims(w), stride, padding)?;
        if let Some(b) = b {
            if self.dims(b) != [geom.out_channels] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.dims(b), geom.out_channels),
                ));
            }
        }
        let data = geom.forward(self.data(x), self.data(w), b.map(|b| self.data(b)));
        self.build(&geom.out_dims(), data, Op::Conv2d { x, w, b, geom })
    }

    /// Normalization followed by a per-channel affine transform.
    ///
    /// Batch kind in train mode normalizes with the batch statistics and, when
    /// `stats` is given, folds them into the running estimates (momentum 0.1,
    /// unbiased variance). Eval mode uses the running estimates and requires
    /// `stats`. Layer kind ignores `stats` and `mode`.
    pub fn normalize(
        &mut self,
        kind: NormKind,
        x: Var,
        scale: Var,
        shift: Var,
        stats: Option<&mut RunningStats<T>>,
        mode: Mode,
    ) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        let geom = NormGeom::of(&dims)
            .ok_or_else(|| shape_err("normalize", format!("need at least 2-D input, got {dims:?}")))?;
        for p in [scale, shift] {
            if self.dims(p) != [geom.channels] {
                return Err(shape_err(
                    "normalize",
                    format!("affine parameter {:?} for {} channels", self.dims(p), geom.channels),
                ));
            }
        }
        let (xs, gamma, beta) = (self.data(x), self.data(scale), self.data(shift));
        let (data, saved) = match (kind, mode) {
            (NormKind::Layer, _) => norm::layer_norm_forward(geom, xs, gamma, beta),
            (NormKind::Batch, Mode::Train) => {
                let (mean, var) = norm::channel_moments(geom, xs);
                let out = norm::batch_norm_forward(geom, xs, gamma, beta, &mean, &var, true);
                if let Some(stats) = stats {
                    stats.update(&mean, &var, geom.batch * geom.spatial);
                }
                out
            }
            (NormKind::Batch, Mode::Eval) => {
                let stats = stats.ok_or(Error::MissingRunningStats)?;
                if stats.mean.len() != geom.channels {
                    return Err(shape_err("normalize", "running statistics channel count"));
                }
                norm::batch_norm_forward(geom, xs, gamma, beta, &stats.mean, &stats.var, false)
            }
        };
        self.build(
            &dims,
            data,
            Op::Norm {
                kind,
                x,
                scale,
                shift,
                geom,
                saved,
            },
        )
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        stats: Option<&mut RunningStats<T>>,
        mode: Mode,
    ) -> Result<Var> {
        self.normalize(NormKind::Batch, x, scale, shift, stats, mode)
    }

    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        self.normalize(NormKind::Layer, x, scale, shift, None, Mode::Train)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let geom = MatMulGeom::new(self.dims(a), self.dims(b))?;
        let data = geom.forward(self.data(a), self.data(b));
        self.build(&geom.out_dims(), data, Op::MatMul(a, b, geom))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        let width = *dims.last().unwrap_or(&1);
        let mut data = self.data(x).to_vec();
        attention::softmax_rows(&mut data, width);
        self.build(&dims, data, Op::Softmax(x))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let data = self.data(x).to_vec();
        self.build(dims, data, Op::Reshape(x))
    }

    /// Output axis `k` is input axis `perm[k]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out_dims = shape::check_perm(self.dims(x), perm)?;
        let data = shape::permute(self.data(x), self.dims(x), perm);
        self.build(&out_dims, data, Op::Permute(x, perm.to_vec()))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.dims(x).len();
        if r < 2 {
            return Err(shape_err("transpose", "need at least 2-D input"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .map(|&p| self.dims(p).to_vec())
            .ok_or_else(|| shape_err("concat", "nothing to concatenate"))?;
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let mut out_dims = first.clone();
        out_dims[axis] = 0;
        for &p in parts {
            let d = self.dims(p);
            let compatible = d.len() == first.len()
                && d.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{d:?} vs {first:?} along axis {axis}")));
            }
            out_dims[axis] += d[axis];
        }
        let views: Vec<(&[T], &[usize])> = parts.iter().map(|&p| (self.data(p), self.dims(p))).collect();
        let data = shape::concat(&views, axis);
        self.build(&out_dims, data, Op::Concat(parts.to_vec(), axis))
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = shape::unshuffle_dims(self.dims(x), r)?;
        let hi: [usize; 4] = self.dims(x).try_into().expect("checked 4-D");
        let data = shape::pixel_unshuffle(self.data(x), hi, r);
        self.build(&out, data, Op::PixelUnshuffle(x, r))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = shape::shuffle_dims(self.dims(x), r)?;
        let lo: [usize; 4] = self.dims(x).try_into().expect("checked 4-D");
        let data = shape::pixel_shuffle(self.data(x), lo, r);
        self.build(&out, data, Op::PixelShuffle(x, r))
    }

    /// Fused `softmax(scale · q·kᵀ)·v` on `B x L x d` operands.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: T) -> Result<Var> {
        let geom = AttnGeom::new(self.dims(q), self.dims(k), self.dims(v))?;
        let data = attention::forward(geom, self.data(q), self.data(k), self.data(v), scale);
        let dims = self.dims(q).to_vec();
        self.build(
            &dims,
            data,
            Op::Attention {
                q,
                k,
                v,
                scale,
                geom,
            },
        )
    }

    /// Attention weights `softmax(scale · q·kᵀ)` as a plain tensor (not
    /// recorded).
    pub fn attention_weights(&self, q: Var, k: Var, scale: T) -> Result<Tensor<T>> {
        let geom = AttnGeom::new(self.dims(q), self.dims(k), self.dims(k))?;
        let data = attention::probabilities(geom, self.data(q), self.data(k), scale);
        Tensor::new(&[geom.batch, geom.len, geom.len], data)
    }

    /// Mirror-pads the bottom and right edges of a 4-D tensor.
    pub fn pad_reflect(&mut self, x: Var, bottom: usize, right: usize) -> Result<Var> {
        let d: [usize; 4] = self
            .dims(x)
            .try_into()
            .map_err(|_| shape_err("pad_reflect", "expected a 4-D tensor"))?;
        if (bottom > 0 && bottom >= d[2]) || (right > 0 && right >= d[3]) {
            return Err(shape_err("pad_reflect", format!("padding {bottom}x{right} too large for {d:?}")));
        }
        let data = shape::pad_reflect(self.data(x), d, bottom, right);
        self.build(&[d[0], d[1], d[2] + bottom, d[3] + right], data, Op::PadReflect(x, bottom, right))
    }

    /// Keeps the top-left `h x w` window of a 4-D tensor.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let d: [usize; 4] = self
            .dims(x)
            .try_into()
            .map_err(|_| shape_err("crop", "expected a 4-D tensor"))?;
        if h == 0 || w == 0 || h > d[2] || w > d[3] {
            return Err(shape_err("crop", format!("{h}x{w} window for {d:?}")));
        }
        let data = shape::crop(self.data(x), d, h, w);
        self.build(&[d[0], d[1], h, w], data, Op::Crop(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.data(x).iter().copied().sum();
        self.build(&[], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::of(self.value(x).len() as f64);
        let s: T = self.data(x).iter().copied().sum();
        self.build(&[], vec![s / n], Op::Mean(x))
    }

    /// Mean squared error between two equally shaped values.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Back-propagates from a scalar `loss`, storing gradients on every leaf
    /// that requires them. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::NoGrad);
        }
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.dims().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.as_mut().expect("leaf value").set_grad(g)?;
                continue;
            }
            let contributions = self.local_grads(i, g);
            for (v, c) in contributions {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
            self.nodes[i].value = None;
        }
        for node in &mut self.nodes {
            match node.op {
                Op::Leaf => {
                    if let Some(t) = node.value.as_mut() {
                        if node.needs_grad && t.grad().is_none() {
                            let zeros = vec![T::zero(); t.len()];
                            t.set_grad(zeros)?;
                        }
                    }
                }
                _ => node.value = None,
            }
        }
        self.consumed = true;
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient contributions of node `i` to its inputs, given its output
    /// gradient `g`.
    fn local_grads(&self, i: usize, g: Vec<T>) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Const => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g)],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.into_iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (va, vb) = (self.data(*a), self.data(*b));
                let da = g.iter().zip(vb).map(|(&g, &y)| g * y).collect();
                let db = g.iter().zip(va).map(|(&g, &x)| g * x).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(x, c) => vec![(*x, g.into_iter().map(|v| v * *c).collect())],
            Op::Relu(x) => {
                let xs = self.data(*x);
                let d = g
                    .iter()
                    .zip(xs)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                vec![(*x, d)]
            }
            Op::Gelu(x) => {
                let xs = self.data(*x);
                let d = g.iter().zip(xs).map(|(&g, &v)| g * kernels::gelu_grad(v)).collect();
                vec![(*x, d)]
            }
            Op::Conv2d { x, w, b, geom } => {
                let need = [self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b))];
                let (dx, dw, db) = geom.backward(self.data(*x), self.data(*w), &g, need);
                let mut out = Vec::new();
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dw.map(|d| (*w, d)));
                if let (Some(b), Some(db)) = (b, db) {
                    out.push((*b, db));
                }
                out
            }
            Op::Norm {
                kind,
                x,
                scale,
                shift,
                geom,
                saved,
            } => {
                let gamma = self.data(*scale);
                let (dx, ds, db) = match kind {
                    NormKind::Batch => norm::batch_norm_backward(*geom, saved, gamma, &g),
                    NormKind::Layer => norm::layer_norm_backward(*geom, saved, gamma, &g),
                };
                vec![(*x, dx), (*scale, ds), (*shift, db)]
            }
            Op::MatMul(a, b, geom) => {
                let need = [self.needs(*a), self.needs(*b)];
                let (da, db) = geom.backward(self.data(*a), self.data(*b), &g, need);
                let mut out = Vec::new();
                out.extend(da.map(|d| (*a, d)));
                out.extend(db.map(|d| (*b, d)));
                out
            }
            Op::Softmax(x) => {
                let y = node.value.as_ref().expect("softmax output").data();
                let width = *node.value.as_ref().unwrap().dims().last().unwrap_or(&1);
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y
                    .chunks_exact(width)
                    .zip(g.chunks_exact(width))
                    .zip(dx.chunks_exact_mut(width))
                {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![(*x, dx)]
            }
            Op::Reshape(x) => vec![(*x, g)],
            Op::Permute(x, perm) => {
                let out_dims = node.value.as_ref().unwrap().dims();
                let dx = shape::permute(&g, out_dims, &shape::inverse_perm(perm));
                vec![(*x, dx)]
            }
            Op::Concat(parts, axis) => {
                let out_dims = node.value.as_ref().unwrap().dims();
                let (outer, inner) = shape::axis_split(out_dims, *axis);
                let row = out_dims[*axis] * inner;
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let block = self.dims(p)[*axis] * inner;
                    let mut d = Vec::with_capacity(outer * block);
                    for o in 0..outer {
                        d.extend_from_slice(&g[o * row + offset..][..block]);
                    }
                    offset += block;
                    out.push((p, d));
                }
                out
            }
            Op::PixelUnshuffle(x, r) => {
                let lo: [usize; 4] = node.value.as_ref().unwrap().dims().try_into().unwrap();
                vec![(*x, shape::pixel_shuffle(&g, lo, *r))]
            }
            Op::PixelShuffle(x, r) => {
                let hi: [usize; 4] = node.value.as_ref().unwrap().dims().try_into().unwrap();
                vec![(*x, shape::pixel_unshuffle(&g, hi, *r))]
            }
            Op::Attention { q, k, v, scale, geom } => {
                let (dq, dk, dv) =
                    attention::backward(*geom, self.data(*q), self.data(*k), self.data(*v), *scale, &g);
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::PadReflect(x, bottom, right) => {
                let d: [usize; 4] = self.dims(*x).try_into().unwrap();
                vec![(*x, shape::pad_reflect_backward(&g, d, *bottom, *right))]
            }
            Op::Crop(x) => {
                let d: [usize; 4] = self.dims(*x).try_into().unwrap();
                let out = node.value.as_ref().unwrap().dims();
                vec![(*x, shape::crop_backward(&g, d, out[2], out[3]))]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).len()])],
            Op::Mean(x) => {
                let n = self.value(*x).len();
                vec![(*x, vec![g[0] / T::of(n as f64); n])]
            }
        }
    }
}
