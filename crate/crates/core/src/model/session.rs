//! Forward passes of the network blocks.
//!
//! A [`Session`] couples a tape, the parameter handles recorded on it, and the
//! batch-norm running statistics, so blocks can be composed with plain method
//! calls. Block parameters are addressed by name prefix (see
//! [`layout`](super::layout)).

use indexmap::IndexMap;

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tape::{Mode, RunningStats, Tape, Var};
use crate::tensor::Tensor;

use super::params::{ArchConfig, ModelParams};

/// How many of each block a session has executed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BlockCounts {
    pub conv_blocks: usize,
    pub residual_blocks: usize,
    pub attention_blocks: usize,
    pub mlp_blocks: usize,
    pub transformer_blocks: usize,
    pub cvt_blocks: usize,
}

/// Outputs of a full forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Restoration {
    /// Final image `y + SEN(y)`.
    pub restored: Var,
    /// Transition image `y = noisy − NSN(noisy)`.
    pub transition: Var,
}

pub struct Session<'t, T: Real = f32> {
    tape: &'t mut Tape<T>,
    arch: ArchConfig,
    vars: IndexMap<String, Var>,
    running: &'t mut IndexMap<String, RunningStats<T>>,
    mode: Mode,
    pinned: Vec<Var>,
    counts: BlockCounts,
}

impl<'t, T: Real> Session<'t, T> {
    /// Records all of `params` on `tape` and returns a session over them.
    pub fn bind(tape: &'t mut Tape<T>, params: &'t mut ModelParams<T>, mode: Mode) -> Self {
        let vars = params.bind(tape);
        Self {
            tape,
            arch: params.arch,
            vars,
            running: &mut params.running,
            mode,
            pinned: Vec::new(),
            counts: BlockCounts::default(),
        }
    }

    /// A session over parameter handles the caller already recorded.
    pub fn with_vars(
        tape: &'t mut Tape<T>,
        arch: ArchConfig,
        vars: IndexMap<String, Var>,
        running: &'t mut IndexMap<String, RunningStats<T>>,
        mode: Mode,
    ) -> Self {
        Self {
            tape,
            arch,
            vars,
            running,
            mode,
            pinned: Vec::new(),
            counts: BlockCounts::default(),
        }
    }

    pub fn tape(&mut self) -> &mut Tape<T> {
        self.tape
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    pub fn vars(&self) -> &IndexMap<String, Var> {
        &self.vars
    }

    pub fn counts(&self) -> BlockCounts {
        self.counts
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    fn param(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    fn conv(&mut self, x: Var, prefix: &str, padding: usize) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.vars.get(&format!("{prefix}.bias")).copied();
        self.tape.conv2d(x, w, b, self.arch.stride, padding)
    }

    /// Frees dead intermediates on inference tapes, keeping `live` and
    /// anything pinned by an enclosing block.
    fn trim(&mut self, live: &[Var]) {
        if self.tape.grad_enabled() {
            return;
        }
        let mut keep = self.pinned.clone();
        keep.extend_from_slice(live);
        self.tape.compact(&keep);
    }

    fn check_features(&self, x: Var, op: &'static str) -> Result<()> {
        let d = self.tape.dims(x);
        if d.len() != 4 || d[1] != self.arch.features {
            return Err(shape_err(
                op,
                format!("expected N x {} x H x W, got {d:?}", self.arch.features),
            ));
        }
        Ok(())
    }

    /// conv (k×k, stride 1, same padding) → batch norm → ReLU.
    pub fn conv_block(&mut self, x: Var, prefix: &str) -> Result<Var> {
        self.check_features(x, "conv_block")?;
        let y = self.conv(x, &format!("{prefix}.conv"), self.arch.padding)?;
        let norm = format!("{prefix}.norm");
        let (scale, shift) = (self.param(&format!("{norm}.scale"))?, self.param(&format!("{norm}.shift"))?);
        let stats = self.running.get_mut(&norm);
        let y = self.tape.batch_norm(y, scale, shift, stats, self.mode)?;
        self.counts.conv_blocks += 1;
        self.tape.relu(y)
    }

    /// `x + B(B(x))`.
    pub fn residual_block(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let a = self.conv_block(x, &format!("{prefix}.block1"))?;
        let b = self.conv_block(a, &format!("{prefix}.block2"))?;
        self.counts.residual_blocks += 1;
        self.tape.add(x, b)
    }

    /// Multi-head attention over a pixel-unshuffled token grid.
    pub fn attention_block(&mut self, x: Var, prefix: &str) -> Result<Var> {
        self.attention_inner(x, prefix, None)
    }

    /// Like [`attention_block`](Self::attention_block), also returning each
    /// head's `B x L x L` attention weights.
    pub fn attention_block_traced(&mut self, x: Var, prefix: &str) -> Result<(Var, Vec<Tensor<T>>)> {
        let mut weights = Vec::new();
        let out = self.attention_inner(x, prefix, Some(&mut weights))?;
        Ok((out, weights))
    }

    fn attention_inner(
        &mut self,
        x: Var,
        prefix: &str,
        mut trace: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<Var> {
        self.check_features(x, "attention_block")?;
        let (f, r, heads) = (self.arch.features, self.arch.reduction, self.arch.heads);
        if f % heads != 0 {
            return Err(shape_err("attention_block", format!("{f} features over {heads} heads")));
        }
        let n = self.tape.dims(x)[0];
        let u = self.tape.pixel_unshuffle(x, r)?;
        let red = self.conv(u, &format!("{prefix}.reduce"), 0)?;
        let (h, w) = (self.tape.dims(red)[2], self.tape.dims(red)[3]);
        let seq = self.tape.reshape(red, &[n, f, h * w])?;
        let tokens = self.tape.permute(seq, &[0, 2, 1])?;
        let scale = T::of(1.0 / (self.arch.head_dim() as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let proj = |s: &Self, role: &str| s.param(&format!("{prefix}.head{head}.{role}"));
            let (wq, wk, wv) = (proj(self, "query")?, proj(self, "key")?, proj(self, "value")?);
            let q = self.tape.matmul(tokens, wq)?;
            let k = self.tape.matmul(tokens, wk)?;
            let v = self.tape.matmul(tokens, wv)?;
            if let Some(trace) = trace.as_deref_mut() {
                trace.push(self.tape.attention_weights(q, k, scale)?);
            }
            outs.push(self.tape.attention(q, k, v, scale)?);
        }
        let cat = self.tape.concat(&outs, 2)?;
        let back = self.tape.permute(cat, &[0, 2, 1])?;
        let grid = self.tape.reshape(back, &[n, f, h, w])?;
        let shuffled = self.tape.pixel_shuffle(grid, r)?;
        self.counts.attention_blocks += 1;
        self.conv(shuffled, &format!("{prefix}.proj"), 0)
    }

    /// 1×1 conv → GELU → 1×1 conv.
    pub fn mlp_block(&mut self, x: Var, prefix: &str) -> Result<Var> {
        self.check_features(x, "mlp_block")?;
        let h = self.conv(x, &format!("{prefix}.fc1"), 0)?;
        let h = self.tape.gelu(h)?;
        self.counts.mlp_blocks += 1;
        self.conv(h, &format!("{prefix}.fc2"), 0)
    }

    fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let scale = self.param(&format!("{prefix}.scale"))?;
        let shift = self.param(&format!("{prefix}.shift"))?;
        self.tape.layer_norm(x, scale, shift)
    }

    /// `x* = x + A(LN(x))`, then `x* + M(LN(x*))`.
    pub fn transformer_block(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let n1 = self.layer_norm(x, &format!("{prefix}.norm1"))?;
        let a = self.attention_block(n1, &format!("{prefix}.attn"))?;
        let mid = self.tape.add(x, a)?;
        let n2 = self.layer_norm(mid, &format!("{prefix}.norm2"))?;
        let m = self.mlp_block(n2, &format!("{prefix}.mlp"))?;
        self.counts.transformer_blocks += 1;
        self.tape.add(mid, m)
    }

    /// Convolutional embedding followed by `cvt_depth` transformer blocks.
    pub fn cvt_block(&mut self, x: Var, prefix: &str) -> Result<Var> {
        self.check_features(x, "cvt_block")?;
        let mut h = self.conv(x, &format!("{prefix}.embed"), self.arch.padding)?;
        for j in 0..self.arch.cvt_depth {
            h = self.transformer_block(h, &format!("{prefix}.block{j}"))?;
            self.trim(&[h]);
        }
        self.counts.cvt_blocks += 1;
        Ok(h)
    }

    fn check_image(&self, x: Var, op: &'static str) -> Result<()> {
        let d = self.tape.dims(x);
        if d.len() != 4 || d[1] != self.arch.channels {
            return Err(shape_err(
                op,
                format!("expected N x {} x H x W, got {d:?}", self.arch.channels),
            ));
        }
        Ok(())
    }

    /// Predicted noise map of the noise suppression network.
    pub fn nsn_forward(&mut self, noisy: Var) -> Result<Var> {
        self.check_image(noisy, "nsn_forward")?;
        let mut h = self.conv(noisy, "nsn.head", self.arch.padding)?;
        for i in 0..self.arch.nsn_depth {
            h = self.residual_block(h, &format!("nsn.res{i}"))?;
            self.trim(&[h]);
        }
        self.conv(h, "nsn.tail", self.arch.padding)
    }

    /// Additive detail map of the structure enhancement network. Spatial
    /// extents must be divisible by the reduction factor.
    pub fn sen_forward(&mut self, y: Var) -> Result<Var> {
        self.check_image(y, "sen_forward")?;
        let mut h = self.conv(y, "sen.head", self.arch.padding)?;
        for i in 0..self.arch.sen_depth {
            h = self.cvt_block(h, &format!("sen.cvt{i}"))?;
            self.trim(&[h]);
        }
        self.conv(h, "sen.tail", self.arch.padding)
    }

    /// Two-stage restoration: `y = x − NSN(x)`, `I* = y + SEN(y)`.
    ///
    /// Inputs whose extents are not multiples of the reduction factor are
    /// reflection-padded at the bottom/right and both outputs are cropped
    /// back.
    pub fn rtfnet_forward(&mut self, noisy: Var) -> Result<Restoration> {
        self.check_image(noisy, "rtfnet_forward")?;
        let (h, w) = (self.tape.dims(noisy)[2], self.tape.dims(noisy)[3]);
        let r = self.arch.reduction;
        let (ph, pw) = ((r - h % r) % r, (r - w % r) % r);
        let x = if ph + pw > 0 {
            self.tape.pad_reflect(noisy, ph, pw)?
        } else {
            noisy
        };
        self.pinned.push(x);
        let noise = self.nsn_forward(x)?;
        let y = self.tape.sub(x, noise)?;
        self.pinned.pop();
        self.pinned.push(y);
        let detail = self.sen_forward(y)?;
        self.pinned.pop();
        let restored = self.tape.add(y, detail)?;
        if ph + pw > 0 {
            let restored = self.tape.crop(restored, h, w)?;
            let transition = self.tape.crop(y, h, w)?;
            Ok(Restoration {
                restored,
                transition,
            })
        } else {
            Ok(Restoration {
                restored,
                transition: y,
            })
        }
    }
}
