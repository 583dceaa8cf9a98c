use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{RunningStats, Tape, Var};
use crate::tensor::Tensor;

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    /// Image channels: 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    /// Feature width inside both sub-networks.
    pub features: usize,
    /// Residual blocks in the noise suppression network.
    pub nsn_depth: usize,
    /// CvT blocks in the structure enhancement network.
    pub sen_depth: usize,
    /// Transformer blocks per CvT block.
    pub cvt_depth: usize,
    pub heads: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Pixel-unshuffle factor ahead of attention.
    pub reduction: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            features: 32,
            nsn_depth: 8,
            sen_depth: 2,
            cvt_depth: 2,
            heads: 4,
            kernel: 3,
            stride: 1,
            padding: 1,
            reduction: 2,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.channels != 1 && self.channels != 3 {
            return fail(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.nsn_depth == 0 || self.sen_depth == 0 || self.cvt_depth == 0 {
            return fail("all depths must be at least 1".into());
        }
        if self.heads == 0 || self.features % self.heads != 0 {
            return fail(format!("{} features cannot be split into {} heads", self.features, self.heads));
        }
        if self.reduction == 0 || self.features % (self.reduction * self.reduction) != 0 {
            return fail(format!(
                "{} features not divisible by reduction² = {}",
                self.features,
                self.reduction * self.reduction
            ));
        }
        if self.stride != 1 || self.kernel != 2 * self.padding + 1 {
            return fail(format!(
                "kernel {}, stride {}, padding {} does not preserve spatial extents",
                self.kernel, self.stride, self.padding
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.features / self.heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    /// Final convolution of a sub-network, whose output is added to a skip
    /// path.
    OutputWeight,
    Linear,
    Bias,
    NormScale,
    NormShift,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub kind: ParamKind,
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
    norms: Vec<(String, usize)>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, dims: Vec<usize>, kind: ParamKind) {
        self.specs.push(ParamSpec { name, dims, kind });
    }

    fn conv(&mut self, prefix: &str, out: usize, inp: usize, k: usize, bias: bool) {
        self.push(format!("{prefix}.weight"), vec![out, inp, k, k], ParamKind::ConvWeight);
        if bias {
            self.push(format!("{prefix}.bias"), vec![out], ParamKind::Bias);
        }
    }

    fn output_conv(&mut self, prefix: &str, out: usize, inp: usize, k: usize) {
        self.push(format!("{prefix}.weight"), vec![out, inp, k, k], ParamKind::OutputWeight);
        self.push(format!("{prefix}.bias"), vec![out], ParamKind::Bias);
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.push(format!("{prefix}.scale"), vec![c], ParamKind::NormScale);
        self.push(format!("{prefix}.shift"), vec![c], ParamKind::NormShift);
    }
}

/// Every learnable tensor of the network, in fixed enumeration order, plus
/// the names and widths of the batch-normalization layers.
pub fn layout(arch: &ArchConfig) -> (Vec<ParamSpec>, Vec<(String, usize)>) {
    let (c, f, k, r) = (arch.channels, arch.features, arch.kernel, arch.reduction);
    let mut b = LayoutBuilder {
        specs: Vec::new(),
        norms: Vec::new(),
    };
    b.conv("nsn.head", f, c, k, true);
    for i in 0..arch.nsn_depth {
        for j in 1..=2 {
            let p = format!("nsn.res{i}.block{j}");
            b.conv(&format!("{p}.conv"), f, f, k, true);
            b.norm(&format!("{p}.norm"), f);
            b.norms.push((format!("{p}.norm"), f));
        }
    }
    b.output_conv("nsn.tail", c, f, k);
    b.conv("sen.head", f, c, k, true);
    for i in 0..arch.sen_depth {
        let cvt = format!("sen.cvt{i}");
        b.conv(&format!("{cvt}.embed"), f, f, k, true);
        for j in 0..arch.cvt_depth {
            let t = format!("{cvt}.block{j}");
            b.norm(&format!("{t}.norm1"), f);
            b.conv(&format!("{t}.attn.reduce"), f, f * r * r, 1, true);
            for h in 0..arch.heads {
                for role in ["query", "key", "value"] {
                    b.push(
                        format!("{t}.attn.head{h}.{role}"),
                        vec![f, arch.head_dim()],
                        ParamKind::Linear,
                    );
                }
            }
            b.conv(&format!("{t}.attn.proj"), f, f / (r * r), 1, false);
            b.norm(&format!("{t}.norm2"), f);
            b.conv(&format!("{t}.mlp.fc1"), f, f, 1, true);
            b.conv(&format!("{t}.mlp.fc2"), f, f, 1, true);
        }
    }
    b.output_conv("sen.tail", c, f, k);
    (b.specs, b.norms)
}

/// Named learnable tensors and batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    pub arch: ArchConfig,
    pub tensors: IndexMap<String, Tensor<T>>,
    pub running: IndexMap<String, RunningStats<T>>,
}

impl<T: Real> ModelParams<T> {
    /// All tensors zero (including normalization scales).
    pub fn zeros(arch: ArchConfig) -> Result<Self> {
        Self::from_fn(arch, |_, dims| Tensor::zeros(dims))
    }

    pub(crate) fn from_fn(
        arch: ArchConfig,
        mut init: impl FnMut(&ParamSpec, &[usize]) -> Result<Tensor<T>>,
    ) -> Result<Self> {
        arch.validate()?;
        let (specs, norms) = layout(&arch);
        let mut tensors = IndexMap::with_capacity(specs.len());
        for spec in &specs {
            tensors.insert(spec.name.clone(), init(spec, &spec.dims)?);
        }
        let running = norms
            .into_iter()
            .map(|(name, c)| (name, RunningStats::new(c)))
            .collect();
        Ok(Self {
            arch,
            tensors,
            running,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    /// Total number of learnable scalars.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch,
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), t.cast()))
                .collect(),
            running: self
                .running
                .iter()
                .map(|(k, s)| (k.clone(), s.cast()))
                .collect(),
        }
    }

    /// Checks names, order and shapes against the layout of `self.arch`.
    pub fn validate(&self) -> Result<()> {
        let (specs, norms) = layout(&self.arch);
        if specs.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(&self.tensors) {
            if &spec.name != name || spec.dims != t.dims() {
                return Err(Error::Config(format!(
                    "parameter `{name}` {:?} does not match layout `{}` {:?}",
                    t.dims(),
                    spec.name,
                    spec.dims
                )));
            }
        }
        for ((name, c), (have, stats)) in norms.iter().zip(&self.running) {
            if name != have || stats.mean.len() != *c || stats.var.len() != *c {
                return Err(Error::Config(format!("running statistics `{have}` do not match `{name}`")));
            }
        }
        Ok(())
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> IndexMap<String, Var> {
        self.tensors
            .iter()
            .map(|(name, t)| (name.clone(), tape.param(t.clone())))
            .collect()
    }

    /// Copies leaf gradients from a tape after `backward`.
    pub fn collect_grads(&mut self, tape: &Tape<T>, vars: &IndexMap<String, Var>) -> Result<()> {
        for (name, t) in self.tensors.iter_mut() {
            let grad = vars
                .get(name)
                .and_then(|&v| tape.grad(v))
                .ok_or_else(|| Error::Config(format!("no gradient recorded for `{name}`")))?;
            t.set_grad(grad.to_vec())?;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::clear_grad);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_arch_matches_hyperparameter_table() {
        let a = ArchConfig::default();
        assert_eq!((a.features, a.nsn_depth, a.sen_depth, a.cvt_depth), (32, 8, 2, 2));
        assert_eq!((a.heads, a.kernel, a.stride, a.padding), (4, 3, 1, 1));
        a.validate().unwrap();
    }

    #[test]
    fn invalid_archs() {
        let bad_heads = ArchConfig {
            heads: 5,
            ..ArchConfig::default()
        };
        assert!(bad_heads.validate().is_err());
        let bad_depth = ArchConfig {
            nsn_depth: 0,
            ..ArchConfig::default()
        };
        assert!(bad_depth.validate().is_err());
        let bad_pad = ArchConfig {
            padding: 0,
            ..ArchConfig::default()
        };
        assert!(bad_pad.validate().is_err());
    }

    #[test]
    fn names_are_unique() {
        let (specs, norms) = layout(&ArchConfig::default());
        let mut names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), specs.len());
        assert_eq!(norms.len(), 16);
    }
}
