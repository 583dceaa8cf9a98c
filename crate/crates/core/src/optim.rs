//! Parameter initialization, the Adam optimizer and step-decay learning
//! rates.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ArchConfig, ModelParams, ParamKind};
use crate::real::Real;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Draws a fresh parameter set.
///
/// Convolution weights are uniform on `±√(2 / fan_in)`; Q/K/V projection
/// matrices are Xavier-uniform on `±√(6 / (fan_in + fan_out))`. The output
/// convolutions of both sub-networks start at zero, so a fresh model passes
/// its input through unchanged and training begins from the noisy image
/// rather than from a large random residual. Biases and normalization shifts
/// are zero, normalization scales one. Deterministic per
/// seed; tensors are drawn in layout order from one ChaCha8 stream.
pub fn init_params<T: Real>(arch: ArchConfig, seed: u64) -> Result<ModelParams<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelParams::from_fn(arch, |spec, dims| {
        let n: usize = dims.iter().product();
        let uniform = |rng: &mut ChaCha8Rng, bound: f64| -> Vec<T> {
            (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()
        };
        let data = match spec.kind {
            ParamKind::ConvWeight => {
                let fan_in = dims[1] * dims[2] * dims[3];
                uniform(&mut rng, (2.0 / fan_in as f64).sqrt())
            }
            ParamKind::Linear => {
                let (fan_in, fan_out) = (dims[0], dims[1]);
                uniform(&mut rng, (6.0 / (fan_in + fan_out) as f64).sqrt())
            }
            ParamKind::OutputWeight | ParamKind::Bias | ParamKind::NormShift => vec![T::zero(); n],
            ParamKind::NormScale => vec![T::one(); n],
        };
        Tensor::new(dims, data)
    })
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub step: u64,
    pub first: IndexMap<String, Vec<T>>,
    pub second: IndexMap<String, Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros: IndexMap<String, Vec<T>> = params
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), vec![T::zero(); t.len()]))
            .collect();
        Self {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One Adam update from the gradients stored on `params`.
///
/// Nothing is modified when a gradient is missing, mis-shaped or non-finite.
pub fn adam_step<T: Real>(params: &mut ModelParams<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    for (name, t) in &params.tensors {
        let g = t
            .grad()
            .ok_or_else(|| Error::Config(format!("no gradient for `{name}`")))?;
        let m = state
            .first
            .get(name)
            .ok_or_else(|| Error::Config(format!("no optimizer state for `{name}`")))?;
        if g.len() != t.len() || m.len() != t.len() {
            return Err(Error::Config(format!("optimizer state shape mismatch for `{name}`")));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let (lr, eps) = (T::of(lr), T::of(ADAM_EPS));
    for (name, tensor) in params.tensors.iter_mut() {
        let g = tensor.grad().expect("checked above").to_vec();
        let m = state.first.get_mut(name).expect("checked above");
        let v = state.second.get_mut(name).expect("checked above");
        for (i, p) in tensor.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `base_lr · gamma^⌊epoch / step_size⌋`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub step_size: u32,
    pub gamma: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 0.001,
            step_size: 6,
            gamma: 0.5,
        }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: u32) -> f64 {
        self.base_lr * self.gamma.powi((epoch / self.step_size) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_model(value: f64, grad: f64) -> ModelParams<f64> {
        let mut p = ModelParams::<f64> {
            arch: ArchConfig::default(),
            tensors: IndexMap::new(),
            running: IndexMap::new(),
        };
        let mut t = Tensor::new(&[1], vec![value]).unwrap();
        t.set_grad(vec![grad]).unwrap();
        p.tensors.insert("x".into(), t);
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_model(0.0, 0.5);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &mut s, 0.001).unwrap();
        let x = p.tensors["x"].data()[0];
        assert!((x + 0.001).abs() < 1e-9, "{x}");
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = scalar_model(0.7, 0.0);
        let mut s = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &mut s, 0.01).unwrap();
        }
        assert_eq!(p.tensors["x"].data()[0], 0.7);
    }

    #[test]
    fn quadratic_descends() {
        // f(x) = x², f'(x) = 2x
        let mut p = scalar_model(1.0, 2.0);
        let mut s = AdamState::new(&p);
        for _ in 0..100 {
            let x = p.tensors["x"].data()[0];
            p.tensors["x"].set_grad(vec![2.0 * x]).unwrap();
            adam_step(&mut p, &mut s, 0.1).unwrap();
        }
        assert!(p.tensors["x"].data()[0].abs() < 0.5);
    }

    #[test]
    fn non_finite_gradient_aborts_the_step() {
        let mut p = scalar_model(0.3, f64::NAN);
        let mut s = AdamState::new(&p);
        assert!(matches!(adam_step(&mut p, &mut s, 0.1), Err(Error::NonFinite(_))));
        assert_eq!(p.tensors["x"].data()[0], 0.3);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn schedule_table_constants() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0), 0.001);
        assert_eq!(s.lr_at(5), 0.001);
        assert_eq!(s.lr_at(6), 0.0005);
        assert!((s.lr_at(24) - 0.0000625).abs() < 1e-15);
    }
}
