//! Central finite-difference oracle for checking tape gradients.
//!
//! The oracle only ever calls the forward closure, so it stays independent of
//! the backward rules it validates. Coordinates whose `±h` perturbation moves
//! any ReLU input across zero are skipped: the loss is not differentiable
//! there and a difference quotient straddling the kink is meaningless.
//!
//! A central difference cannot resolve gradients below its own roundoff,
//! roughly `ε·|L| / h` for a loss of magnitude `|L|`. The relative-error
//! denominator is therefore floored at `κ·ε·max(|L|, 1) / (h · tolerance)`:
//! an entry whose absolute discrepancy stays under `κ` times that roundoff
//! bound is not counted as a mismatch, however small the gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is zero are judged by absolute error.
    pub floor: f64,
    /// Target relative error; only used to scale the roundoff floor.
    pub tolerance: f64,
    /// Safety factor `κ` on the roundoff bound. Zero disables the bound.
    pub roundoff: f64,
    /// Probability of checking each coordinate (at least one per tensor is
    /// always checked), with the seed of the sampler.
    pub sample: Option<(f64, u64)>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            tolerance: 1e-5,
            roundoff: 10.0,
            sample: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// Denominator floor actually applied.
    pub floor: f64,
    /// `(input index, element index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Reduces `out` to a scalar through a fixed pseudo-random projection, so
/// every output element contributes to the checked loss.
pub fn random_projection(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = tape.dims(out).to_vec();
    let n = tape.value(out).len();
    let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = tape.constant(Tensor::new(&dims, r)?);
    let prod = tape.mul(out, r)?;
    tape.sum(prod)
}

impl GradCheck {
    /// Compares tape gradients of `f` w.r.t. every tensor in `inputs` with
    /// central differences.
    pub fn run<F>(&self, inputs: &[Tensor<f64>], mut f: F) -> Result<GradReport>
    where
        F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let base_fp = tape.relu_fingerprint();
        let magnitude = tape.value(loss).data()[0].abs().max(1.0);
        let noise = self.roundoff * f64::EPSILON * magnitude / self.step;
        let floor = self.floor.max(noise / self.tolerance);
        tape.backward(loss)?;
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| tape.grad(v).expect("leaf grad").to_vec())
            .collect();
        drop(tape);

        let mut eval = |values: &[Tensor<f64>]| -> Result<(f64, u64)> {
            let mut tape = Tape::inference();
            let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
            let loss = f(&mut tape, &vars)?;
            Ok((tape.value(loss).data()[0], tape.relu_fingerprint()))
        };

        let mut rng = self.sample.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
        let mut report = GradReport {
            floor,
            ..GradReport::default()
        };
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        for (ti, t) in inputs.iter().enumerate() {
            let mut picks: Vec<usize> = match (&mut rng, self.sample) {
                (Some(rng), Some((p, _))) => (0..t.len()).filter(|_| rng.random_bool(p)).collect(),
                _ => (0..t.len()).collect(),
            };
            if picks.is_empty() {
                let rng = rng.as_mut().expect("sampling enabled");
                picks.push(rng.random_range(0..t.len()));
            }
            for j in picks {
                let orig = t.data()[j];
                work[ti].data_mut()[j] = orig + self.step;
                let (plus, fp_plus) = eval(&work)?;
                work[ti].data_mut()[j] = orig - self.step;
                let (minus, fp_minus) = eval(&work)?;
                work[ti].data_mut()[j] = orig;
                if fp_plus != base_fp || fp_minus != base_fp {
                    report.skipped_kinks += 1;
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * self.step);
                let a = analytic[ti][j];
                let err = relative_error(a, numeric, floor);
                report.checked += 1;
                if err > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = report.max_rel_error.max(err);
                    if err >= report.max_rel_error {
                        report.worst = Some((ti, j, a, numeric));
                    }
                }
            }
        }
        Ok(report)
    }
}
