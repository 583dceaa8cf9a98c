#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use indexmap::IndexMap;
use rtfnet::gradcheck::{random_projection, GradCheck, GradReport};
use rtfnet::model::{ModelParams, Session};
use rtfnet::{Mode, Real, Result, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor<f64> {
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(dims, data).unwrap()
}

/// Direct nested-loop cross-correlation with zero padding.
pub fn conv2d_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &[f64],
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let (n, c, h, wd) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let (o, k) = (w.dims()[0], w.dims()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Vec::with_capacity(n * o * ho * wo);
    for bi in 0..n {
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = (i * stride + ky) as isize - pad as isize;
                                let xx = (j * stride + kx) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[bi, ic, y as usize, xx as usize])
                                    * w.at(&[oc, ic, ky, kx]);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// Triple-loop batched matrix product with equal leading extents.
pub fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let r = a.rank();
    let (m, k) = (a.dims()[r - 2], a.dims()[r - 1]);
    let n = b.dims()[b.rank() - 1];
    let batch: usize = a.dims()[..r - 2].iter().product();
    let mut out = vec![0.0; batch * m * n];
    for s in 0..batch {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.data()[s * m * k + i * k + p] * b.data()[s * k * n + p * n + j];
                }
                out[s * m * n + i * n + j] = acc;
            }
        }
    }
    out
}

/// Finite-difference check of one block w.r.t. its input and every
/// parameter whose name starts with `prefix`.
pub fn check_block(
    params: &ModelParams<f64>,
    prefix: &str,
    x: Tensor<f64>,
    sample: Option<(f64, u64)>,
    block: impl Fn(&mut Session<f64>, Var) -> Result<Var>,
) -> GradReport {
    let names: Vec<String> = params
        .tensors
        .keys()
        .filter(|k| k.starts_with(prefix))
        .cloned()
        .collect();
    assert!(!names.is_empty(), "no parameters under {prefix}");
    let mut inputs = vec![x];
    inputs.extend(names.iter().map(|n| params.tensors[n].clone()));
    let check = GradCheck {
        sample,
        ..GradCheck::default()
    };
    check
        .run(&inputs, |tape, vars| {
            let map: IndexMap<String, Var> = names.iter().cloned().zip(vars[1..].iter().copied()).collect();
            let mut running = params.running.clone();
            let mut s = Session::with_vars(tape, params.arch, map, &mut running, Mode::Train);
            let y = block(&mut s, vars[0])?;
            random_projection(tape, y, 77)
        })
        .unwrap()
}

/// Initialization zeroes both output convolutions, which would hide every
/// upstream parameter from the output; give them conv-style random weights.
pub fn randomize_tails<T: Real>(p: &mut ModelParams<T>, seed: u64) {
    let mut r = rng(seed);
    for name in ["nsn.tail.weight", "sen.tail.weight"] {
        let t = p.get_mut(name).unwrap();
        let bound = (2.0 / (t.len() as f64)).sqrt();
        let fresh = random_tensor(&mut r, t.dims(), bound).cast::<T>();
        t.data_mut().copy_from_slice(fresh.data());
    }
}

/// Finite-difference check of the MSE loss of the whole network w.r.t.
/// a sampled subset of every parameter.
pub fn full_network_check(
    p: &ModelParams<f64>,
    noisy: Tensor<f64>,
    clean: Tensor<f64>,
    tolerance: f64,
    seed: u64,
) -> GradReport {
    let names: Vec<String> = p.tensors.keys().cloned().collect();
    let inputs: Vec<Tensor<f64>> = p.tensors.values().cloned().collect();
    let check = GradCheck {
        sample: Some((0.01, seed)),
        tolerance,
        ..GradCheck::default()
    };
    check
        .run(&inputs, |tape, vars| {
            let map: IndexMap<String, Var> = names.iter().cloned().zip(vars.iter().copied()).collect();
            let mut running = p.running.clone();
            let mut s = Session::with_vars(tape, p.arch, map, &mut running, Mode::Train);
            let x = s.input(noisy.clone());
            let out = s.rtfnet_forward(x)?;
            let target = tape.constant(clean.clone());
            tape.mse(out.restored, target)
        })
        .unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Smooth synthetic gray image: a few random low-frequency sinusoids and
/// soft-edged disks, in the interior range `[16, 239]`.
#[allow(dead_code)]
pub fn synthetic_image(seed: u64, height: usize, width: usize) -> rtfnet::image::ImageBuffer {
    let mut r = rng(seed);
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                r.random_range(0.5..3.0),
                r.random_range(0.5..3.0),
                r.random_range(0.0..std::f64::consts::TAU),
                r.random_range(0.1..0.25),
            ]
        })
        .collect();
    let disks: Vec<[f64; 4]> = (0..4)
        .map(|_| {
            [
                r.random_range(0.0..1.0),
                r.random_range(0.0..1.0),
                r.random_range(0.08..0.25),
                r.random_range(-0.3..0.3),
            ]
        })
        .collect();
    let mut samples = Vec::with_capacity(height * width);
    for i in 0..height {
        for j in 0..width {
            let (y, x) = (i as f64 / height as f64, j as f64 / width as f64);
            let mut v = 0.5;
            for w in &waves {
                v += w[3] * (std::f64::consts::TAU * (w[0] * x + w[1] * y) + w[2]).sin();
            }
            for d in &disks {
                let dist = ((x - d[0]).powi(2) + (y - d[1]).powi(2)).sqrt();
                v += d[3] / (1.0 + ((dist - d[2]) * 40.0).exp());
            }
            samples.push((v.clamp(0.0, 1.0) * 223.0 + 16.0).round() as u8);
        }
    }
    rtfnet::image::ImageBuffer::new(height, width, 1, samples).unwrap()
}
