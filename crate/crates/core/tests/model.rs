mod common;

use common::{check_block, full_network_check, random_tensor, randomize_tails, rng};
use rtfnet::gradcheck::{random_projection, GradCheck, GradReport};
use rtfnet::model::{layout, ArchConfig, ModelParams, Session};
use rtfnet::optim::init_params;
use rtfnet::{Mode, Tape, Tensor};

const BLOCK_TOL: f64 = 1e-5;
const NETWORK_TOL: f64 = 1e-4;

fn assert_report(name: &str, r: &GradReport, tol: f64) {
    println!(
        "{name}: checked {}, skipped {} kinks, max rel err {:.2e}, floor {:.1e}",
        r.checked, r.skipped_kinks, r.max_rel_error, r.floor
    );
    assert!(r.checked > 0);
    assert!(r.skipped_kinks * 10 <= r.checked, "{name}: too many kinks skipped");
    assert!(r.max_rel_error <= tol, "{name}: {:.3e} worst {:?}", r.max_rel_error, r.worst);
}

fn params64(seed: u64) -> ModelParams<f64> {
    init_params(ArchConfig::default(), seed).unwrap()
}

#[test]
fn parameter_count_is_locked() {
    // 320 + 8·18624 + 289 (NSN) + 320 + 2·(9248 + 2·9696) + 289 (SEN)
    let arch = ArchConfig::default();
    let (specs, _) = layout(&arch);
    let count: usize = specs.iter().map(|s| s.dims.iter().product::<usize>()).sum();
    assert_eq!(count, 207_490);
    assert_eq!(init_params::<f32>(arch, 0).unwrap().count(), 207_490);
}

#[test]
fn init_is_deterministic_with_zero_biases() {
    let a = init_params::<f32>(ArchConfig::default(), 42).unwrap();
    let b = init_params::<f32>(ArchConfig::default(), 42).unwrap();
    assert_eq!(a, b);
    let c = init_params::<f32>(ArchConfig::default(), 43).unwrap();
    assert_ne!(a, c);
    for (name, t) in &a.tensors {
        if name.ends_with(".bias") || name.ends_with(".shift") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
        if name.ends_with(".scale") {
            assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
        }
    }
    for name in ["nsn.tail.weight", "sen.tail.weight"] {
        assert!(a.tensors[name].data().iter().all(|&v| v == 0.0), "{name}");
    }
}

#[test]
fn fresh_model_passes_input_through() {
    let mut p = init_params::<f32>(ArchConfig::default(), 2).unwrap();
    let x = image(3, &[1, 1, 16, 16]);
    let (restored, transition) = run_forward(&mut p, x.clone(), Mode::Train);
    assert_eq!(transition.data(), x.data());
    assert_eq!(restored.data(), x.data());
}

#[test]
fn conv_weight_spread_matches_uniform_moments() {
    let p = init_params::<f64>(ArchConfig::default(), 7).unwrap();
    let w = &p.tensors["nsn.res3.block1.conv.weight"];
    assert_eq!(w.len(), 9216);
    let n = w.len() as f64;
    let mean = w.data().iter().sum::<f64>() / n;
    let sd = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let expect = (2.0f64 / 288.0).sqrt() / 3f64.sqrt();
    assert!((sd - expect).abs() <= 0.2 * expect, "sd {sd} vs {expect}");
}

fn run_forward(params: &mut ModelParams<f32>, x: Tensor<f32>, mode: Mode) -> (Tensor<f32>, Tensor<f32>) {
    let mut tape = Tape::new();
    let mut s = Session::bind(&mut tape, params, mode);
    let xv = s.input(x);
    let out = s.rtfnet_forward(xv).unwrap();
    (tape.value(out.restored).clone(), tape.value(out.transition).clone())
}

fn image(seed: u64, dims: &[usize]) -> Tensor<f32> {
    let mut r = rng(seed);
    let t = random_tensor(&mut r, dims, 0.5);
    let shifted: Vec<f64> = t.data().iter().map(|v| v + 0.5).collect();
    Tensor::new(dims, shifted).unwrap().cast()
}

#[test]
fn shapes_are_preserved() {
    let mut p = init_params::<f32>(ArchConfig::default(), 1).unwrap();
    let (restored, transition) = run_forward(&mut p, image(2, &[1, 1, 64, 64]), Mode::Train);
    assert_eq!(restored.dims(), &[1, 1, 64, 64]);
    assert_eq!(transition.dims(), &[1, 1, 64, 64]);
    assert!(restored.all_finite());
}

#[test]
fn odd_extents_are_padded_and_cropped() {
    let mut p = init_params::<f32>(ArchConfig::default(), 1).unwrap();
    let x = image(3, &[1, 1, 13, 10]);
    let (restored, transition) = run_forward(&mut p, x.clone(), Mode::Train);
    assert_eq!(restored.dims(), &[1, 1, 13, 10]);
    assert_eq!(transition.dims(), &[1, 1, 13, 10]);
    let (r2, _) = rtfnet::model::restore(&mut p, x, Mode::Eval).unwrap();
    assert_eq!(r2.dims(), &[1, 1, 13, 10]);
}

#[test]
fn zero_params_collapse_to_identity() {
    let mut p = ModelParams::<f32>::zeros(ArchConfig::default()).unwrap();
    let x = image(4, &[2, 1, 16, 16]);
    let (restored, transition) = run_forward(&mut p, x.clone(), Mode::Train);
    assert_eq!(transition.data(), x.data());
    assert_eq!(restored.data(), x.data());
}

#[test]
fn zeroed_nsn_tail_passes_input_through() {
    let mut p = init_params::<f32>(ArchConfig::default(), 5).unwrap();
    randomize_tails(&mut p, 50);
    for name in ["nsn.tail.weight", "nsn.tail.bias"] {
        p.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let x = image(6, &[1, 1, 16, 16]);
    let (restored, transition) = run_forward(&mut p, x.clone(), Mode::Train);
    assert_eq!(transition.data(), x.data());
    assert_ne!(restored.data(), x.data());
}

#[test]
fn zeroed_sen_tail_returns_transition() {
    let mut p = init_params::<f32>(ArchConfig::default(), 5).unwrap();
    randomize_tails(&mut p, 51);
    for name in ["sen.tail.weight", "sen.tail.bias"] {
        p.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let x = image(7, &[1, 1, 16, 16]);
    let (restored, transition) = run_forward(&mut p, x.clone(), Mode::Train);
    assert_eq!(restored.data(), transition.data());
    assert_ne!(transition.data(), x.data());
}

#[test]
fn composition_matches_separately_assembled_stages() {
    let mut p = init_params::<f32>(ArchConfig::default(), 8).unwrap();
    randomize_tails(&mut p, 52);
    let x = image(9, &[1, 1, 16, 16]);
    let (restored, transition) = run_forward(&mut p.clone(), x.clone(), Mode::Train);

    let mut tape = Tape::new();
    let mut s = Session::bind(&mut tape, &mut p, Mode::Train);
    let xv = s.input(x.clone());
    let noise = s.nsn_forward(xv).unwrap();
    let noise = s.value(noise).clone();
    let y: Vec<f32> = x.data().iter().zip(noise.data()).map(|(a, b)| a - b).collect();
    let yv = s.input(Tensor::new(x.dims(), y.clone()).unwrap());
    let detail = s.sen_forward(yv).unwrap();
    let detail = s.value(detail).clone();
    let assembled: Vec<f32> = y.iter().zip(detail.data()).map(|(a, b)| a + b).collect();
    assert_eq!(transition.data(), &y[..]);
    assert_eq!(restored.data(), &assembled[..]);
}

#[test]
fn block_counts_follow_the_config() {
    let mut p = init_params::<f32>(ArchConfig::default(), 1).unwrap();
    let mut tape = Tape::new();
    let mut s = Session::bind(&mut tape, &mut p, Mode::Train);
    let x = s.input(image(1, &[1, 1, 8, 8]));
    s.rtfnet_forward(x).unwrap();
    let c = s.counts();
    assert_eq!(c.residual_blocks, 8);
    assert_eq!(c.conv_blocks, 16);
    assert_eq!(c.cvt_blocks, 2);
    assert_eq!(c.transformer_blocks, 4);
    assert_eq!(c.attention_blocks, 4);
    assert_eq!(c.mlp_blocks, 4);
}

#[test]
fn forward_is_deterministic() {
    let mut p = init_params::<f32>(ArchConfig::default(), 3).unwrap();
    randomize_tails(&mut p, 53);
    let x = image(4, &[1, 1, 16, 16]);
    let a = run_forward(&mut p.clone(), x.clone(), Mode::Train);
    let b = run_forward(&mut p, x, Mode::Train);
    assert_eq!(a, b);
}

#[test]
fn conv_block_output_is_nonnegative_and_shape_preserving() {
    let mut p = init_params::<f32>(ArchConfig::default(), 3).unwrap();
    for (h, w) in [(1, 1), (3, 5), (8, 8)] {
        let mut tape = Tape::new();
        let mut s = Session::bind(&mut tape, &mut p, Mode::Train);
        let x = s.input(image(5, &[2, 32, h, w]));
        let y = s.conv_block(x, "nsn.res0.block1").unwrap();
        assert_eq!(s.value(y).dims(), &[2, 32, h, w]);
        assert!(s.value(y).data().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn residual_block_with_zero_weights_is_identity() {
    let mut p = init_params::<f64>(ArchConfig::default(), 3).unwrap();
    for j in 1..=2 {
        p.get_mut(&format!("nsn.res0.block{j}.conv.weight")).unwrap().data_mut().fill(0.0);
    }
    let mut r = rng(10);
    let x = random_tensor(&mut r, &[1, 32, 4, 4], 1.0);
    let mut tape = Tape::new();
    let mut s = Session::bind(&mut tape, &mut p, Mode::Train);
    let xv = s.input(x.clone());
    let y = s.residual_block(xv, "nsn.res0").unwrap();
    assert_eq!(s.value(y).data(), x.data());

    // d out / d x is the identity, checked analytically and numerically
    let mut tape = Tape::new();
    let mut s = Session::bind(&mut tape, &mut p, Mode::Train);
    let xv = s.tape().param(x.clone());
    let y = s.residual_block(xv, "nsn.res0").unwrap();
    let loss = tape.sum(y).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.grad(xv).unwrap().iter().all(|&g| g == 1.0));

    let report = GradCheck::default()
        .run(&[x], |tape, vars| {
            let mut q = p.clone();
            let mut s = Session::bind(tape, &mut q, Mode::Train);
            let y = s.residual_block(vars[0], "nsn.res0")?;
            random_projection(tape, y, 77)
        })
        .unwrap();
    assert_report("residual identity path", &report, BLOCK_TOL);
}

#[test]
fn transformer_block_with_zeroed_output_projections_is_identity() {
    let mut p = init_params::<f32>(ArchConfig::default(), 3).unwrap();
    let t = "sen.cvt0.block0";
    for name in ["attn.proj.weight", "mlp.fc2.weight", "mlp.fc2.bias"] {
        p.get_mut(&format!("{t}.{name}")).unwrap().data_mut().fill(0.0);
    }
    let mut tape = Tape::new();
    let mut s = Session::bind(&mut tape, &mut p, Mode::Train);
    let x = image(11, &[1, 32, 8, 8]);
    let xv = s.input(x.clone());
    let y = s.transformer_block(xv, t).unwrap();
    assert_eq!(s.value(y).data(), x.data());
}

#[test]
fn mlp_of_zero_is_zero() {
    let mut p = init_params::<f32>(ArchConfig::default(), 3).unwrap();
    let mut tape = Tape::new();
    let mut s = Session::bind(&mut tape, &mut p, Mode::Train);
    let x = s.input(Tensor::zeros(&[1, 32, 4, 4]).unwrap());
    let y = s.mlp_block(x, "sen.cvt0.block0.mlp").unwrap();
    assert_eq!(s.value(y).dims(), &[1, 32, 4, 4]);
    assert!(s.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn attention_weights_are_row_stochastic() {
    let mut p = init_params::<f64>(ArchConfig::default(), 3).unwrap();
    let mut r = rng(12);
    let mut tape = Tape::new();
    let mut s = Session::bind(&mut tape, &mut p, Mode::Train);
    let x = s.input(random_tensor(&mut r, &[2, 32, 64, 64], 1.0));
    let (y, weights) = s.attention_block_traced(x, "sen.cvt1.block1.attn").unwrap();
    assert_eq!(s.value(y).dims(), &[2, 32, 64, 64]);
    assert_eq!(weights.len(), 4);
    for w in &weights {
        assert_eq!(w.dims(), &[2, 1024, 1024]);
        for row in w.data().chunks(1024) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn single_token_attention_returns_the_value_projection() {
    // H = W = r gives one token: weight 1, attended output = V exactly.
    let p = init_params::<f64>(ArchConfig::default(), 13).unwrap();
    let mut bound = p.clone();
    let prefix = "sen.cvt0.block0.attn";
    let mut r = rng(14);
    let x = random_tensor(&mut r, &[1, 32, 2, 2], 1.0);
    let mut tape = Tape::new();
    let mut s = Session::bind(&mut tape, &mut bound, Mode::Train);
    let xv = s.input(x.clone());
    let (y, weights) = s.attention_block_traced(xv, prefix).unwrap();
    for w in &weights {
        assert_eq!(w.data(), &[1.0]);
    }
    let got = s.value(y).clone();

    // By hand: unshuffle (2x2 → 128 channels of one pixel), reduce, per-head
    // value projection, concat, shuffle back to 8 x 2 x 2, project.
    let xs = x.data();
    let unshuffled: Vec<f64> = (0..128)
        .map(|ch| {
            let (c, sub) = (ch / 4, ch % 4);
            xs[c * 4 + (sub / 2) * 2 + sub % 2]
        })
        .collect();
    let wr = &p.tensors[&format!("{prefix}.reduce.weight")];
    let br = &p.tensors[&format!("{prefix}.reduce.bias")];
    let token: Vec<f64> = (0..32)
        .map(|o| br.data()[o] + (0..128).map(|i| wr.data()[o * 128 + i] * unshuffled[i]).sum::<f64>())
        .collect();
    let mut attended = Vec::new();
    for h in 0..4 {
        let wv = &p.tensors[&format!("{prefix}.head{h}.value")];
        for d in 0..8 {
            attended.push((0..32).map(|i| token[i] * wv.data()[i * 8 + d]).sum::<f64>());
        }
    }
    // shuffle: channel c·4 + dy·2 + dx → output channel c at (dy, dx)
    let mut shuffled = vec![0.0; 8 * 4];
    for (ch, &v) in attended.iter().enumerate() {
        let (c, sub) = (ch / 4, ch % 4);
        shuffled[c * 4 + sub] = v;
    }
    let wp = &p.tensors[&format!("{prefix}.proj.weight")];
    let mut expect = vec![0.0; 32 * 4];
    for o in 0..32 {
        for px in 0..4 {
            expect[o * 4 + px] = (0..8).map(|c| wp.data()[o * 8 + c] * shuffled[c * 4 + px]).sum();
        }
    }
    let diff = common::max_abs_diff(got.data(), &expect);
    assert!(diff <= 1e-12, "{diff}");
}

#[test]
fn attention_rejects_indivisible_extents() {
    let mut p = init_params::<f32>(ArchConfig::default(), 3).unwrap();
    let mut tape = Tape::new();
    let mut s = Session::bind(&mut tape, &mut p, Mode::Train);
    let x = s.input(Tensor::zeros(&[1, 32, 5, 4]).unwrap());
    assert!(s.attention_block(x, "sen.cvt0.block0.attn").is_err());
    let wrong = s.input(Tensor::zeros(&[1, 16, 4, 4]).unwrap());
    assert!(s.mlp_block(wrong, "sen.cvt0.block0.mlp").is_err());
}

#[test]
fn conv_block_gradients() {
    let p = params64(20);
    let mut r = rng(21);
    let x = random_tensor(&mut r, &[2, 32, 3, 3], 1.0);
    let report = check_block(&p, "nsn.res0.block1.", x, Some((0.1, 2)), |s, x| {
        s.conv_block(x, "nsn.res0.block1")
    });
    assert_report("conv block", &report, BLOCK_TOL);
}

#[test]
fn residual_block_gradients() {
    let p = params64(22);
    let mut r = rng(23);
    let x = random_tensor(&mut r, &[1, 32, 4, 4], 1.0);
    let report = check_block(&p, "nsn.res1.", x, Some((0.05, 3)), |s, x| {
        s.residual_block(x, "nsn.res1")
    });
    assert_report("residual block", &report, BLOCK_TOL);
}

#[test]
fn attention_block_gradients() {
    let p = params64(24);
    let mut r = rng(25);
    let x = random_tensor(&mut r, &[1, 32, 4, 4], 1.0);
    let report = check_block(&p, "sen.cvt0.block0.attn.", x, Some((0.1, 4)), |s, x| {
        s.attention_block(x, "sen.cvt0.block0.attn")
    });
    assert_report("attention block", &report, BLOCK_TOL);
}

#[test]
fn mlp_block_gradients() {
    let p = params64(26);
    let mut r = rng(27);
    let x = random_tensor(&mut r, &[1, 32, 2, 2], 1.0);
    let report = check_block(&p, "sen.cvt0.block0.mlp.", x, Some((0.2, 5)), |s, x| {
        s.mlp_block(x, "sen.cvt0.block0.mlp")
    });
    assert_report("mlp block", &report, BLOCK_TOL);
}

#[test]
fn transformer_block_gradients() {
    let p = params64(28);
    let mut r = rng(29);
    let x = random_tensor(&mut r, &[1, 32, 4, 4], 1.0);
    let report = check_block(&p, "sen.cvt0.block1.", x, Some((0.05, 6)), |s, x| {
        s.transformer_block(x, "sen.cvt0.block1")
    });
    assert_report("transformer block", &report, BLOCK_TOL);
}

#[test]
fn cvt_block_gradients() {
    let p = params64(30);
    let mut r = rng(31);
    let x = random_tensor(&mut r, &[1, 32, 4, 4], 1.0);
    let report = check_block(&p, "sen.cvt1.", x, Some((0.02, 7)), |s, x| {
        s.cvt_block(x, "sen.cvt1")
    });
    assert_report("cvt block", &report, BLOCK_TOL);
}

#[test]
fn full_network_gradients() {
    let mut p = params64(32);
    randomize_tails(&mut p, 54);
    let mut r = rng(33);
    let noisy = random_tensor(&mut r, &[1, 1, 8, 8], 0.5);
    let clean = random_tensor(&mut r, &[1, 1, 8, 8], 0.5);
    let start = std::time::Instant::now();
    let report = full_network_check(&p, noisy, clean, NETWORK_TOL, 8);
    println!("full network took {:?}", start.elapsed());
    assert_report("full network", &report, NETWORK_TOL);
}
