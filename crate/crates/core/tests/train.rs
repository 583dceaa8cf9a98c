mod common;

use std::collections::HashSet;

use common::synthetic_image;
use rtfnet::image::{to_tensor, write_image, ImageBuffer};
use rtfnet::metrics::read_curves;
use rtfnet::model::{restore, ArchConfig, ModelParams};
use rtfnet::optim::{init_params, AdamState};
use rtfnet::train::{
    decode, encode, fit, fit_with_corpus, load_checkpoint, noise_seed, save_checkpoint, train_epoch, train_step,
    validate, validation_seed, Checkpoint, RunPaths, TrainConfig,
};
use rtfnet::{Error, Mode, Tensor};

/// Full-width model on 16×16 patches: a few dozen milliseconds per step.
fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch: 3,
        patches_per_image: 2,
        patch_size: 16,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn corpus(n: usize, seed: u64) -> Vec<ImageBuffer> {
    (0..n).map(|i| synthetic_image(seed + i as u64, 24, 20)).collect()
}

fn bits(p: &ModelParams<f32>) -> Vec<u32> {
    let mut out = Vec::new();
    for t in p.tensors.values() {
        out.extend(t.data().iter().map(|v| v.to_bits()));
    }
    for s in p.running.values() {
        out.extend(s.mean.iter().chain(&s.var).map(|v| v.to_bits()));
    }
    out
}

fn trained_checkpoint() -> Checkpoint {
    let (ckpt, _) = fit_with_corpus(&small_config(), &corpus(2, 1), &corpus(1, 9), None, |_, _| Ok(())).unwrap();
    ckpt
}

#[test]
fn training_defaults() {
    let c = TrainConfig::default();
    assert_eq!((c.epochs, c.batch, c.step_size), (25, 32, 6));
    assert_eq!((c.base_lr, c.gamma), (0.001, 0.5));
    assert_eq!(c.patches_per_image, 64);
    assert_eq!(c.seed, 0);
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        TrainConfig { level: 1.2, ..small_config() },
        TrainConfig { batch: 0, ..small_config() },
        TrainConfig { step_size: 0, ..small_config() },
        TrainConfig { base_lr: -1.0, ..small_config() },
        TrainConfig { patch_size: 15, ..small_config() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
    }
}

#[test]
fn zero_model_without_noise_has_zero_loss() {
    let mut p = ModelParams::<f32>::zeros(ArchConfig::default()).unwrap();
    let mut adam = AdamState::new(&p);
    let config = TrainConfig { level: 0.0, ..small_config() };
    let stats = train_epoch(&mut p, &mut adam, &corpus(2, 3), &config, 0, 0.001).unwrap();
    assert_eq!(stats.loss, 0.0);
    assert_eq!(stats.psnr, f64::INFINITY);
}

#[test]
fn non_finite_loss_aborts_without_updating() {
    let mut p = init_params::<f32>(ArchConfig::default(), 0).unwrap();
    p.get_mut("sen.tail.bias").unwrap().data_mut()[0] = f32::NAN;
    let before = p.clone();
    let mut adam = AdamState::new(&p);
    let x = to_tensor::<f32>(&synthetic_image(1, 8, 8));
    let err = train_step(&mut p, &mut adam, x.clone(), x, 0.001).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert_eq!(bits(&p), bits(&before));
    assert_eq!(adam.step, 0);
}

#[test]
fn runs_are_bit_reproducible() {
    let run = || fit_with_corpus(&small_config(), &corpus(2, 1), &corpus(1, 9), None, |_, _| Ok(())).unwrap();
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(ra.len(), 2);
    for (x, y) in ra.iter().zip(&rb) {
        assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
        assert_eq!(x.val_loss.to_bits(), y.val_loss.to_bits());
    }
    assert_eq!(bits(&a.params), bits(&b.params));
    assert_eq!(a.adam, b.adam);

    let other = TrainConfig { seed: 12, ..small_config() };
    let (c, _) = fit_with_corpus(&other, &corpus(2, 1), &corpus(1, 9), None, |_, _| Ok(())).unwrap();
    assert_ne!(bits(&a.params), bits(&c.params));
}

#[test]
fn records_follow_the_epoch_count_and_schedule() {
    let config = TrainConfig { epochs: 3, step_size: 2, ..small_config() };
    let mut seen = Vec::new();
    let (ckpt, records) = fit_with_corpus(&config, &corpus(1, 1), &corpus(1, 9), None, |c, r| {
        seen.push((c.epoch, r.len()));
        Ok(())
    })
    .unwrap();
    assert_eq!(records.len(), 3);
    assert_eq!(ckpt.epoch, 3);
    assert_eq!(seen, vec![(1, 1), (2, 2), (3, 3)]);
    assert_eq!(records.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert!(records.iter().all(|r| r.train_loss.is_finite() && r.val_psnr.is_finite()));
    assert_eq!(ckpt.adam.as_ref().unwrap().step, 3);
}

#[test]
fn default_schedule_over_25_epochs() {
    let s = TrainConfig::default().schedule();
    let lrs: Vec<f64> = (0..25).map(|e| s.lr_at(e)).collect();
    let expect = |e: usize| match e {
        0..=5 => 0.001,
        6..=11 => 0.0005,
        12..=17 => 0.00025,
        18..=23 => 0.000125,
        _ => 0.0000625,
    };
    for (e, lr) in lrs.iter().enumerate() {
        assert_eq!(*lr, expect(e), "epoch {e}");
    }
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let full = TrainConfig { epochs: 3, ..small_config() };
    let (train, val) = (corpus(2, 1), corpus(1, 9));
    let (whole, whole_records) = fit_with_corpus(&full, &train, &val, None, |_, _| Ok(())).unwrap();

    let first = TrainConfig { epochs: 1, ..full };
    let (partial, _) = fit_with_corpus(&first, &train, &val, None, |_, _| Ok(())).unwrap();
    let reloaded = decode(&encode(&partial).unwrap()).unwrap();
    let (resumed, resumed_records) = fit_with_corpus(&full, &train, &val, Some(reloaded), |_, _| Ok(())).unwrap();

    assert_eq!(resumed.epoch, 3);
    assert_eq!(resumed_records.len(), 2);
    assert_eq!(resumed_records[..], whole_records[1..]);
    assert_eq!(bits(&resumed.params), bits(&whole.params));
    assert_eq!(resumed.adam, whole.adam);
}

#[test]
fn validation_is_repeatable_and_exact_for_identity() {
    let images = corpus(2, 5);
    let mut zero = ModelParams::<f32>::zeros(ArchConfig::default()).unwrap();
    let stats = validate(&mut zero, &images, 0.0, 0).unwrap();
    assert_eq!(stats.loss, 0.0);
    assert_eq!(stats.psnr, f64::INFINITY);

    let mut ckpt = trained_checkpoint();
    let a = validate(&mut ckpt.params, &images, 0.3, 4).unwrap();
    let b = validate(&mut ckpt.params, &images, 0.3, 4).unwrap();
    assert_eq!(a, b);
    assert!(validate(&mut ckpt.params, &[], 0.3, 4).is_err());
}

#[test]
fn noise_seeds_are_never_reused() {
    let mut seen = HashSet::new();
    for epoch in 0..25 {
        for batch in 0..64 {
            for index in 0..32 {
                assert!(seen.insert(noise_seed(0, epoch, batch, index)), "({epoch}, {batch}, {index})");
            }
        }
    }
    let val: HashSet<u64> = (0..100).map(|i| validation_seed(0, i)).collect();
    assert_eq!(val.len(), 100);
    assert!(val.is_disjoint(&seen));
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let ckpt = trained_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.rtfn");
    save_checkpoint(&ckpt, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, ckpt);
    assert_eq!(bits(&loaded.params), bits(&ckpt.params));

    let again = dir.path().join("again.rtfn");
    save_checkpoint(&loaded, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    let x = to_tensor::<f32>(&synthetic_image(3, 20, 18));
    let (a, _) = restore(&mut ckpt.params.clone(), x.clone(), Mode::Eval).unwrap();
    let (b, _) = restore(&mut loaded.params.clone(), x, Mode::Eval).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_without_optimizer_state() {
    let mut ckpt = trained_checkpoint();
    ckpt.adam = None;
    let back = decode(&encode(&ckpt).unwrap()).unwrap();
    assert_eq!(back, ckpt);
}

#[test]
fn malformed_checkpoints_are_rejected() {
    let ckpt = trained_checkpoint();
    let bytes = encode(&ckpt).unwrap();

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(decode(&magic), Err(Error::Checkpoint(m)) if m.contains("magic")));

    let mut version = bytes.clone();
    version[4] = 2;
    assert!(matches!(decode(&version), Err(Error::Checkpoint(m)) if m.contains("version")));

    // first extent of the first tensor: 32 output channels → 31
    let name = b"nsn.head.weight";
    let at = bytes.windows(name.len()).position(|w| w == name).unwrap() + name.len();
    assert_eq!(bytes[at], 4);
    let mut shape = bytes.clone();
    shape[at + 1] = 31;
    assert!(matches!(decode(&shape), Err(Error::Checkpoint(m)) if m.contains("shape")));

    let last = format!("adam.v.{}", ckpt.params.tensors.keys().last().unwrap());
    let cut = &bytes[..bytes.len() - 3];
    match decode(cut) {
        Err(Error::Truncated(name)) => assert_eq!(name, last),
        other => panic!("expected truncation, got {other:?}"),
    }
    assert!(matches!(decode(&bytes[..10]), Err(Error::Checkpoint(_))));

    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(decode(&trailing).is_err());
}

#[test]
fn fit_writes_curves_and_checkpoint_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let (train_dir, val_dir) = (dir.path().join("train"), dir.path().join("val"));
    std::fs::create_dir_all(&train_dir).unwrap();
    std::fs::create_dir_all(&val_dir).unwrap();
    for (i, img) in corpus(2, 1).iter().enumerate() {
        write_image(img, train_dir.join(format!("{i}.pgm"))).unwrap();
    }
    write_image(&corpus(1, 9)[0], val_dir.join("v.pgm")).unwrap();
    std::fs::write(train_dir.join("notes.txt"), "ignored").unwrap();

    let paths = |tag: &str| RunPaths {
        train_dir: train_dir.clone(),
        val_dir: val_dir.clone(),
        checkpoint: Some(dir.path().join(format!("{tag}.rtfn"))),
        curves: Some(dir.path().join(format!("{tag}.csv"))),
        resume: None,
    };
    let config = TrainConfig { epochs: 3, ..small_config() };
    let (_, records) = fit(&config, &paths("a")).unwrap();
    fit(&config, &paths("b")).unwrap();
    let csv_a = std::fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(csv_a, std::fs::read(dir.path().join("b.csv")).unwrap());
    assert_eq!(read_curves(dir.path().join("a.csv")).unwrap().len(), 3);
    assert_eq!(records.len(), 3);

    // stop after one epoch, then resume into the same files
    fit(&TrainConfig { epochs: 1, ..config }, &paths("c")).unwrap();
    let resume = RunPaths {
        resume: Some(dir.path().join("c.rtfn")),
        ..paths("c")
    };
    let (ckpt, all) = fit(&config, &resume).unwrap();
    assert_eq!(ckpt.epoch, 3);
    assert_eq!(all.len(), 3);
    assert_eq!(std::fs::read(dir.path().join("c.csv")).unwrap(), csv_a);
    assert_eq!(
        std::fs::read(dir.path().join("c.rtfn")).unwrap(),
        std::fs::read(dir.path().join("a.rtfn")).unwrap()
    );
}

#[test]
fn missing_or_empty_corpus_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let paths = RunPaths {
        train_dir: dir.path().to_path_buf(),
        val_dir: dir.path().to_path_buf(),
        ..RunPaths::default()
    };
    assert!(matches!(fit(&small_config(), &paths), Err(Error::Config(_))));
    let missing = RunPaths {
        train_dir: dir.path().join("nope"),
        ..paths
    };
    assert!(matches!(fit(&small_config(), &missing), Err(Error::Io(_))));
    assert!(fit_with_corpus(&small_config(), &[], &corpus(1, 1), None, |_, _| Ok(())).is_err());
}

#[test]
fn channel_mismatch_is_reported() {
    let mut p = init_params::<f32>(ArchConfig::default(), 0).unwrap();
    let rgb = ImageBuffer::filled(16, 16, 3, 100).unwrap();
    assert!(matches!(validate(&mut p, &[rgb], 0.3, 0), Err(Error::Config(_))));
    let _ = Tensor::<f32>::zeros(&[1]).unwrap();
}
