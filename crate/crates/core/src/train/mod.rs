//! Training and validation loops, seed derivation and checkpoints.
//!
//! Every random choice of a run is derived from [`TrainConfig::seed`] by
//! hashing it together with a domain tag and the position of the choice
//! (epoch, batch, member), so the whole run is a pure function of the config
//! and the corpus. Noise is re-drawn for every batch; validation noise is
//! fixed per image so validation curves are comparable across epochs.

mod checkpoint;

pub use checkpoint::{decode, encode, load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{batch_indices, patch_offsets, read_image, to_tensor, from_tensor, ImageBuffer};
use crate::metrics::{curves_to_csv, psnr_from_mse, read_curves, MetricsRecord};
use crate::model::{restore, ArchConfig, ModelParams, Session};
use crate::noise::{add_salt_pepper, NoiseConfig};
use crate::optim::{adam_step, init_params, AdamState, LrSchedule};
use crate::tape::{Mode, Tape};
use crate::tensor::Tensor;

/// Training hyperparameters. File locations live in [`RunPaths`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    /// Salt-and-pepper level the model is trained for.
    pub level: f64,
    pub epochs: u32,
    pub batch: usize,
    pub base_lr: f64,
    pub step_size: u32,
    pub gamma: f64,
    pub patches_per_image: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            level: 0.3,
            epochs: 25,
            batch: 32,
            base_lr: 0.001,
            step_size: 6,
            gamma: 0.5,
            patches_per_image: 64,
            patch_size: 64,
            seed: 0,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr,
            step_size: self.step_size,
            gamma: self.gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        NoiseConfig::new(self.level, 0)?;
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.batch == 0 || self.patches_per_image == 0 {
            return fail("batch and patches per image must be at least 1");
        }
        if self.step_size == 0 {
            return fail("step size must be at least 1");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) || !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return fail("learning rate and gamma must be positive");
        }
        if self.patch_size == 0 || self.patch_size % self.arch.reduction != 0 {
            return fail("patch size must be a positive multiple of the reduction factor");
        }
        Ok(())
    }
}

/// Where [`fit`] reads images and writes its artifacts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunPaths {
    pub train_dir: PathBuf,
    pub val_dir: PathBuf,
    /// Rewritten after every epoch.
    pub checkpoint: Option<PathBuf>,
    /// Rewritten after every epoch.
    pub curves: Option<PathBuf>,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
}

const TAG_PATCH: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_NOISE: u64 = 3;
const TAG_VAL: u64 = 4;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one random choice, hashed from the run seed and its coordinates.
pub fn derive_seed(seed: u64, tag: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(splitmix(seed ^ splitmix(tag)), |h, &c| splitmix(h ^ c))
}

/// Noise seed of member `index` of batch `batch` in `epoch`.
pub fn noise_seed(seed: u64, epoch: u32, batch: usize, index: usize) -> u64 {
    derive_seed(seed, TAG_NOISE, &[u64::from(epoch), batch as u64, index as u64])
}

/// Noise seed of validation image `index`, identical in every epoch.
pub fn validation_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, TAG_VAL, &[index as u64])
}

/// Epoch-mean loss and PSNR (dB, peak 1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub psnr: f64,
}

/// One optimizer step on a batch; returns the MSE loss before the update.
pub fn train_step(
    params: &mut ModelParams<f32>,
    adam: &mut AdamState<f32>,
    noisy: Tensor<f32>,
    clean: Tensor<f32>,
    lr: f64,
) -> Result<f64> {
    // a rejected step must leave the running statistics untouched too
    let running = params.running.clone();
    let mut tape = Tape::new();
    let mut session = Session::bind(&mut tape, params, Mode::Train);
    let x = session.input(noisy);
    let out = session.rtfnet_forward(x)?;
    let vars = session.vars().clone();
    let target = tape.constant(clean);
    let loss = tape.mse(out.restored, target)?;
    let value = f64::from(tape.value(loss).data()[0]);
    if !value.is_finite() {
        drop(tape);
        params.running = running;
        return Err(Error::NonFinite(format!("training loss ({value}) at optimizer step {}", adam.step + 1)));
    }
    tape.backward(loss)?;
    params.collect_grads(&tape, &vars)?;
    drop(tape);
    let stepped = adam_step(params, adam, lr);
    params.clear_grads();
    stepped?;
    Ok(value)
}

fn check_channels(images: &[ImageBuffer], arch: &ArchConfig) -> Result<()> {
    match images.iter().position(|img| img.channels != arch.channels) {
        Some(i) => Err(Error::Config(format!(
            "image {i} has {} channels, the model expects {}",
            images[i].channels, arch.channels
        ))),
        None => Ok(()),
    }
}

/// One pass over freshly drawn patches of `corpus`.
pub fn train_epoch(
    params: &mut ModelParams<f32>,
    adam: &mut AdamState<f32>,
    corpus: &[ImageBuffer],
    config: &TrainConfig,
    epoch: u32,
    lr: f64,
) -> Result<EpochStats> {
    check_channels(corpus, &params.arch)?;
    let size = config.patch_size;
    let mut entries: Vec<(usize, (usize, usize))> = Vec::new();
    for (i, img) in corpus.iter().enumerate() {
        let seed = derive_seed(config.seed, TAG_PATCH, &[u64::from(epoch), i as u64]);
        let offsets = patch_offsets(img, size, config.patches_per_image, seed)
            .map_err(|e| Error::Config(format!("training image {i}: {e}")))?;
        entries.extend(offsets.into_iter().map(|o| (i, o)));
    }
    let shuffle = derive_seed(config.seed, TAG_SHUFFLE, &[u64::from(epoch)]);
    let (mut loss_sum, mut psnr_sum, mut seen) = (0.0, 0.0, 0usize);
    for (b, group) in batch_indices(entries.len(), config.batch, shuffle)?.iter().enumerate() {
        let mut noisy = Vec::with_capacity(group.len());
        let mut clean = Vec::with_capacity(group.len());
        for (k, &e) in group.iter().enumerate() {
            let (img, (top, left)) = entries[e];
            let patch = corpus[img].crop(top, left, size, size)?;
            let cfg = NoiseConfig::new(config.level, noise_seed(config.seed, epoch, b, k))?;
            noisy.push(to_tensor(&add_salt_pepper(&patch, cfg)));
            clean.push(to_tensor(&patch));
        }
        let loss = train_step(params, adam, Tensor::stack(&noisy)?, Tensor::stack(&clean)?, lr)?;
        log::debug!("epoch {epoch} batch {b}: loss {loss:.6}");
        loss_sum += loss * group.len() as f64;
        psnr_sum += psnr_from_mse(loss, 1.0) * group.len() as f64;
        seen += group.len();
    }
    Ok(EpochStats {
        loss: loss_sum / seen as f64,
        psnr: psnr_sum / seen as f64,
    })
}

/// Restored and transition images of one noisy image, quantized to 8 bits.
pub fn denoise(params: &mut ModelParams<f32>, noisy: &ImageBuffer) -> Result<(ImageBuffer, ImageBuffer)> {
    check_channels(std::slice::from_ref(noisy), &params.arch)?;
    let (restored, transition) = restore(params, to_tensor(noisy), Mode::Eval)?;
    Ok((from_tensor(&restored)?, from_tensor(&transition)?))
}

/// Whole-image evaluation in eval mode with fixed per-image noise.
///
/// Loss and PSNR (peak 1) are measured on the unquantized unit-range output
/// and averaged over images.
pub fn validate(params: &mut ModelParams<f32>, images: &[ImageBuffer], level: f64, seed: u64) -> Result<EpochStats> {
    if images.is_empty() {
        return Err(Error::Config("no validation images".into()));
    }
    check_channels(images, &params.arch)?;
    let (mut loss_sum, mut psnr_sum) = (0.0, 0.0);
    for (i, img) in images.iter().enumerate() {
        let noisy = add_salt_pepper(img, NoiseConfig::new(level, validation_seed(seed, i))?);
        let (restored, _) = restore(params, to_tensor(&noisy), Mode::Eval)?;
        let loss = crate::metrics::mse(&restored, &to_tensor(img))?;
        loss_sum += loss;
        psnr_sum += psnr_from_mse(loss, 1.0);
    }
    let n = images.len() as f64;
    Ok(EpochStats {
        loss: loss_sum / n,
        psnr: psnr_sum / n,
    })
}

/// Runs the remaining epochs of `config` on in-memory images, starting from
/// `start` (or a fresh initialization). `after_epoch` sees the checkpoint and
/// all records so far after every epoch.
pub fn fit_with_corpus(
    config: &TrainConfig,
    train: &[ImageBuffer],
    val: &[ImageBuffer],
    start: Option<Checkpoint>,
    mut after_epoch: impl FnMut(&Checkpoint, &[MetricsRecord]) -> Result<()>,
) -> Result<(Checkpoint, Vec<MetricsRecord>)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training corpus".into()));
    }
    let mut ckpt = match start {
        Some(c) => {
            if c.params.arch != config.arch {
                return Err(Error::Config("checkpoint architecture differs from the requested one".into()));
            }
            c
        }
        None => {
            let params = init_params(config.arch, config.seed)?;
            let adam = AdamState::new(&params);
            Checkpoint {
                config: *config,
                epoch: 0,
                params,
                adam: Some(adam),
            }
        }
    };
    ckpt.config = *config;
    let mut adam = ckpt.adam.take().unwrap_or_else(|| AdamState::new(&ckpt.params));
    let schedule = config.schedule();
    let mut records = Vec::new();
    while ckpt.epoch < config.epochs {
        let epoch = ckpt.epoch;
        let lr = schedule.lr_at(epoch);
        let train_stats = train_epoch(&mut ckpt.params, &mut adam, train, config, epoch, lr)?;
        let val_stats = validate(&mut ckpt.params, val, config.level, config.seed)?;
        let record = MetricsRecord {
            epoch,
            train_loss: train_stats.loss,
            val_loss: val_stats.loss,
            train_psnr: train_stats.psnr,
            val_psnr: val_stats.psnr,
        };
        log::info!(
            "epoch {epoch}: lr {lr:e}, train loss {:.6} ({:.3} dB), val loss {:.6} ({:.3} dB)",
            record.train_loss,
            record.train_psnr,
            record.val_loss,
            record.val_psnr
        );
        records.push(record);
        ckpt.epoch += 1;
        ckpt.adam = Some(adam);
        after_epoch(&ckpt, &records)?;
        adam = ckpt.adam.take().expect("just stored");
    }
    ckpt.adam = Some(adam);
    Ok((ckpt, records))
}

/// Every `.pgm`, `.ppm` and `.pnm` file of `dir`, in file-name order.
/// PGM/PPM files directly inside `dir`, sorted by path.
pub fn load_dir_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| {
        p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "ppm" | "pnm"))
    });
    paths.sort();
    Ok(paths)
}

/// Reads every image listed by [`load_dir_paths`].
pub fn load_dir(dir: &Path) -> Result<Vec<ImageBuffer>> {
    load_dir_paths(dir)?.iter().map(read_image).collect()
}

/// Loads the corpus from disk, optionally resumes, trains, and writes the
/// curves CSV and checkpoint after every epoch.
///
/// On resume, rows of an existing curves file up to the checkpoint's epoch
/// are kept, so the file always has one row per completed epoch.
pub fn fit(config: &TrainConfig, paths: &RunPaths) -> Result<(Checkpoint, Vec<MetricsRecord>)> {
    let train = load_dir(&paths.train_dir)?;
    if train.is_empty() {
        return Err(Error::Config(format!("no PGM/PPM images in {}", paths.train_dir.display())));
    }
    let val = load_dir(&paths.val_dir)?;
    if val.is_empty() {
        return Err(Error::Config(format!("no PGM/PPM images in {}", paths.val_dir.display())));
    }
    let start = paths.resume.as_deref().map(load_checkpoint).transpose()?;
    let mut earlier = Vec::new();
    if let (Some(ckpt), Some(curves)) = (&start, &paths.curves) {
        if curves.exists() {
            earlier = read_curves(curves)?;
            earlier.retain(|r| r.epoch < ckpt.epoch);
        }
    }
    let (ckpt, new) = fit_with_corpus(config, &train, &val, start, |ckpt, records| {
        if let Some(curves) = &paths.curves {
            let all: Vec<MetricsRecord> = earlier.iter().chain(records).copied().collect();
            curves_to_csv(&all, curves)?;
        }
        if let Some(path) = &paths.checkpoint {
            save_checkpoint(ckpt, path)?;
        }
        Ok(())
    })?;
    earlier.extend(new);
    Ok((ckpt, earlier))
}
