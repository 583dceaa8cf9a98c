//! Binary checkpoint files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "RTFN"  version:u32
//! config block: 10 × u32 architecture fields, then
//!   level:f64 epochs:u32 batch:u32 base_lr:f64 step_size:u32 gamma:f64
//!   patches_per_image:u32 patch_size:u32 seed_lo:u32 seed_hi:u32
//!   epoch:u32 has_adam:u32 adam_step_lo:u32 adam_step_hi:u32
//! tensor count:u32
//! per tensor: name_len:u16 name:utf8 rank:u8 extents:rank×u32 payload:f32…
//! ```
//!
//! Tensors appear in parameter layout order, followed by `<norm>.running_mean`
//! and `<norm>.running_var` for every batch-norm layer, followed (when
//! `has_adam` is 1) by `adam.m.<param>` and `adam.v.<param>` pairs.

use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::image::write_atomic;
use crate::model::{layout, ArchConfig, ModelParams};
use crate::optim::AdamState;
use crate::tape::RunningStats;
use crate::tensor::Tensor;

use super::TrainConfig;

pub const MAGIC: &[u8; 4] = b"RTFN";
pub const VERSION: u32 = 1;

/// Everything needed to resume training or to run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: u32,
    pub params: ModelParams<f32>,
    pub adam: Option<AdamState<f32>>,
}

impl Checkpoint {
    pub fn arch(&self) -> ArchConfig {
        self.params.arch
    }
}

fn split(v: u64) -> [u32; 2] {
    [v as u32, (v >> 32) as u32]
}

fn join(lo: u32, hi: u32) -> u64 {
    u64::from(lo) | (u64::from(hi) << 32)
}

fn usize_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} does not fit in u32")))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn tensor(&mut self, name: &str, dims: &[usize], data: &[f32]) -> Result<()> {
        let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
        self.0.extend_from_slice(&len.to_le_bytes());
        self.0.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(dims.len()).map_err(|_| Error::Checkpoint(format!("rank of `{name}` too large")))?;
        self.0.push(rank);
        for &d in dims {
            self.u32(usize_u32(d, "extent")?);
        }
        self.0.reserve(data.len() * 4);
        for v in data {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }
}

/// `(name, dims)` of every tensor a checkpoint for `arch` must hold.
fn expected_tensors(arch: &ArchConfig, with_adam: bool) -> Vec<(String, Vec<usize>)> {
    let (specs, norms) = layout(arch);
    let mut out: Vec<(String, Vec<usize>)> = specs.iter().map(|s| (s.name.clone(), s.dims.clone())).collect();
    for (name, c) in &norms {
        out.push((format!("{name}.running_mean"), vec![*c]));
        out.push((format!("{name}.running_var"), vec![*c]));
    }
    if with_adam {
        for s in &specs {
            out.push((format!("adam.m.{}", s.name), s.dims.clone()));
            out.push((format!("adam.v.{}", s.name), s.dims.clone()));
        }
    }
    out
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.params.validate()?;
    let arch = ckpt.params.arch;
    let cfg = &ckpt.config;
    if cfg.arch != arch {
        return Err(Error::Checkpoint("config architecture differs from the parameters".into()));
    }
    let mut w = Writer(MAGIC.to_vec());
    w.u32(VERSION);
    for v in [
        arch.channels,
        arch.features,
        arch.nsn_depth,
        arch.sen_depth,
        arch.cvt_depth,
        arch.heads,
        arch.kernel,
        arch.stride,
        arch.padding,
        arch.reduction,
    ] {
        w.u32(usize_u32(v, "architecture field")?);
    }
    w.f64(cfg.level);
    w.u32(cfg.epochs);
    w.u32(usize_u32(cfg.batch, "batch")?);
    w.f64(cfg.base_lr);
    w.u32(cfg.step_size);
    w.f64(cfg.gamma);
    w.u32(usize_u32(cfg.patches_per_image, "patches per image")?);
    w.u32(usize_u32(cfg.patch_size, "patch size")?);
    split(cfg.seed).into_iter().for_each(|v| w.u32(v));
    w.u32(ckpt.epoch);
    w.u32(u32::from(ckpt.adam.is_some()));
    split(ckpt.adam.as_ref().map_or(0, |a| a.step)).into_iter().for_each(|v| w.u32(v));

    let expected = expected_tensors(&arch, ckpt.adam.is_some());
    w.u32(usize_u32(expected.len(), "tensor count")?);
    for (name, t) in &ckpt.params.tensors {
        w.tensor(name, t.dims(), t.data())?;
    }
    for (name, stats) in &ckpt.params.running {
        w.tensor(&format!("{name}.running_mean"), &[stats.mean.len()], &stats.mean)?;
        w.tensor(&format!("{name}.running_var"), &[stats.var.len()], &stats.var)?;
    }
    if let Some(adam) = &ckpt.adam {
        for (name, t) in &ckpt.params.tensors {
            let (m, v) = match (adam.first.get(name), adam.second.get(name)) {
                (Some(m), Some(v)) if m.len() == t.len() && v.len() == t.len() => (m, v),
                _ => return Err(Error::Checkpoint(format!("optimizer state for `{name}` is missing or mis-sized"))),
            };
            w.tensor(&format!("adam.m.{name}"), t.dims(), m)?;
            w.tensor(&format!("adam.v.{name}"), t.dims(), v)?;
        }
    }
    Ok(w.0)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let bytes: &'a [u8] = self.bytes;
        let out = bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

fn header_truncated() -> Error {
    Error::Checkpoint("file ends inside the header".into())
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4) != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("bad magic bytes (not an RTFN checkpoint)".into()));
    }
    let version = r.u32().ok_or_else(header_truncated)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version} (expected {VERSION})")));
    }
    let mut a = [0usize; 10];
    for slot in &mut a {
        *slot = r.u32().ok_or_else(header_truncated)? as usize;
    }
    let arch = ArchConfig {
        channels: a[0],
        features: a[1],
        nsn_depth: a[2],
        sen_depth: a[3],
        cvt_depth: a[4],
        heads: a[5],
        kernel: a[6],
        stride: a[7],
        padding: a[8],
        reduction: a[9],
    };
    arch.validate()?;
    let level = r.f64().ok_or_else(header_truncated)?;
    let epochs = r.u32().ok_or_else(header_truncated)?;
    let batch = r.u32().ok_or_else(header_truncated)? as usize;
    let base_lr = r.f64().ok_or_else(header_truncated)?;
    let step_size = r.u32().ok_or_else(header_truncated)?;
    let gamma = r.f64().ok_or_else(header_truncated)?;
    let patches_per_image = r.u32().ok_or_else(header_truncated)? as usize;
    let patch_size = r.u32().ok_or_else(header_truncated)? as usize;
    let seed = join(r.u32().ok_or_else(header_truncated)?, r.u32().ok_or_else(header_truncated)?);
    let epoch = r.u32().ok_or_else(header_truncated)?;
    let has_adam = match r.u32().ok_or_else(header_truncated)? {
        0 => false,
        1 => true,
        other => return Err(Error::Checkpoint(format!("invalid optimizer flag {other}"))),
    };
    let adam_step = join(r.u32().ok_or_else(header_truncated)?, r.u32().ok_or_else(header_truncated)?);
    let config = TrainConfig {
        level,
        epochs,
        batch,
        base_lr,
        step_size,
        gamma,
        patches_per_image,
        patch_size,
        seed,
        arch,
    };

    let expected = expected_tensors(&arch, has_adam);
    let count = r.u32().ok_or_else(header_truncated)? as usize;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, architecture needs {}",
            expected.len()
        )));
    }
    let mut tensors: IndexMap<String, Tensor<f32>> = IndexMap::with_capacity(count);
    for (want_name, want_dims) in &expected {
        let truncated = || Error::Truncated(want_name.clone());
        let len = r.take(2).ok_or_else(truncated)?;
        let len = u16::from_le_bytes([len[0], len[1]]) as usize;
        let name = r.take(len).ok_or_else(truncated)?;
        let name = std::str::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if name != want_name {
            return Err(Error::Checkpoint(format!("found tensor `{name}` where `{want_name}` belongs")));
        }
        let rank = *r.take(1).ok_or_else(truncated)?.first().expect("one byte") as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32().ok_or_else(truncated)? as usize);
        }
        if &dims != want_dims {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {dims:?}, architecture needs {want_dims:?}"
            )));
        }
        let n: usize = dims.iter().product();
        let payload = r.take(n * 4).ok_or_else(truncated)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(name.to_string(), Tensor::new(&dims, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
    }

    let (specs, norms) = layout(&arch);
    let mut take = |name: &str| tensors.shift_remove(name).expect("validated above");
    let params_map: IndexMap<String, Tensor<f32>> = specs.iter().map(|s| (s.name.clone(), take(&s.name))).collect();
    let running: IndexMap<String, RunningStats<f32>> = norms
        .iter()
        .map(|(name, _)| {
            let mean = take(&format!("{name}.running_mean")).into_data();
            let var = take(&format!("{name}.running_var")).into_data();
            (name.clone(), RunningStats { mean, var })
        })
        .collect();
    let adam = has_adam.then(|| {
        let mut first = IndexMap::new();
        let mut second = IndexMap::new();
        for s in &specs {
            first.insert(s.name.clone(), take(&format!("adam.m.{}", s.name)).into_data());
            second.insert(s.name.clone(), take(&format!("adam.v.{}", s.name)).into_data());
        }
        AdamState {
            step: adam_step,
            first,
            second,
        }
    });
    Ok(Checkpoint {
        config,
        epoch,
        params: ModelParams {
            arch,
            tensors: params_map,
            running,
        },
        adam,
    })
}

/// Writes atomically (temporary file + rename).
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode(ckpt)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}
