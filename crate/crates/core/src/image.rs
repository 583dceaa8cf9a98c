//! 8-bit raster images: binary PGM/PPM I/O, conversion to and from unit-range
//! tensors, random patch extraction and mini-batch assembly.
//!
//! Only binary `P5` (gray) and `P6` (RGB) files with maxval 255 are read or
//! written; other formats must be converted beforehand.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Row-major image with interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub samples: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, samples: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidExtent(vec![height, width, channels]));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Config(format!("images have 1 or 3 channels, got {channels}")));
        }
        let expected = height * width * channels;
        if samples.len() != expected {
            return Err(Error::LengthMismatch {
                dims: vec![height, width, channels],
                expected,
                got: samples.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            samples,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// `(height, width, channels)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// The `size × size` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Config(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut samples = Vec::with_capacity(height * width * c);
        for row in top..top + height {
            let start = (row * self.width + left) * c;
            samples.extend_from_slice(&self.samples[start..start + width * c]);
        }
        Self::new(height, width, c, samples)
    }

    /// Encoded `P5`/`P6` bytes.
    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.samples);
        out
    }

    /// Parses a binary PGM/PPM file held in memory. `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Image {
            path: path.to_path_buf(),
            reason,
        };
        let channels = match bytes.get(..2) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            _ => return Err(fail("unknown magic number (expected P5 or P6)".into())),
        };
        let mut header = HeaderReader { bytes, pos: 2 };
        let mut fields = [0usize; 3];
        for (slot, what) in fields.iter_mut().zip(["width", "height", "maxval"]) {
            *slot = header.field().map_err(|e| fail(format!("{what}: {e}")))?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(fail(format!("maxval {maxval} is not supported (only 255)")));
        }
        // exactly one whitespace byte separates the header from the payload
        match bytes.get(header.pos) {
            Some(b) if b.is_ascii_whitespace() => header.pos += 1,
            _ => return Err(fail("missing whitespace before the payload".into())),
        }
        let expected = width * height * channels;
        let payload = &bytes[header.pos..];
        if payload.len() < expected {
            return Err(fail(format!(
                "truncated payload: {} of {expected} bytes",
                payload.len()
            )));
        }
        Self::new(height, width, channels, payload[..expected].to_vec()).map_err(|e| fail(e.to_string()))
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    /// Next decimal header field, skipping whitespace and `#` comments.
    fn field(&mut self) -> std::result::Result<usize, String> {
        loop {
            match self.bytes.get(self.pos) {
                None => return Err("header ends early".into()),
                Some(b'#') => {
                    while !matches!(self.bytes.get(self.pos), None | Some(b'\n' | b'\r')) {
                        self.pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(_) => break,
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err("expected a decimal number".into());
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|e| format!("{e}"))
    }
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    ImageBuffer::decode(&fs::read(path)?, path)
}

/// Writes `buffer` as PGM/PPM through a temporary file renamed into place.
pub fn write_image(buffer: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &buffer.encode())
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`, so
/// readers never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// `1 × C × H × W` tensor of `sample / 255`.
pub fn to_tensor<T: Real>(buffer: &ImageBuffer) -> Tensor<T> {
    let (h, w, c) = buffer.dims();
    let mut data = vec![T::zero(); h * w * c];
    for (i, px) in buffer.samples.chunks_exact(c).enumerate() {
        for (ch, &s) in px.iter().enumerate() {
            data[ch * h * w + i] = T::of(f64::from(s) / 255.0);
        }
    }
    Tensor::new(&[1, c, h, w], data).expect("dims match buffer")
}

/// Inverse of [`to_tensor`]: scales by 255, clamps to `[0, 255]` and rounds
/// half away from zero. NaN maps to 0.
pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<ImageBuffer> {
    let (c, h, w) = match *t.dims() {
        [1, c, h, w] if c == 1 || c == 3 => (c, h, w),
        _ => return Err(shape_err("from_tensor", format!("expected 1xCxHxW with C in {{1, 3}}, got {:?}", t.dims()))),
    };
    let mut samples = vec![0u8; h * w * c];
    for ch in 0..c {
        for i in 0..h * w {
            let v = t.data()[ch * h * w + i].as_f64() * 255.0;
            samples[i * c + ch] = if v.is_nan() { 0 } else { v.clamp(0.0, 255.0).round() as u8 };
        }
    }
    ImageBuffer::new(h, w, c, samples)
}

/// Random square crops of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet<T: Real = f32> {
    /// Index of the source image in its corpus.
    pub source: usize,
    pub size: usize,
    /// `(top, left)` of each patch.
    pub offsets: Vec<(usize, usize)>,
    /// `1 × C × size × size` tensors in `[0, 1]`.
    pub patches: Vec<Tensor<T>>,
}

/// `count` uniformly random top-left corners of fully in-bounds
/// `size × size` windows.
pub fn patch_offsets(buffer: &ImageBuffer, size: usize, count: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if size == 0 || buffer.height < size || buffer.width < size {
        return Err(Error::Config(format!(
            "{}x{} image is smaller than a {size}x{size} patch",
            buffer.height, buffer.width
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            (
                rng.random_range(0..=buffer.height - size),
                rng.random_range(0..=buffer.width - size),
            )
        })
        .collect())
}

/// Draws `count` random patches of image number `source`.
pub fn extract_patches<T: Real>(
    buffer: &ImageBuffer,
    source: usize,
    size: usize,
    count: usize,
    seed: u64,
) -> Result<PatchSet<T>> {
    let offsets = patch_offsets(buffer, size, count, seed)?;
    let patches = offsets
        .iter()
        .map(|&(top, left)| Ok(to_tensor(&buffer.crop(top, left, size, size)?)))
        .collect::<Result<_>>()?;
    Ok(PatchSet {
        source,
        size,
        offsets,
        patches,
    })
}

/// Seeded permutation of `0..n` cut into consecutive groups of at most
/// `batch`; the final group may be short.
pub fn batch_indices(n: usize, batch: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Config("nothing to batch".into()));
    }
    if batch == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks(batch).map(<[usize]>::to_vec).collect())
}

/// Shuffles `(noisy, clean)` pairs and stacks them into batches along the
/// leading axis.
pub fn make_batches<T: Real>(
    pairs: &[(Tensor<T>, Tensor<T>)],
    batch: usize,
    seed: u64,
) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
    let dims = pairs.first().map(|(n, _)| n.dims().to_vec()).unwrap_or_default();
    for (noisy, clean) in pairs {
        if noisy.dims() != dims || clean.dims() != dims {
            return Err(shape_err(
                "make_batches",
                format!("mixed shapes {:?} / {:?} vs {dims:?}", noisy.dims(), clean.dims()),
            ));
        }
    }
    batch_indices(pairs.len(), batch, seed)?
        .into_iter()
        .map(|group| {
            let noisy: Vec<Tensor<T>> = group.iter().map(|&i| pairs[i].0.clone()).collect();
            let clean: Vec<Tensor<T>> = group.iter().map(|&i| pairs[i].1.clone()).collect();
            Ok((Tensor::stack(&noisy)?, Tensor::stack(&clean)?))
        })
        .collect()
}
