//! Error metrics, per-epoch training curves and the reference PSNR table of
//! published salt-and-pepper denoisers.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::image::{write_atomic, ImageBuffer};
use crate::real::Real;
use crate::tensor::Tensor;

/// Mean squared difference over all elements, accumulated in `f64`.
pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(shape_err("mse", format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(sum_sq(a.data().iter().zip(b.data()).map(|(x, y)| x.as_f64() - y.as_f64())) / a.len() as f64)
}

fn sum_sq(diffs: impl Iterator<Item = f64>) -> f64 {
    diffs.map(|d| d * d).sum()
}

/// `10 · log10(peak² / mse)`; `f64::INFINITY` when `mse` is zero.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

/// PSNR of two 8-bit images with peak 255.
pub fn psnr_u8(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(shape_err("psnr_u8", format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let diffs = a.samples.iter().zip(&b.samples).map(|(&x, &y)| f64::from(x) - f64::from(y));
    Ok(psnr_from_mse(sum_sq(diffs) / a.samples.len() as f64, 255.0))
}

/// One epoch of training-curve data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_psnr: f64,
    pub val_psnr: f64,
}

pub const CURVE_HEADER: [&str; 5] = ["epoch", "train_loss", "val_loss", "train_psnr", "val_psnr"];

/// Shortest decimal rendering with six significant digits, `%g` style.
pub fn format_sig6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.into();
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn curves_to_string(records: &[MetricsRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CURVE_HEADER)?;
    for r in records {
        w.write_record([
            r.epoch.to_string(),
            format_sig6(r.train_loss),
            format_sig6(r.val_loss),
            format_sig6(r.train_psnr),
            format_sig6(r.val_psnr),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("ascii csv"))
}

/// Writes the curves CSV atomically.
pub fn curves_to_csv(records: &[MetricsRecord], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), curves_to_string(records)?.as_bytes())
}

pub fn read_curves(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(CURVE_HEADER) {
        return Err(Error::Config(format!("unexpected curves header {:?}", r.headers()?)));
    }
    r.records()
        .map(|row| {
            let row = row?;
            let num = |i: usize| -> Result<f64> {
                row[i]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad number `{}` in curves", &row[i])))
            };
            Ok(MetricsRecord {
                epoch: row[0]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad epoch `{}`", &row[0])))?,
                train_loss: num(1)?,
                val_loss: num(2)?,
                train_psnr: num(3)?,
                val_psnr: num(4)?,
            })
        })
        .collect()
}

pub const IMAGES: [&str; 4] = ["Lena", "Bridge", "Pepper", "BSD300"];
pub const LEVELS: [u32; 3] = [30, 50, 70];
pub const METHODS: [&str; 7] = ["DBA", "NASNLM", "PARIGI", "NLSF", "NLSF-MLP", "NLSF-CNN", "Ours"];

/// Published PSNR (dB) per image and noise level, columns in [`METHODS`]
/// order.
const TABLE: [[[f64; 7]; 3]; 4] = [
    [
        [34.42, 28.09, 33.90, 34.20, 30.80, 35.38, 38.87],
        [30.11, 26.15, 29.91, 30.12, 29.28, 32.55, 34.62],
        [25.84, 25.97, 25.22, 25.79, 27.63, 30.18, 32.85],
    ],
    [
        [28.07, 23.68, 25.19, 28.21, 25.19, 28.71, 32.24],
        [24.24, 22.91, 22.61, 22.45, 23.86, 26.01, 28.26],
        [21.21, 22.63, 20.06, 21.02, 22.61, 24.11, 26.44],
    ],
    [
        [26.85, 22.38, 28.88, 32.27, 30.01, 32.99, 31.70],
        [25.27, 21.82, 25.44, 27.99, 28.57, 30.23, 30.47],
        [22.11, 21.58, 21.46, 23.04, 27.04, 27.70, 29.27],
    ],
    [
        [29.92, 25.74, 12.04, 30.01, 29.77, 30.87, 44.56],
        [26.32, 24.50, 6.01, 26.25, 26.19, 27.84, 38.03],
        [22.81, 24.65, 5.42, 22.85, 26.19, 25.35, 34.96],
    ],
];

/// One published PSNR value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Baseline {
    pub image: &'static str,
    pub level: u32,
    pub method: &'static str,
    pub psnr: f64,
}

/// The 12 × 7 reference table.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineTable {
    pub rows: Vec<Baseline>,
}

impl Default for BaselineTable {
    fn default() -> Self {
        Self::published()
    }
}

fn index_of<T: PartialEq + Copy>(items: &[T], key: T) -> Option<usize> {
    items.iter().position(|&k| k == key)
}

impl BaselineTable {
    pub fn published() -> Self {
        let mut rows = Vec::with_capacity(84);
        for (i, image) in IMAGES.iter().enumerate() {
            for (l, level) in LEVELS.iter().enumerate() {
                for (m, method) in METHODS.iter().enumerate() {
                    rows.push(Baseline {
                        image,
                        level: *level,
                        method,
                        psnr: TABLE[i][l][m],
                    });
                }
            }
        }
        Self { rows }
    }

    /// Case-insensitive lookup of image and method names.
    pub fn get(&self, image: &str, level: u32, method: &str) -> Result<f64> {
        self.rows
            .iter()
            .find(|b| b.image.eq_ignore_ascii_case(image) && b.level == level && b.method.eq_ignore_ascii_case(method))
            .map(|b| b.psnr)
            .ok_or_else(|| Error::UnknownKey(format!("{image}/{level}%/{method}")))
    }

    fn row(&self, image: &str, level: u32) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|b| b.image == image && b.level == level)
            .map(|b| b.psnr)
            .collect()
    }
}

/// A measured PSNR keyed like a table row.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasuredRow {
    pub image: String,
    pub level: u32,
    pub psnr: f64,
}

/// Aligned plain-text table of every published row, plus a `Measured`
/// column when `measured` is non-empty. The best value of each row carries a
/// trailing `*`.
pub fn compare_report(measured: &[MeasuredRow], baselines: &BaselineTable) -> Result<String> {
    let mut by_key: Vec<Option<f64>> = vec![None; IMAGES.len() * LEVELS.len()];
    for m in measured {
        let i = IMAGES
            .iter()
            .position(|k| k.eq_ignore_ascii_case(&m.image))
            .ok_or_else(|| Error::UnknownKey(format!("image `{}`", m.image)))?;
        let l = index_of(&LEVELS, m.level).ok_or_else(|| Error::UnknownKey(format!("noise level {}%", m.level)))?;
        by_key[i * LEVELS.len() + l] = Some(m.psnr);
    }
    let with_measured = !measured.is_empty();
    let mut header: Vec<String> = vec!["Image".into(), "Level".into()];
    header.extend(METHODS.iter().map(|m| m.to_string()));
    if with_measured {
        header.push("Measured".into());
    }
    let mut lines = vec![header];
    for (i, image) in IMAGES.iter().enumerate() {
        for (l, level) in LEVELS.iter().enumerate() {
            let mut values: Vec<Option<f64>> = baselines.row(image, *level).into_iter().map(Some).collect();
            if with_measured {
                values.push(by_key[i * LEVELS.len() + l]);
            }
            let best = values.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut line = vec![image.to_string(), format!("{level}%")];
            line.extend(values.iter().map(|v| match v {
                Some(v) if *v == best => format!("{v:.2}*"),
                Some(v) => format!("{v:.2}"),
                None => "-".into(),
            }));
            lines.push(line);
        }
    }
    let widths: Vec<usize> = (0..lines[0].len())
        .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for line in &lines {
        let cells: Vec<String> = line
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, w))| if c < 2 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        writeln!(out, "{}", cells.join("  ").trim_end()).expect("write to string");
    }
    Ok(out)
}
