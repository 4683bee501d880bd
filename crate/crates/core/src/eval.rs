//! Benchmark-folder evaluation: downscale, super-resolve, quantize, crop the
//! border, score.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::{self, ImageBuffer, MetricSpace};
use crate::model::Haat;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Anything that maps `[1, 3, H, W]` to `[1, 3, sH, sW]` in unit range.
pub trait Upscaler: Sync {
    fn scale(&self) -> usize;
    fn upscale(&self, lr: &Tensor<f32>) -> Result<Tensor<f32>>;
}

pub struct ModelUpscaler {
    pub model: Haat,
    pub store: ParamStore<f32>,
}

impl Upscaler for ModelUpscaler {
    fn scale(&self) -> usize {
        self.model.config.scale
    }

    fn upscale(&self, lr: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.model.upscale(&self.store, lr)
    }
}

/// Plain bicubic interpolation, the usual baseline.
pub struct Bicubic(pub usize);

impl Upscaler for Bicubic {
    fn scale(&self) -> usize {
        self.0
    }

    fn upscale(&self, lr: &Tensor<f32>) -> Result<Tensor<f32>> {
        imaging::upscale(lr, self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub records: Vec<ImageRecord>,
    pub scale: usize,
    pub border: usize,
    /// Mean over finite PSNR values.
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Rows left out of `mean_psnr` because they were lossless.
    pub infinite: usize,
}

impl EvalReport {
    pub fn from_records(mut records: Vec<ImageRecord>, scale: usize) -> Self {
        records.sort_by(|a, b| a.name.cmp(&b.name));
        let finite: Vec<f64> = records.iter().map(|r| r.psnr).filter(|p| p.is_finite()).collect();
        let infinite = records.len() - finite.len();
        if infinite > 0 {
            log::warn!("{infinite} image(s) reconstructed exactly; excluded from the PSNR mean");
        }
        let mean = |v: &[f64]| {
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let ssims: Vec<f64> = records.iter().map(|r| r.ssim).collect();
        EvalReport {
            mean_psnr: if finite.is_empty() && infinite > 0 {
                f64::INFINITY
            } else {
                mean(&finite)
            },
            mean_ssim: mean(&ssims),
            infinite,
            border: 2 * scale,
            scale,
            records,
        }
    }

    /// `name,psnr_db,ssim` rows plus a final `AGGREGATE` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,psnr_db,ssim\n");
        for r in &self.records {
            writeln!(s, "{},{},{:.6}", csv_field(&r.name), fmt_psnr(r.psnr), r.ssim).unwrap();
        }
        writeln!(s, "AGGREGATE,{},{:.6}", fmt_psnr(self.mean_psnr), self.mean_ssim).unwrap();
        s
    }

    /// Two-column `PSNR SSIM` summary in the layout of published SR tables.
    pub fn table(&self, dataset: &str, method: &str) -> String {
        format!(
            "{:<10} {:>5}  {:<12}\n{:<10} {:>5}  {:>7.2} {:.4}\n",
            "Method",
            "Scale",
            format!("{dataset}  PSNR SSIM"),
            method,
            format!("x{}", self.scale),
            self.mean_psnr,
            self.mean_ssim
        )
    }
}

fn fmt_psnr(p: f64) -> String {
    if p.is_infinite() {
        "inf".into()
    } else {
        format!("{p:.4}")
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EvalOptions {
    /// Worker threads; `0` or `1` evaluates sequentially.
    pub jobs: usize,
    pub space: MetricSpace,
}

/// PNG files of `dir` in lexicographic order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    Ok(files)
}

/// Scores one HR image; returns the record and the super-resolved image.
pub fn evaluate_image(
    up: &dyn Upscaler,
    name: &str,
    hr: &ImageBuffer,
    space: MetricSpace,
) -> Result<(ImageRecord, ImageBuffer)> {
    let s = up.scale();
    let hr_t = imaging::modcrop(&imaging::to_unit_tensor::<f32>(hr), s)?;
    let hr_q = imaging::from_unit_tensor(&hr_t)?;
    let lr = imaging::downscale(&hr_t, s)?;
    let sr = imaging::from_unit_tensor(&up.upscale(&lr)?)?;
    let border = 2 * s;
    let a = space.convert(&imaging::crop_border(&sr.to_planar(), border)?)?;
    let b = space.convert(&imaging::crop_border(&hr_q.to_planar(), border)?)?;
    let record = ImageRecord {
        name: name.to_string(),
        psnr: imaging::psnr(&a, &b)?,
        ssim: imaging::ssim(&a, &b)?,
    };
    Ok((record, sr))
}

pub fn evaluate_folder(up: &dyn Upscaler, hr_dir: &Path, opts: EvalOptions) -> Result<EvalReport> {
    let files = list_images(hr_dir)?;
    let one = |path: &PathBuf| -> Result<ImageRecord> {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let hr = imaging::load_image(path)?;
        Ok(evaluate_image(up, &name, &hr, opts.space)?.0)
    };
    let records = if opts.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
        pool.install(|| files.par_iter().map(one).collect::<Result<Vec<_>>>())?
    } else {
        files.iter().map(one).collect::<Result<Vec<_>>>()?
    };
    Ok(EvalReport::from_records(records, up.scale()))
}
