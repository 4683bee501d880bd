//! Image I/O, bicubic resampling, dihedral augmentation, border cropping and
//! PSNR/SSIM.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// 8-bit RGB, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != 3 * width * height {
            return Err(Error::shape(format!(
                "{width}x{height} RGB image needs {} samples, got {}",
                3 * width * height,
                data.len()
            )));
        }
        Ok(ImageBuffer { width, height, data })
    }

    /// Planar `[3, H, W]` samples on the 0..=255 scale.
    pub fn to_planar(&self) -> Tensor<f64> {
        let (w, h) = (self.width, self.height);
        Tensor::from_fn(&[3, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            self.data[3 * p + c] as f64
        })
    }
}

fn image_err(path: &Path, reason: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Reads an 8-bit PNG. Grayscale is replicated to RGB; alpha is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e))?;
    let (color, depth) = reader.output_color_type();
    if depth != png::BitDepth::Eight {
        return Err(image_err(path, format!("unsupported bit depth {depth:?}")));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let src = &buf[..info.buffer_size()];
    let stride = info.line_size;
    let per_px = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(image_err(path, "palette was not expanded")),
    };
    let mut data = Vec::with_capacity(3 * w * h);
    for row in src.chunks_exact(stride).take(h) {
        for px in row[..w * per_px].chunks_exact(per_px) {
            if per_px <= 2 {
                data.extend_from_slice(&[px[0]; 3]);
            } else {
                data.extend_from_slice(&px[..3]);
            }
        }
    }
    ImageBuffer::new(w, h, data)
}

pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(&img.data).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}

/// `[1, 3, H, W]` with samples divided by 255.
pub fn to_unit_tensor<F: Real>(img: &ImageBuffer) -> Tensor<F> {
    let planar = img.to_planar();
    Tensor::from_fn(&[1, 3, img.height, img.width], |i| F::narrow(planar.data()[i] / 255.0))
}

/// Export quantization: `round(255·v)` with ties away from zero, clamped.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn from_unit_tensor<F: Real>(t: &Tensor<F>) -> Result<ImageBuffer> {
    let [n, c, h, w] = t.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::shape(format!("expected [1, 3, H, W], got {:?}", t.shape())));
    }
    let d = t.data();
    let mut data = vec![0u8; 3 * h * w];
    for (p, px) in data.chunks_exact_mut(3).enumerate() {
        for (ch, s) in px.iter_mut().enumerate() {
            *s = quantize(d[ch * h * w + p].widen());
        }
    }
    ImageBuffer::new(w, h, data)
}

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Normalized taps for one output sample: `(source index, weight)` with
/// indices already clamped to the edge.
pub type Taps = Vec<(usize, f64)>;

/// Resampling taps along one axis from `in_len` to `out_len` samples.
/// Downscaling stretches the kernel by the inverse factor.
pub fn resize_taps(in_len: usize, out_len: usize) -> Vec<Taps> {
    let scale = out_len as f64 / in_len as f64;
    let stretch = scale.min(1.0);
    let support = 2.0 / stretch;
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) / scale - 0.5;
            let first = (center - support).floor() as isize;
            let last = (center + support).ceil() as isize;
            let mut taps: Taps = Vec::new();
            for j in first..=last {
                let w = cubic((center - j as f64) * stretch);
                if w == 0.0 {
                    continue;
                }
                let src = j.clamp(0, in_len as isize - 1) as usize;
                match taps.iter_mut().find(|(s, _)| *s == src) {
                    Some(t) => t.1 += w,
                    None => taps.push((src, w)),
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Separable bicubic resampling of the last two axes to `out_h × out_w`.
pub fn bicubic_resize<F: Real>(x: &Tensor<F>, out_h: usize, out_w: usize) -> Result<Tensor<F>> {
    let shape = x.shape();
    if shape.len() < 2 || out_h == 0 || out_w == 0 {
        return Err(Error::shape(format!(
            "cannot resize {shape:?} to {out_h}x{out_w}"
        )));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let planes = x.len() / (h * w);
    let rows = resize_taps(h, out_h);
    let cols = resize_taps(w, out_w);
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    let mut tmp = vec![0f64; h * out_w];
    for plane in x.data().chunks_exact(h * w) {
        for y in 0..h {
            let src = &plane[y * w..(y + 1) * w];
            for (ox, taps) in cols.iter().enumerate() {
                tmp[y * out_w + ox] = taps.iter().map(|&(s, k)| k * src[s].widen()).sum();
            }
        }
        for taps in &rows {
            for ox in 0..out_w {
                let v: f64 = taps.iter().map(|&(s, k)| k * tmp[s * out_w + ox]).sum();
                out.push(F::narrow(v));
            }
        }
    }
    let mut new_shape = shape.to_vec();
    let n = new_shape.len();
    new_shape[n - 2] = out_h;
    new_shape[n - 1] = out_w;
    debug_assert_eq!(planes * out_h * out_w, out.len());
    Tensor::new(&new_shape, out)
}

/// Bicubic downscale by an integer factor. Both sides must be divisible.
pub fn downscale<F: Real>(x: &Tensor<F>, scale: usize) -> Result<Tensor<F>> {
    let (h, w) = last2(x)?;
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(Error::shape(format!("{h}x{w} is not divisible by scale {scale}")));
    }
    bicubic_resize(x, h / scale, w / scale)
}

pub fn upscale<F: Real>(x: &Tensor<F>, scale: usize) -> Result<Tensor<F>> {
    let (h, w) = last2(x)?;
    bicubic_resize(x, h * scale, w * scale)
}

fn last2<F: Real>(x: &Tensor<F>) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::shape(format!("need at least 2 axes, got {s:?}")));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

/// Crops the last two axes to `h × w` starting at `(y0, x0)`.
pub fn crop<F: Real>(x: &Tensor<F>, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor<F>> {
    let (ih, iw) = last2(x)?;
    if h == 0 || w == 0 || y0 + h > ih || x0 + w > iw {
        return Err(Error::shape(format!(
            "crop {h}x{w} at ({y0},{x0}) exceeds {ih}x{iw}"
        )));
    }
    let mut out = Vec::with_capacity(x.len() / (ih * iw) * h * w);
    for plane in x.data().chunks_exact(ih * iw) {
        for y in y0..y0 + h {
            out.extend_from_slice(&plane[y * iw + x0..y * iw + x0 + w]);
        }
    }
    let mut shape = x.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = h;
    shape[n - 1] = w;
    Tensor::new(&shape, out)
}

pub fn crop_border<F: Real>(x: &Tensor<F>, pixels: usize) -> Result<Tensor<F>> {
    let (h, w) = last2(x)?;
    if 2 * pixels >= h.min(w) {
        return Err(Error::shape(format!("cannot crop {pixels} px from each side of {h}x{w}")));
    }
    crop(x, pixels, pixels, h - 2 * pixels, w - 2 * pixels)
}

/// Largest top-left region whose sides are multiples of `scale`.
pub fn modcrop<F: Real>(x: &Tensor<F>, scale: usize) -> Result<Tensor<F>> {
    let (h, w) = last2(x)?;
    crop(x, 0, 0, h - h % scale, w - w % scale)
}

/// Element `k` (0..8) of the dihedral group on the last two axes:
/// `k % 4` quarter turns counter-clockwise, preceded by a horizontal flip
/// when `k >= 4`.
pub fn dihedral<F: Real>(x: &Tensor<F>, k: usize) -> Result<Tensor<F>> {
    let (h, w) = last2(x)?;
    let turns = k % 4;
    if turns % 2 == 1 && h != w {
        return Err(Error::shape(format!("rotation needs a square patch, got {h}x{w}")));
    }
    let flip = k >= 4;
    let n = h;
    let mut out = x.clone();
    for (src, dst) in x.data().chunks_exact(h * w).zip(out.data_mut().chunks_exact_mut(h * w)) {
        for y in 0..h {
            for xx in 0..w {
                // Source pixel of output (y, xx): undo the rotation, then the flip.
                let (sy, mut sx) = match turns {
                    0 => (y, xx),
                    1 => (xx, n - 1 - y),
                    2 => (h - 1 - y, w - 1 - xx),
                    _ => (n - 1 - xx, y),
                };
                if flip {
                    sx = w - 1 - sx;
                }
                dst[y * w + xx] = src[sy * w + sx];
            }
        }
    }
    Ok(out)
}

/// Uniformly random dihedral transform.
pub fn augment<F: Real, R: Rng + ?Sized>(x: &Tensor<F>, rng: &mut R) -> Result<Tensor<F>> {
    dihedral(x, rng.gen_range(0..8))
}

/// Colour space the metrics are computed in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MetricSpace {
    #[default]
    Rgb,
    /// BT.601 luma on the 16..235 scale.
    Y,
}

impl MetricSpace {
    /// Converts planar `[3, H, W]` 8-bit-scale samples.
    pub fn convert(self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        match self {
            MetricSpace::Rgb => Ok(x.clone()),
            MetricSpace::Y => {
                let [c, h, w] = x.dims3()?;
                if c != 3 {
                    return Err(Error::shape("Y conversion needs 3 channels"));
                }
                let d = x.data();
                let n = h * w;
                Tensor::new(
                    &[1, h, w],
                    (0..n)
                        .map(|p| 16.0 + (65.481 * d[p] + 128.553 * d[n + p] + 24.966 * d[2 * n + p]) / 255.0)
                        .collect(),
                )
            }
        }
    }
}

/// PSNR in dB on the 8-bit scale; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("psnr of {:?} vs {:?}", a.shape(), b.shape())));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_1d() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Valid-region separable Gaussian filter of one plane.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over
/// channels and valid positions. Last two axes are spatial.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("ssim of {:?} vs {:?}", a.shape(), b.shape())));
    }
    let (h, w) = last2(a)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "{h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let k = gaussian_1d();
    let mut total = 0.0;
    let mut count = 0usize;
    for (pa, pb) in a.data().chunks_exact(h * w).zip(b.data().chunks_exact(h * w)) {
        let prod = |f: fn(f64, f64) -> f64| pa.iter().zip(pb).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
        let mu_a = filter(pa, h, w, &k);
        let mu_b = filter(pb, h, w, &k);
        let aa = filter(&prod(|x, _| x * x), h, w, &k);
        let bb = filter(&prod(|_, y| y * y), h, w, &k);
        let ab = filter(&prod(|x, y| x * y), h, w, &k);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        count += mu_a.len();
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_interpolates() {
        assert_eq!(cubic(0.0), 1.0);
        for d in [1.0, 2.0, -1.0, 3.0] {
            assert_eq!(cubic(d), 0.0);
        }
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.7), 255);
        assert_eq!(quantize(-0.2), 0);
        assert_eq!(quantize(1.0), 255);
    }
}
