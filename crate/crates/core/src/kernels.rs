//! Slice-level numeric kernels shared by forward and backward passes.
//! Every reduction accumulates in `f64`.

use crate::tensor::Real;

/// `a[m,k] · b[k,p]`, or `a[m,k] · b[p,k]ᵀ` when `b_transposed`.
pub(crate) fn gemm<F: Real>(
    a: &[F],
    b: &[F],
    m: usize,
    k: usize,
    p: usize,
    b_transposed: bool,
) -> Vec<F> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    let mut out = Vec::with_capacity(m * p);
    if b_transposed {
        for row in a.chunks_exact(k) {
            for col in b.chunks_exact(k) {
                let acc: f64 = row
                    .iter()
                    .zip(col)
                    .map(|(x, y)| x.widen() * y.widen())
                    .sum();
                out.push(F::narrow(acc));
            }
        }
    } else {
        let mut acc = vec![0f64; p];
        for row in a.chunks_exact(k) {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for (l, &x) in row.iter().enumerate() {
                let x = x.widen();
                if x == 0.0 {
                    continue;
                }
                for (o, &y) in acc.iter_mut().zip(&b[l * p..(l + 1) * p]) {
                    *o += x * y.widen();
                }
            }
            out.extend(acc.iter().map(|&v| F::narrow(v)));
        }
    }
    out
}

pub(crate) fn transpose<F: Real>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Geometry of a stride-1 2-D cross-correlation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output columns `ox` for which `ox + kx - pad` lands inside the input.
    #[inline]
    fn valid_range(out: usize, inp: usize, k: usize, pad: usize) -> (usize, usize) {
        let lo = pad.saturating_sub(k);
        let hi = (inp + pad).saturating_sub(k).min(out);
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv2d_forward<F: Real>(x: &[F], wt: &[F], bias: Option<&[F]>, g: ConvGeom) -> Vec<F> {
    let plane = g.oh * g.ow;
    let mut out = Vec::with_capacity(g.batch * g.cout * plane);
    let mut acc = vec![0f64; plane];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let b0 = bias.map_or(0.0, |bs| bs[co].widen());
            acc.iter_mut().for_each(|v| *v = b0);
            for ci in 0..g.cin {
                let xin = &x[(b * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                for ky in 0..g.kh {
                    let (y0, y1) = ConvGeom::valid_range(g.oh, g.h, ky, g.pad);
                    for kx in 0..g.kw {
                        let wv = wt[((co * g.cin + ci) * g.kh + ky) * g.kw + kx].widen();
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = ConvGeom::valid_range(g.ow, g.w, kx, g.pad);
                        for oy in y0..y1 {
                            let iy = oy + ky - g.pad;
                            let src = &xin[iy * g.w..(iy + 1) * g.w];
                            let dst = &mut acc[oy * g.ow..(oy + 1) * g.ow];
                            for ox in x0..x1 {
                                dst[ox] += wv * src[ox + kx - g.pad].widen();
                            }
                        }
                    }
                }
            }
            out.extend(acc.iter().map(|&v| F::narrow(v)));
        }
    }
    out
}

/// Returns `(dx, dw, db)` for a stride-1 convolution.
pub(crate) fn conv2d_backward<F: Real>(
    x: &[F],
    wt: &[F],
    dy: &[F],
    g: ConvGeom,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let plane = g.oh * g.ow;
    let mut dx = vec![0f64; x.len()];
    let mut dw = vec![0f64; wt.len()];
    let mut db = vec![0f64; g.cout];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let gy = &dy[(b * g.cout + co) * plane..][..plane];
            db[co] += gy.iter().map(|v| v.widen()).sum::<f64>();
            for ci in 0..g.cin {
                let base = (b * g.cin + ci) * g.h * g.w;
                for ky in 0..g.kh {
                    let (y0, y1) = ConvGeom::valid_range(g.oh, g.h, ky, g.pad);
                    for kx in 0..g.kw {
                        let widx = ((co * g.cin + ci) * g.kh + ky) * g.kw + kx;
                        let wv = wt[widx].widen();
                        let (x0, x1) = ConvGeom::valid_range(g.ow, g.w, kx, g.pad);
                        let mut wacc = 0f64;
                        for oy in y0..y1 {
                            let iy = oy + ky - g.pad;
                            for ox in x0..x1 {
                                let ix = ox + kx - g.pad;
                                let gv = gy[oy * g.ow + ox].widen();
                                let xi = base + iy * g.w + ix;
                                wacc += gv * x[xi].widen();
                                dx[xi] += gv * wv;
                            }
                        }
                        dw[widx] += wacc;
                    }
                }
            }
        }
    }
    let narrow = |v: Vec<f64>| v.into_iter().map(F::narrow).collect::<Vec<F>>();
    (narrow(dx), narrow(dw), narrow(db))
}

pub(crate) fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposed_matches_plain() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5 - 1.0).collect();
        let plain = gemm(&a, &b, 2, 3, 4, false);
        let bt = transpose(&b, 3, 4);
        assert_eq!(gemm(&a, &bt, 2, 3, 4, true), plain);
    }

    #[test]
    fn valid_range_covers_padding() {
        // 3-tap kernel, pad 1, width 5: tap 0 valid for ox in 1..5
        assert_eq!(ConvGeom::valid_range(5, 5, 0, 1), (1, 5));
        assert_eq!(ConvGeom::valid_range(5, 5, 1, 1), (0, 5));
        assert_eq!(ConvGeom::valid_range(5, 5, 2, 1), (0, 4));
    }
}
