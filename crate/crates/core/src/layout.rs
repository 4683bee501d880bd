//! Spatial re-layout: token/NCHW conversion, window and grid partitions,
//! cyclic shifts, reflect padding, pixel shuffle and the shifted-window mask.
//!
//! Every operation is an index map ([`Gather`]) built from shapes alone, so
//! the same map drives plain tensors and recorded graph values.

use crate::autograd::Gather;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Additive mask value separating tokens of different pre-shift regions.
pub const MASK_NEG: f32 = -100.0;

fn dims4(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(Error::shape(format!("expected (B,C,H,W), got {shape:?}"))),
    }
}

fn check_multiple(what: &str, h: usize, w: usize, k: usize) -> Result<()> {
    if k == 0 || !h.is_multiple_of(k) || !w.is_multiple_of(k) {
        return Err(Error::shape(format!(
            "{what}: {h}x{w} is not a multiple of {k}"
        )));
    }
    Ok(())
}

/// Inverse of a bijective gather.
fn invert(g: &Gather) -> Result<Gather> {
    let mut inv = vec![usize::MAX; g.map.len()];
    for (k, &i) in g.map.iter().enumerate() {
        inv[i] = k;
    }
    if inv.contains(&usize::MAX) {
        return Err(Error::shape("layout map is not a bijection"));
    }
    Gather::new(&g.out_shape, &g.in_shape, inv)
}

/// `[B,C,H,W] -> [B,H·W,C]`, row-major over space.
pub fn to_tokens_map(shape: &[usize]) -> Result<Gather> {
    let [b, c, h, w] = dims4(shape)?;
    let hw = h * w;
    let mut map = Vec::with_capacity(b * c * hw);
    for bi in 0..b {
        for p in 0..hw {
            for ci in 0..c {
                map.push((bi * c + ci) * hw + p);
            }
        }
    }
    Gather::new(shape, &[b, hw, c], map)
}

/// `[B,H·W,C] -> [B,C,H,W]`.
pub fn from_tokens_map(shape: &[usize], h: usize, w: usize) -> Result<Gather> {
    let [b, n, c] = match *shape {
        [b, n, c] => [b, n, c],
        _ => return Err(Error::shape(format!("expected (B,N,C) tokens, got {shape:?}"))),
    };
    if n != h * w {
        return Err(Error::shape(format!(
            "{n} tokens cannot be laid out as {h}x{w}"
        )));
    }
    invert(&to_tokens_map(&[b, c, h, w])?)
}

/// Reflect index into `[0, n)` without repeating the edge sample; bounces
/// repeatedly when the pad exceeds the extent.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Extent of a tensor before [`pad_to_multiple`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Extent {
    pub h: usize,
    pub w: usize,
}

/// Reflect-pads bottom and right so both spatial sizes are multiples of `k`.
pub fn pad_to_multiple_map(shape: &[usize], k: usize) -> Result<(Gather, Extent)> {
    let [b, c, h, w] = dims4(shape)?;
    if k == 0 {
        return Err(Error::shape("pad multiple must be positive"));
    }
    let ph = h.div_ceil(k) * k;
    let pw = w.div_ceil(k) * k;
    let mut map = Vec::with_capacity(b * c * ph * pw);
    for plane in 0..b * c {
        for y in 0..ph {
            let sy = reflect(y, h);
            for x in 0..pw {
                map.push((plane * h + sy) * w + reflect(x, w));
            }
        }
    }
    Ok((Gather::new(shape, &[b, c, ph, pw], map)?, Extent { h, w }))
}

/// Top-left crop back to `extent`.
pub fn crop_map(shape: &[usize], extent: Extent) -> Result<Gather> {
    crop_region_map(shape, 0, 0, extent.h, extent.w)
}

pub fn crop_region_map(shape: &[usize], y0: usize, x0: usize, h: usize, w: usize) -> Result<Gather> {
    let [b, c, sh, sw] = dims4(shape)?;
    if h == 0 || w == 0 || y0 + h > sh || x0 + w > sw {
        return Err(Error::shape(format!(
            "crop {h}x{w} at ({y0},{x0}) exceeds {sh}x{sw}"
        )));
    }
    let mut map = Vec::with_capacity(b * c * h * w);
    for plane in 0..b * c {
        for y in 0..h {
            let row = (plane * sh + y0 + y) * sw + x0;
            map.extend(row..row + w);
        }
    }
    Gather::new(shape, &[b, c, h, w], map)
}

/// Non-overlapping `win×win` tiles: `[B,C,H,W] -> [B·nW, win², C]`, tiles in
/// row-major order, tokens row-major inside each tile.
pub fn window_partition_map(shape: &[usize], win: usize) -> Result<Gather> {
    let [b, c, h, w] = dims4(shape)?;
    check_multiple("window_partition", h, w, win)?;
    let (nwy, nwx) = (h / win, w / win);
    let mut map = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for wy in 0..nwy {
            for wx in 0..nwx {
                for ty in 0..win {
                    for tx in 0..win {
                        let (y, x) = (wy * win + ty, wx * win + tx);
                        for ci in 0..c {
                            map.push(((bi * c + ci) * h + y) * w + x);
                        }
                    }
                }
            }
        }
    }
    Gather::new(shape, &[b * nwy * nwx, win * win, c], map)
}

/// Inverse of [`window_partition_map`] for an image of `image_shape`.
pub fn window_reverse_map(image_shape: &[usize], win: usize) -> Result<Gather> {
    invert(&window_partition_map(image_shape, win)?)
}

/// Strided groups: group `(i,j)` of the `g×g` grid gathers pixels
/// `(i + a·g, j + b·g)`. `[B,C,H,W] -> [B·g², (H/g)·(W/g), C]`.
pub fn grid_partition_map(shape: &[usize], g: usize) -> Result<Gather> {
    let [b, c, h, w] = dims4(shape)?;
    check_multiple("grid_partition", h, w, g)?;
    let (gh, gw) = (h / g, w / g);
    let mut map = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for i in 0..g {
            for j in 0..g {
                for a in 0..gh {
                    for bb in 0..gw {
                        let (y, x) = (i + a * g, j + bb * g);
                        for ci in 0..c {
                            map.push(((bi * c + ci) * h + y) * w + x);
                        }
                    }
                }
            }
        }
    }
    Gather::new(shape, &[b * g * g, gh * gw, c], map)
}

pub fn grid_reverse_map(image_shape: &[usize], g: usize) -> Result<Gather> {
    invert(&grid_partition_map(image_shape, g)?)
}

/// Toroidal roll: `out[y][x] = in[(y - dy) mod H][(x - dx) mod W]`.
pub fn cyclic_shift_map(shape: &[usize], dy: isize, dx: isize) -> Result<Gather> {
    let [b, c, h, w] = dims4(shape)?;
    let sy = dy.rem_euclid(h as isize) as usize;
    let sx = dx.rem_euclid(w as isize) as usize;
    let mut map = Vec::with_capacity(b * c * h * w);
    for plane in 0..b * c {
        for y in 0..h {
            let src_y = (y + h - sy) % h;
            for x in 0..w {
                map.push((plane * h + src_y) * w + (x + w - sx) % w);
            }
        }
    }
    Gather::new(shape, shape, map)
}

/// Sub-pixel rearrangement `[B,C·r²,H,W] -> [B,C,rH,rW]` with
/// `out(b,c,h·r+i,w·r+j) = in(b, c·r²+i·r+j, h, w)`.
pub fn pixel_shuffle_map(shape: &[usize], r: usize) -> Result<Gather> {
    let [b, cr, h, w] = dims4(shape)?;
    if r == 0 || cr % (r * r) != 0 {
        return Err(Error::shape(format!(
            "pixel_shuffle: {cr} channels not divisible by {r}²"
        )));
    }
    let c = cr / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut map = Vec::with_capacity(b * cr * h * w);
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y, i, x, j) = (oy / r, oy % r, ox / r, ox % r);
                    let src_c = ci * r * r + i * r + j;
                    map.push(((bi * cr + src_c) * h + y) * w + x);
                }
            }
        }
    }
    Gather::new(shape, &[b, c, oh, ow], map)
}

pub fn pixel_unshuffle_map(shape: &[usize], r: usize) -> Result<Gather> {
    let [b, c, oh, ow] = dims4(shape)?;
    check_multiple("pixel_unshuffle", oh, ow, r)?;
    invert(&pixel_shuffle_map(&[b, c * r * r, oh / r, ow / r], r)?)
}

macro_rules! tensor_fn {
    ($(#[$doc:meta])* $name:ident($($arg:ident: $ty:ty),*) => $map:expr) => {
        $(#[$doc])*
        pub fn $name<F: Real>(x: &Tensor<F>, $($arg: $ty),*) -> Result<Tensor<F>> {
            let map: Result<Gather> = $map(x.shape());
            map?.apply(x)
        }
    };
}

tensor_fn!(to_tokens() => |s: &[usize]| to_tokens_map(s));
tensor_fn!(from_tokens(h: usize, w: usize) => |s: &[usize]| from_tokens_map(s, h, w));
tensor_fn!(window_partition(win: usize) => |s: &[usize]| window_partition_map(s, win));
tensor_fn!(grid_partition(g: usize) => |s: &[usize]| grid_partition_map(s, g));
tensor_fn!(cyclic_shift(dy: isize, dx: isize) => |s: &[usize]| cyclic_shift_map(s, dy, dx));
tensor_fn!(pixel_shuffle(r: usize) => |s: &[usize]| pixel_shuffle_map(s, r));
tensor_fn!(pixel_unshuffle(r: usize) => |s: &[usize]| pixel_unshuffle_map(s, r));
tensor_fn!(crop_to(extent: Extent) => |s: &[usize]| crop_map(s, extent));

pub fn window_reverse<F: Real>(windows: &Tensor<F>, image_shape: &[usize], win: usize) -> Result<Tensor<F>> {
    window_reverse_map(image_shape, win)?.apply(windows)
}

pub fn grid_reverse<F: Real>(groups: &Tensor<F>, image_shape: &[usize], g: usize) -> Result<Tensor<F>> {
    grid_reverse_map(image_shape, g)?.apply(groups)
}

pub fn pad_to_multiple<F: Real>(x: &Tensor<F>, k: usize) -> Result<(Tensor<F>, Extent)> {
    let (map, extent) = pad_to_multiple_map(x.shape(), k)?;
    Ok((map.apply(x)?, extent))
}

/// Window geometry of one (shifted) window attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    pub window_size: usize,
    pub shift: usize,
    pub padded_h: usize,
    pub padded_w: usize,
}

impl WindowGrid {
    pub fn new(h: usize, w: usize, window_size: usize, shift: usize) -> Result<Self> {
        if window_size == 0 {
            return Err(Error::shape("window size must be positive"));
        }
        if shift >= window_size {
            return Err(Error::shape(format!(
                "shift {shift} must be smaller than the window {window_size}"
            )));
        }
        Ok(WindowGrid {
            window_size,
            shift,
            padded_h: h.div_ceil(window_size) * window_size,
            padded_w: w.div_ceil(window_size) * window_size,
        })
    }

    pub fn num_windows(&self) -> usize {
        (self.padded_h / self.window_size) * (self.padded_w / self.window_size)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window_size * self.window_size
    }
}

/// Additive attention mask, `(num_windows, T, T)` with entries 0 or
/// [`MASK_NEG`].
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask(pub Tensor<f32>);

impl AttnMask {
    pub fn num_windows(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn is_blocked(&self, window: usize, t1: usize, t2: usize) -> bool {
        self.0.get(&[window, t1, t2]) != 0.0
    }

    pub fn cast<F: Real>(&self) -> Tensor<F> {
        self.0.cast()
    }
}

/// Region label of coordinate `i` along an axis of length `n` on the
/// shifted canvas: `[0, n-w)`, `[n-w, n-shift)`, `[n-shift, n)`.
fn region(i: usize, n: usize, w: usize, shift: usize) -> usize {
    if i < n.saturating_sub(w) {
        0
    } else if i < n - shift {
        1
    } else {
        2
    }
}

/// Mask for shifted-window attention on an `h×w` canvas (multiples of
/// `win`). Pairs of tokens that came from different pre-shift regions are
/// blocked.
pub fn build_shift_mask(h: usize, w: usize, win: usize, shift: usize) -> Result<AttnMask> {
    check_multiple("build_shift_mask", h, w, win)?;
    if shift >= win {
        return Err(Error::shape(format!(
            "shift {shift} must be smaller than the window {win}"
        )));
    }
    let (nwy, nwx) = (h / win, w / win);
    let t = win * win;
    let mut data = Vec::with_capacity(nwy * nwx * t * t);
    let mut labels = vec![0usize; t];
    for wy in 0..nwy {
        for wx in 0..nwx {
            for ty in 0..win {
                for tx in 0..win {
                    let (y, x) = (wy * win + ty, wx * win + tx);
                    labels[ty * win + tx] = region(y, h, win, shift) * 3 + region(x, w, win, shift);
                }
            }
            for &a in &labels {
                data.extend(labels.iter().map(|&b| if a == b { 0.0 } else { MASK_NEG }));
            }
        }
    }
    let t = Tensor::new(&[nwy * nwx, t, t], data)?;
    Ok(AttnMask(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iota(shape: &[usize]) -> Tensor<f32> {
        Tensor::from_fn(shape, |i| i as f32)
    }

    #[test]
    fn to_tokens_is_row_major() {
        let x = Tensor::<f32>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(to_tokens(&x).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        let x = iota(&[1, 2, 1, 2]);
        // token 0 carries channel values (0, 2), token 1 carries (1, 3)
        assert_eq!(to_tokens(&x).unwrap().data(), &[0.0, 2.0, 1.0, 3.0]);
    }

    #[test]
    fn window_partition_first_window() {
        let x = iota(&[1, 1, 4, 4]);
        let wins = window_partition(&x, 2).unwrap();
        assert_eq!(wins.shape(), &[4, 4, 1]);
        assert_eq!(&wins.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        let whole = window_partition(&x, 4).unwrap();
        assert_eq!(whole.shape(), &[1, 16, 1]);
        assert_eq!(whole.data(), x.data());
        assert!(window_partition(&x, 3).is_err());
    }

    #[test]
    fn grid_partition_stride_rule() {
        let x = iota(&[1, 1, 4, 4]);
        let groups = grid_partition(&x, 2).unwrap();
        assert_eq!(groups.shape(), &[4, 4, 1]);
        assert_eq!(&groups.data()[..4], &[0.0, 2.0, 8.0, 10.0]);
        let global = grid_partition(&x, 1).unwrap();
        assert_eq!(global.shape(), &[1, 16, 1]);
        assert_eq!(global.data(), x.data());
    }

    #[test]
    fn cyclic_shift_analytic_roll() {
        let x = Tensor::<f32>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = cyclic_shift(&x, -1, -1).unwrap();
        assert_eq!(s.data(), &[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(cyclic_shift(&x, 0, 0).unwrap(), x);
    }

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        let x = Tensor::<f32>::from_fn(&[1, 1, 17, 16], |i| (i / 16) as f32);
        let (p, extent) = pad_to_multiple(&x, 16).unwrap();
        assert_eq!(p.shape(), &[1, 1, 32, 16]);
        for r in 17..32 {
            assert_eq!(p.get(&[0, 0, r, 3]), (32 - r) as f32, "row {r}");
        }
        assert_eq!(crop_to(&p, extent).unwrap(), x);
        let (same, _) = pad_to_multiple(&Tensor::<f32>::zeros(&[1, 1, 16, 16]), 16).unwrap();
        assert_eq!(same.shape(), &[1, 1, 16, 16]);
    }

    #[test]
    fn reflect_pad_handles_tiny_inputs() {
        let x = Tensor::<f32>::new(&[1, 1, 1, 2], vec![5.0, 6.0]).unwrap();
        let (p, _) = pad_to_multiple(&x, 4).unwrap();
        assert_eq!(p.shape(), &[1, 1, 4, 4]);
        assert_eq!(&p.data()[..4], &[5.0, 6.0, 5.0, 6.0]);
    }

    #[test]
    fn pixel_shuffle_tiles_channels() {
        let x = Tensor::<f32>::from_fn(&[1, 4, 2, 2], |i| (i / 4) as f32);
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(
            y.data(),
            &[0., 1., 0., 1., 2., 3., 2., 3., 0., 1., 0., 1., 2., 3., 2., 3.]
        );
        assert!(pixel_shuffle(&Tensor::<f32>::zeros(&[1, 3, 2, 2]), 2).is_err());
    }

    #[test]
    fn shift_mask_zero_shift_is_empty() {
        let m = build_shift_mask(8, 8, 4, 0).unwrap();
        assert!(m.0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shift_mask_is_symmetric() {
        let m = build_shift_mask(8, 12, 4, 2).unwrap();
        for wi in 0..m.num_windows() {
            for a in 0..16 {
                for b in 0..16 {
                    assert_eq!(m.is_blocked(wi, a, b), m.is_blocked(wi, b, a));
                }
            }
        }
    }

    #[test]
    fn window_grid_invariants() {
        let g = WindowGrid::new(17, 9, 8, 4).unwrap();
        assert_eq!((g.padded_h, g.padded_w), (24, 16));
        assert_eq!(g.num_windows(), 6);
        assert!(WindowGrid::new(8, 8, 4, 4).is_err());
    }
}
