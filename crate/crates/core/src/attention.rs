//! Multi-head self-attention and the four attention branches of the mix
//! attention layer: window (W-MSA), shifted window (SW-MSA), strided grid
//! (Grid-MSA) and channel attention.

use crate::autograd::{Activation, Gather, Var};
use crate::error::{Error, Result};
use crate::layout;
use crate::params::{Ctx, Init, ParamBuilder, ParamId};
use crate::tensor::{Real, Tensor};

/// Fully connected layer, weight `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let mut pb = pb.child(name);
        Ok(Linear {
            weight: pb.param("weight", &[out_dim, in_dim], Init::WEIGHT)?,
            bias: pb.param("bias", &[out_dim], Init::Zeros)?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<F: Real>(&self, cx: &Ctx<'_, F>, x: &Var<F>) -> Result<Var<F>> {
        cx.graph().linear(x, cx.p(self.weight), Some(cx.p(self.bias)))
    }

    pub fn num_params(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }
}

/// Layer norm affine pair.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl Norm {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize) -> Result<Self> {
        let mut pb = pb.child(name);
        Ok(Norm {
            gain: pb.param("weight", &[dim], Init::Ones)?,
            bias: pb.param("bias", &[dim], Init::Zeros)?,
        })
    }

    /// Normalizes over the last axis.
    pub fn forward<F: Real>(&self, cx: &Ctx<'_, F>, x: &Var<F>) -> Result<Var<F>> {
        cx.graph()
            .layer_norm(x, cx.p(self.gain), cx.p(self.bias), LN_EPS)
    }

    /// Normalizes the channel axis of a `[B,C,H,W]` map.
    pub fn forward_nchw<F: Real>(&self, cx: &Ctx<'_, F>, x: &Var<F>) -> Result<Var<F>> {
        let [_, _, h, w] = x.value().dims4()?;
        let g = cx.graph();
        let t = g.gather(x, &layout::to_tokens_map(x.shape())?)?;
        let n = self.forward(cx, &t)?;
        g.gather(&n, &layout::from_tokens_map(n.shape(), h, w)?)
    }
}

/// Spatial arrangement of the tokens of one attention group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
}

impl TokenGrid {
    pub fn square(side: usize) -> Self {
        TokenGrid { rows: side, cols: side }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Row of the relative position table for tokens `i` and `j`.
///
/// Offsets beyond the table's `table_window` reach are clamped to the edge
/// bucket; for window attention they never exceed it.
pub fn relative_position_index(grid: TokenGrid, table_window: usize, i: usize, j: usize) -> usize {
    let reach = table_window as isize - 1;
    let (yi, xi) = ((i / grid.cols) as isize, (i % grid.cols) as isize);
    let (yj, xj) = ((j / grid.cols) as isize, (j % grid.cols) as isize);
    let dy = (yi - yj).clamp(-reach, reach) + reach;
    let dx = (xi - xj).clamp(-reach, reach) + reach;
    (dy * (2 * reach + 1) + dx) as usize
}

/// Learnable parameters of one multi-head self-attention.
#[derive(Clone, Debug)]
pub struct Mhsa {
    pub dim: usize,
    pub heads: usize,
    /// Window size the relative position table is laid out for.
    pub table_window: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub proj: Linear,
    /// `[(2w-1)², heads]`
    pub rel_table: ParamId,
}

impl Mhsa {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        dim: usize,
        heads: usize,
        table_window: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(
                "heads",
                format!("{dim} channels are not divisible into {heads} heads"),
            ));
        }
        let mut pb = pb.child(name);
        let span = 2 * table_window - 1;
        Ok(Mhsa {
            dim,
            heads,
            table_window,
            query: Linear::new(&mut pb, "q", dim, dim)?,
            key: Linear::new(&mut pb, "k", dim, dim)?,
            value: Linear::new(&mut pb, "v", dim, dim)?,
            proj: Linear::new(&mut pb, "proj", dim, dim)?,
            rel_table: pb.param("rel_pos_table", &[span * span, heads], Init::Zeros)?,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn num_params(dim: usize, heads: usize, table_window: usize) -> usize {
        let span = 2 * table_window - 1;
        4 * Linear::num_params(dim, dim) + span * span * heads
    }
}

/// `[nB, T, h·d] -> [nB·h, T, d]`
fn split_heads_map(nb: usize, t: usize, heads: usize, d: usize) -> Result<Gather> {
    let c = heads * d;
    let mut map = Vec::with_capacity(nb * t * c);
    for b in 0..nb {
        for h in 0..heads {
            for ti in 0..t {
                let base = (b * t + ti) * c + h * d;
                map.extend(base..base + d);
            }
        }
    }
    Gather::new(&[nb, t, c], &[nb * heads, t, d], map)
}

fn merge_heads_map(nb: usize, t: usize, heads: usize, d: usize) -> Result<Gather> {
    let c = heads * d;
    let mut map = Vec::with_capacity(nb * t * c);
    for b in 0..nb {
        for ti in 0..t {
            for h in 0..heads {
                let base = ((b * heads + h) * t + ti) * d;
                map.extend(base..base + d);
            }
        }
    }
    Gather::new(&[nb * heads, t, d], &[nb, t, c], map)
}

/// Expands the relative position table to `[heads, T·T]`.
fn rel_bias_map(p: &Mhsa, grid: TokenGrid) -> Result<Gather> {
    let t = grid.len();
    let span = 2 * p.table_window - 1;
    let mut map = Vec::with_capacity(p.heads * t * t);
    for h in 0..p.heads {
        for i in 0..t {
            for j in 0..t {
                map.push(relative_position_index(grid, p.table_window, i, j) * p.heads + h);
            }
        }
    }
    Gather::new(&[span * span, p.heads], &[p.heads, t * t], map)
}

/// Output and attention probabilities `[nB·heads, T, T]`.
pub struct MhsaOutput<F: Real> {
    pub output: Var<F>,
    pub weights: Var<F>,
}

/// Self-attention over each group of `tokens: [nB, T, C]`:
/// `softmax(QKᵀ/√d + bias + mask)·V`, heads concatenated and projected.
pub fn mhsa_full<F: Real>(
    cx: &Ctx<'_, F>,
    tokens: &Var<F>,
    p: &Mhsa,
    grid: TokenGrid,
    mask: Option<&Tensor<F>>,
) -> Result<MhsaOutput<F>> {
    let [nb, t, c] = tokens.value().dims3()?;
    if c != p.dim {
        return Err(Error::shape(format!(
            "mhsa built for {} channels got tokens {:?}",
            p.dim,
            tokens.shape()
        )));
    }
    if t != grid.len() {
        return Err(Error::shape(format!(
            "mhsa: {t} tokens per group but layout is {}x{}",
            grid.rows, grid.cols
        )));
    }
    let g = cx.graph();
    let (h, d) = (p.heads, p.head_dim());
    let split = split_heads_map(nb, t, h, d)?;
    let q = g.gather(&p.query.forward(cx, tokens)?, &split)?;
    let q = g.scale(&q, 1.0 / (d as f64).sqrt());
    let k = g.gather(&p.key.forward(cx, tokens)?, &split)?;
    let v = g.gather(&p.value.forward(cx, tokens)?, &split)?;

    let scores = g.matmul_ext(&q, &k, true)?;
    let bias = g.gather(cx.p(p.rel_table), &rel_bias_map(p, grid)?)?;
    let mut scores = g.add_broadcast(&scores, &bias, [nb, h, 1, t * t])?;
    if let Some(mask) = mask {
        let [nw, mt, mt2] = mask.dims3()?;
        if mt != t || mt2 != t || nb % nw != 0 {
            return Err(Error::shape(format!(
                "mask {:?} does not fit {nb} groups of {t} tokens",
                mask.shape()
            )));
        }
        let m = Var::constant(mask.clone());
        scores = g.add_broadcast(&scores, &m, [nb / nw, nw, h, t * t])?;
    }
    let weights = g.softmax(&scores);
    let out = g.matmul(&weights, &v)?;
    let out = g.gather(&out, &merge_heads_map(nb, t, h, d)?)?;
    Ok(MhsaOutput {
        output: p.proj.forward(cx, &out)?,
        weights,
    })
}

pub fn mhsa<F: Real>(
    cx: &Ctx<'_, F>,
    tokens: &Var<F>,
    p: &Mhsa,
    grid: TokenGrid,
    mask: Option<&Tensor<F>>,
) -> Result<Var<F>> {
    Ok(mhsa_full(cx, tokens, p, grid, mask)?.output)
}

/// Runs `f` on `x` reflect-padded to a multiple of `k`, then crops back.
fn padded<F: Real>(
    cx: &Ctx<'_, F>,
    x: &Var<F>,
    k: usize,
    f: impl FnOnce(&Var<F>) -> Result<Var<F>>,
) -> Result<Var<F>> {
    let [_, _, h, w] = x.value().dims4()?;
    if h % k == 0 && w % k == 0 {
        return f(x);
    }
    let g = cx.graph();
    let (pad, extent) = layout::pad_to_multiple_map(x.shape(), k)?;
    let y = f(&g.gather(x, &pad)?)?;
    g.gather(&y, &layout::crop_map(y.shape(), extent)?)
}

/// Window attention: partition into `win×win` tiles, attend within each.
pub fn w_msa<F: Real>(cx: &Ctx<'_, F>, x: &Var<F>, p: &Mhsa, win: usize) -> Result<Var<F>> {
    sw_msa(cx, x, p, win, 0)
}

/// Shifted window attention: roll by `-shift`, masked window attention,
/// roll back. `shift == 0` is plain window attention.
pub fn sw_msa<F: Real>(cx: &Ctx<'_, F>, x: &Var<F>, p: &Mhsa, win: usize, shift: usize) -> Result<Var<F>> {
    if shift >= win {
        return Err(Error::config(
            "shift",
            format!("shift {shift} must be smaller than the window {win}"),
        ));
    }
    padded(cx, x, win, |x| {
        let g = cx.graph();
        let shape = x.shape().to_vec();
        let s = shift as isize;
        let canvas = if shift > 0 {
            g.gather(x, &layout::cyclic_shift_map(&shape, -s, -s)?)?
        } else {
            x.clone()
        };
        let tokens = g.gather(&canvas, &layout::window_partition_map(&shape, win)?)?;
        let mask = if shift > 0 {
            Some(layout::build_shift_mask(shape[2], shape[3], win, shift)?.cast::<F>())
        } else {
            None
        };
        let out = mhsa(cx, &tokens, p, TokenGrid::square(win), mask.as_ref())?;
        let out = g.gather(&out, &layout::window_reverse_map(&shape, win)?)?;
        if shift > 0 {
            g.gather(&out, &layout::cyclic_shift_map(&shape, s, s)?)
        } else {
            Ok(out)
        }
    })
}

/// Grid attention: strided groups `(i + a·g, j + b·g)` attend together.
pub fn grid_msa<F: Real>(cx: &Ctx<'_, F>, x: &Var<F>, p: &Mhsa, stride: usize) -> Result<Var<F>> {
    padded(cx, x, stride, |x| {
        let g = cx.graph();
        let shape = x.shape().to_vec();
        let grid = TokenGrid {
            rows: shape[2] / stride,
            cols: shape[3] / stride,
        };
        let tokens = g.gather(x, &layout::grid_partition_map(&shape, stride)?)?;
        let out = mhsa(cx, &tokens, p, grid, None)?;
        g.gather(&out, &layout::grid_reverse_map(&shape, stride)?)
    })
}

/// Squeeze-and-excitation channel gate realized with 1×1 convolutions.
#[derive(Clone, Debug)]
pub struct ChannelAttn {
    pub channels: usize,
    pub reduction: usize,
    pub squeeze_w: ParamId,
    pub squeeze_b: ParamId,
    pub excite_w: ParamId,
    pub excite_b: ParamId,
}

impl ChannelAttn {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = Self::hidden(channels, reduction)?;
        let mut pb = pb.child(name);
        Ok(ChannelAttn {
            channels,
            reduction,
            squeeze_w: pb.param("squeeze.weight", &[hidden, channels, 1, 1], Init::WEIGHT)?,
            squeeze_b: pb.param("squeeze.bias", &[hidden], Init::Zeros)?,
            excite_w: pb.param("excite.weight", &[channels, hidden, 1, 1], Init::WEIGHT)?,
            excite_b: pb.param("excite.bias", &[channels], Init::Zeros)?,
        })
    }

    pub fn hidden(channels: usize, reduction: usize) -> Result<usize> {
        if reduction == 0 || channels < reduction {
            return Err(Error::config(
                "squeeze_factor",
                format!("{channels} channels cannot be squeezed by {reduction}"),
            ));
        }
        Ok(channels / reduction)
    }

    pub fn num_params(channels: usize, reduction: usize) -> usize {
        let hidden = channels / reduction;
        2 * channels * hidden + hidden + channels
    }
}

/// `x · sigmoid(W₂ relu(W₁ avgpool(x)))` per channel.
pub fn channel_attention<F: Real>(cx: &Ctx<'_, F>, x: &Var<F>, p: &ChannelAttn) -> Result<Var<F>> {
    let g = cx.graph();
    let pooled = g.global_avg_pool(x)?;
    let s = g.conv2d(&pooled, cx.p(p.squeeze_w), Some(cx.p(p.squeeze_b)), 0)?;
    let s = g.activation(&s, Activation::Relu);
    let e = g.conv2d(&s, cx.p(p.excite_w), Some(cx.p(p.excite_b)), 0)?;
    let gate = g.activation(&e, Activation::Sigmoid);
    g.scale_channels(x, &gate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_index_is_centered_and_swaps_to_mirror() {
        let grid = TokenGrid::square(4);
        let w = 4;
        let span = 2 * w - 1;
        let center = (w - 1) * span + (w - 1);
        for i in 0..16 {
            assert_eq!(relative_position_index(grid, w, i, i), center);
            for j in 0..16 {
                let a = relative_position_index(grid, w, i, j);
                let b = relative_position_index(grid, w, j, i);
                assert_eq!(a + b, 2 * center, "offset negates under swap");
            }
        }
    }

    #[test]
    fn relative_index_clamps_large_grids() {
        let grid = TokenGrid::square(8);
        let idx = relative_position_index(grid, 4, 63, 0);
        assert_eq!(idx, 6 * 7 + 6);
    }

    #[test]
    fn head_split_roundtrip() {
        let split = split_heads_map(2, 3, 2, 4).unwrap();
        let merge = merge_heads_map(2, 3, 2, 4).unwrap();
        let x = Tensor::<f32>::from_fn(&[2, 3, 8], |i| i as f32);
        assert_eq!(merge.apply(&split.apply(&x).unwrap()).unwrap(), x);
    }
}
