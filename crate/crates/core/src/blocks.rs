//! Composite layers: MLP, Swin transformer layer (STL), the dense-residual
//! SDRCB, the mix attention layer (MAL), the hybrid grid attention block
//! (HGAB) and the residual group (RDG) that chains them.

use crate::attention::{self, ChannelAttn, Linear, Mhsa, Norm};
use crate::autograd::{Activation, Var};
use crate::error::{Error, Result};
use crate::layout;
use crate::params::{Ctx, Init, ParamBuilder, ParamId};
use crate::tensor::Real;

pub const TRANSITION_SLOPE: f64 = 0.2;

/// Number of STL + transition stages inside one SDRCB.
pub const SDRCB_STAGES: usize = 5;

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl Conv {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cin: usize, cout: usize, kernel: usize) -> Result<Self> {
        let mut pb = pb.child(name);
        Ok(Conv {
            weight: pb.param("weight", &[cout, cin, kernel, kernel], Init::WEIGHT)?,
            bias: pb.param("bias", &[cout], Init::Zeros)?,
            kernel,
        })
    }

    pub fn forward<F: Real>(&self, cx: &Ctx<'_, F>, x: &Var<F>) -> Result<Var<F>> {
        cx.graph()
            .conv2d(x, cx.p(self.weight), Some(cx.p(self.bias)), self.kernel / 2)
    }

    pub fn num_params(cin: usize, cout: usize, kernel: usize) -> usize {
        cin * cout * kernel * kernel + cout
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize, ratio: usize) -> Result<Self> {
        let mut pb = pb.child(name);
        Ok(Mlp {
            fc1: Linear::new(&mut pb, "fc1", dim, dim * ratio)?,
            fc2: Linear::new(&mut pb, "fc2", dim * ratio, dim)?,
        })
    }

    /// `fc2(gelu(fc1(tokens)))` over the last axis.
    pub fn forward<F: Real>(&self, cx: &Ctx<'_, F>, tokens: &Var<F>) -> Result<Var<F>> {
        let h = self.fc1.forward(cx, tokens)?;
        let h = cx.graph().activation(&h, Activation::Gelu);
        self.fc2.forward(cx, &h)
    }

    pub fn num_params(dim: usize, ratio: usize) -> usize {
        Linear::num_params(dim, dim * ratio) + Linear::num_params(dim * ratio, dim)
    }
}

fn to_tokens<F: Real>(cx: &Ctx<'_, F>, x: &Var<F>) -> Result<Var<F>> {
    cx.graph().gather(x, &layout::to_tokens_map(x.shape())?)
}

fn from_tokens<F: Real>(cx: &Ctx<'_, F>, t: &Var<F>, h: usize, w: usize) -> Result<Var<F>> {
    cx.graph().gather(t, &layout::from_tokens_map(t.shape(), h, w)?)
}

/// Swin transformer layer with pre-norm residuals.
#[derive(Clone, Debug)]
pub struct Stl {
    pub width: usize,
    pub window: usize,
    pub shift: usize,
    pub norm1: Norm,
    pub attn: Mhsa,
    pub norm2: Norm,
    pub mlp: Mlp,
}

impl Stl {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        width: usize,
        heads: usize,
        window: usize,
        shift: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        let mut pb = pb.child(name);
        Ok(Stl {
            width,
            window,
            shift,
            norm1: Norm::new(&mut pb, "norm1", width)?,
            attn: Mhsa::new(&mut pb, "attn", width, heads, window)?,
            norm2: Norm::new(&mut pb, "norm2", width)?,
            mlp: Mlp::new(&mut pb, "mlp", width, mlp_ratio)?,
        })
    }

    /// `x + (S)W-MSA(LN(x))`, then `+ MLP(LN(·))`.
    pub fn forward<F: Real>(&self, cx: &Ctx<'_, F>, x: &Var<F>) -> Result<Var<F>> {
        let [_, _, h, w] = x.value().dims4()?;
        let g = cx.graph();
        let t = to_tokens(cx, x)?;
        let n = from_tokens(cx, &self.norm1.forward(cx, &t)?, h, w)?;
        let a = attention::sw_msa(cx, &n, &self.attn, self.window, self.shift)?;
        let t = g.add(&t, &to_tokens(cx, &a)?)?;
        let m = self.mlp.forward(cx, &self.norm2.forward(cx, &t)?)?;
        let t = g.add(&t, &m)?;
        from_tokens(cx, &t, h, w)
    }

    pub fn num_params(width: usize, heads: usize, window: usize, mlp_ratio: usize) -> usize {
        4 * width + Mhsa::num_params(width, heads, window) + Mlp::num_params(width, mlp_ratio)
    }
}

/// Channel widths through one SDRCB.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SdrcbWidths {
    /// Input width of STL j: `C + j·g`.
    pub stl: [usize; SDRCB_STAGES],
    /// Output width of transition j: `g` for the first four, `C` for the last.
    pub transition: [usize; SDRCB_STAGES],
}

impl SdrcbWidths {
    pub fn new(channels: usize, growth: usize) -> Self {
        let mut stl = [0; SDRCB_STAGES];
        let mut transition = [growth; SDRCB_STAGES];
        for (j, w) in stl.iter_mut().enumerate() {
            *w = channels + j * growth;
        }
        transition[SDRCB_STAGES - 1] = channels;
        SdrcbWidths { stl, transition }
    }

    /// Heads per stage at a fixed head dimension.
    pub fn heads(&self, head_dim: usize) -> Result<[usize; SDRCB_STAGES]> {
        let mut heads = [0; SDRCB_STAGES];
        for (h, &w) in heads.iter_mut().zip(&self.stl) {
            if head_dim == 0 || w % head_dim != 0 {
                return Err(Error::config(
                    "head_dim",
                    format!("STL width {w} is not a multiple of head_dim {head_dim}"),
                ));
            }
            *h = w / head_dim;
        }
        Ok(heads)
    }
}

/// Shared hyperparameters of the dense-residual path.
#[derive(Clone, Copy, Debug)]
pub struct SdrcbSpec {
    pub channels: usize,
    pub growth: usize,
    pub head_dim: usize,
    pub window: usize,
    pub mlp_ratio: usize,
    pub alpha: f64,
}

impl SdrcbSpec {
    /// `[0, w/2, 0, w/2, 0]`
    pub fn shift(&self, stage: usize) -> usize {
        if stage % 2 == 1 {
            self.window / 2
        } else {
            0
        }
    }

    pub fn num_params(&self) -> Result<usize> {
        let widths = SdrcbWidths::new(self.channels, self.growth);
        let heads = widths.heads(self.head_dim)?;
        Ok((0..SDRCB_STAGES)
            .map(|j| {
                Stl::num_params(widths.stl[j], heads[j], self.window, self.mlp_ratio)
                    + Conv::num_params(widths.stl[j], widths.transition[j], 1)
            })
            .sum())
    }
}

/// Swin-dense-residual-connected block:
/// `Z_j = H_trans(STL([Z, Z_1, …, Z_{j-1}]))`, output `α·Z_5 + Z`.
#[derive(Clone, Debug)]
pub struct Sdrcb {
    pub spec: SdrcbSpec,
    pub widths: SdrcbWidths,
    pub stls: Vec<Stl>,
    pub transitions: Vec<Conv>,
}

impl Sdrcb {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, spec: SdrcbSpec) -> Result<Self> {
        let widths = SdrcbWidths::new(spec.channels, spec.growth);
        let heads = widths.heads(spec.head_dim)?;
        let mut pb = pb.child(name);
        let mut stls = Vec::with_capacity(SDRCB_STAGES);
        let mut transitions = Vec::with_capacity(SDRCB_STAGES);
        for j in 0..SDRCB_STAGES {
            stls.push(Stl::new(
                &mut pb,
                &format!("stl{j}"),
                widths.stl[j],
                heads[j],
                spec.window,
                spec.shift(j),
                spec.mlp_ratio,
            )?);
            transitions.push(Conv::new(
                &mut pb,
                &format!("trans{j}"),
                widths.stl[j],
                widths.transition[j],
                1,
            )?);
        }
        Ok(Sdrcb {
            spec,
            widths,
            stls,
            transitions,
        })
    }

    pub fn forward<F: Real>(&self, cx: &Ctx<'_, F>, z: &Var<F>) -> Result<Var<F>> {
        let g = cx.graph();
        let mut feats = vec![z.clone()];
        for (stl, trans) in self.stls.iter().zip(&self.transitions) {
            let input = if feats.len() == 1 {
                z.clone()
            } else {
                g.concat(&feats.iter().collect::<Vec<_>>(), 1)?
            };
            let s = stl.forward(cx, &input)?;
            let t = trans.forward(cx, &s)?;
            feats.push(g.activation(&t, Activation::LeakyRelu(TRANSITION_SLOPE)));
        }
        let last = feats.pop().expect("five stages produce output");
        g.add(&g.scale(&last, self.spec.alpha), z)
    }
}

/// Heads of the three windowed branches of a MAL.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MalHeads {
    pub grid: usize,
    pub window: usize,
    pub shifted: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct MalSpec {
    pub channels: usize,
    pub window: usize,
    pub grid: usize,
    pub heads: MalHeads,
    pub squeeze: usize,
}

impl MalSpec {
    /// `[C/2 (grid), C/4 (window), C/4 (shifted window)]`
    pub fn split_sizes(&self) -> Result<[usize; 3]> {
        if !self.channels.is_multiple_of(4) {
            return Err(Error::config(
                "channels",
                format!("{} is not divisible by 4", self.channels),
            ));
        }
        let c = self.channels;
        Ok([c / 2, c / 4, c / 4])
    }

    pub fn num_params(&self) -> Result<usize> {
        let [cg, cw, cs] = self.split_sizes()?;
        Ok(Mhsa::num_params(cw, self.heads.window, self.window)
            + Mhsa::num_params(cs, self.heads.shifted, self.window)
            + Mhsa::num_params(cg, self.heads.grid, self.window)
            + ChannelAttn::num_params(self.channels, self.squeeze)
            + 2 * self.channels)
    }
}

/// Mix attention layer:
/// `LN(Cat(W-MSA(F_W1), SW-MSA(F_W2), Grid-MSA(F_G)) + CA(F_in)) + F_in`.
#[derive(Clone, Debug)]
pub struct Mal {
    pub spec: MalSpec,
    pub window_attn: Mhsa,
    pub shifted_attn: Mhsa,
    pub grid_attn: Mhsa,
    pub channel_attn: ChannelAttn,
    pub norm: Norm,
}

impl Mal {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, spec: MalSpec) -> Result<Self> {
        let [cg, cw, cs] = spec.split_sizes()?;
        if spec.window < 2 || !spec.window.is_multiple_of(2) {
            return Err(Error::config(
                "window_size",
                format!("{} must be even for the half-window shift", spec.window),
            ));
        }
        let mut pb = pb.child(name);
        Ok(Mal {
            spec,
            window_attn: Mhsa::new(&mut pb, "w_msa", cw, spec.heads.window, spec.window)?,
            shifted_attn: Mhsa::new(&mut pb, "sw_msa", cs, spec.heads.shifted, spec.window)?,
            grid_attn: Mhsa::new(&mut pb, "grid_msa", cg, spec.heads.grid, spec.window)?,
            channel_attn: ChannelAttn::new(&mut pb, "ca", spec.channels, spec.squeeze)?,
            norm: Norm::new(&mut pb, "norm", spec.channels)?,
        })
    }

    pub fn forward<F: Real>(&self, cx: &Ctx<'_, F>, f_in: &Var<F>) -> Result<Var<F>> {
        let g = cx.graph();
        let parts = g.split(f_in, 1, &self.spec.split_sizes()?)?;
        let (f_g, f_w1, f_w2) = (&parts[0], &parts[1], &parts[2]);
        let x_w1 = attention::w_msa(cx, f_w1, &self.window_attn, self.spec.window)?;
        let x_w2 = attention::sw_msa(cx, f_w2, &self.shifted_attn, self.spec.window, self.spec.window / 2)?;
        let x_g = attention::grid_msa(cx, f_g, &self.grid_attn, self.spec.grid)?;
        let x_c = attention::channel_attention(cx, f_in, &self.channel_attn)?;
        let mixed = g.add(&g.concat(&[&x_w1, &x_w2, &x_g], 1)?, &x_c)?;
        g.add(&self.norm.forward_nchw(cx, &mixed)?, f_in)
    }
}

/// Hybrid grid attention block with post-norm residuals:
/// `F_M = LN(MAL(F)) + F`, output `LN(MLP(F_M)) + F_M`.
#[derive(Clone, Debug)]
pub struct Hgab {
    pub mal: Mal,
    pub norm1: Norm,
    pub mlp: Mlp,
    pub norm2: Norm,
}

impl Hgab {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, spec: MalSpec, mlp_ratio: usize) -> Result<Self> {
        let mut pb = pb.child(name);
        Ok(Hgab {
            mal: Mal::new(&mut pb, "mal", spec)?,
            norm1: Norm::new(&mut pb, "norm1", spec.channels)?,
            mlp: Mlp::new(&mut pb, "mlp", spec.channels, mlp_ratio)?,
            norm2: Norm::new(&mut pb, "norm2", spec.channels)?,
        })
    }

    pub fn forward<F: Real>(&self, cx: &Ctx<'_, F>, f_in: &Var<F>) -> Result<Var<F>> {
        let [_, _, h, w] = f_in.value().dims4()?;
        let g = cx.graph();
        let m = self.mal.forward(cx, f_in)?;
        let f_m = g.add(&self.norm1.forward_nchw(cx, &m)?, f_in)?;
        let t = to_tokens(cx, &f_m)?;
        let y = self.norm2.forward(cx, &self.mlp.forward(cx, &t)?)?;
        from_tokens(cx, &g.add(&y, &t)?, h, w)
    }

    pub fn num_params(spec: &MalSpec, mlp_ratio: usize) -> Result<usize> {
        Ok(spec.num_params()? + 4 * spec.channels + Mlp::num_params(spec.channels, mlp_ratio))
    }
}

/// Residual group: `x + conv3×3(HGAB(SDRCB_S(…SDRCB_1(x))))`.
#[derive(Clone, Debug)]
pub struct Rdg {
    pub sdrcbs: Vec<Sdrcb>,
    pub hgab: Hgab,
    pub conv: Conv,
}

impl Rdg {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        blocks: usize,
        sdrcb: SdrcbSpec,
        mal: MalSpec,
    ) -> Result<Self> {
        let mut pb = pb.child(name);
        let sdrcbs = (0..blocks)
            .map(|i| Sdrcb::new(&mut pb, &format!("sdrcb{i}"), sdrcb))
            .collect::<Result<Vec<_>>>()?;
        Ok(Rdg {
            sdrcbs,
            hgab: Hgab::new(&mut pb, "hgab", mal, sdrcb.mlp_ratio)?,
            conv: Conv::new(&mut pb, "conv", sdrcb.channels, sdrcb.channels, 3)?,
        })
    }

    pub fn forward<F: Real>(&self, cx: &Ctx<'_, F>, x: &Var<F>) -> Result<Var<F>> {
        let mut y = x.clone();
        for block in &self.sdrcbs {
            y = block.forward(cx, &y)?;
        }
        let y = self.hgab.forward(cx, &y)?;
        let y = self.conv.forward(cx, &y)?;
        cx.graph().add(x, &y)
    }

    pub fn num_params(blocks: usize, sdrcb: &SdrcbSpec, mal: &MalSpec) -> Result<usize> {
        Ok(blocks * sdrcb.num_params()?
            + Hgab::num_params(mal, sdrcb.mlp_ratio)?
            + Conv::num_params(sdrcb.channels, sdrcb.channels, 3))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn width_ledger_for_c16_g8() {
        let w = SdrcbWidths::new(16, 8);
        assert_eq!(w.stl, [16, 24, 32, 40, 48]);
        assert_eq!(w.transition, [8, 8, 8, 8, 16]);
        assert_eq!(w.heads(4).unwrap(), [4, 6, 8, 10, 12]);
        assert!(w.heads(5).is_err());
    }

    #[test]
    fn mal_split_for_180_channels() {
        let spec = MalSpec {
            channels: 180,
            window: 16,
            grid: 16,
            heads: MalHeads {
                grid: 3,
                window: 3,
                shifted: 3,
            },
            squeeze: 16,
        };
        assert_eq!(spec.split_sizes().unwrap(), [90, 45, 45]);
        let bad = MalSpec { channels: 18, ..spec };
        assert!(matches!(bad.split_sizes(), Err(Error::Config { .. })));
    }

    #[test]
    fn shift_alternates() {
        let spec = SdrcbSpec {
            channels: 16,
            growth: 8,
            head_dim: 4,
            window: 4,
            mlp_ratio: 2,
            alpha: 0.2,
        };
        let shifts: Vec<_> = (0..SDRCB_STAGES).map(|j| spec.shift(j)).collect();
        assert_eq!(shifts, [0, 2, 0, 2, 0]);
    }
}
