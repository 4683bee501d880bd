//! Full network assembly: shallow convolution, residual deep feature groups,
//! global residual and the sub-pixel reconstruction head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::blocks::{Conv, MalHeads, MalSpec, Rdg, SdrcbSpec, SdrcbWidths};
use crate::error::{Error, Result};
use crate::layout;
use crate::params::{Ctx, ParamBuilder, ParamStore};
use crate::tensor::{Real, Tensor};

/// Every architectural hyperparameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub num_rdg: usize,
    pub sdrcbs_per_rdg: usize,
    /// Growth width `g` of the dense connections.
    pub growth: usize,
    pub window_size: usize,
    /// Stride of the Grid-MSA groups.
    pub grid_size: usize,
    /// Head dimension of the STLs inside the SDRCBs.
    pub head_dim: usize,
    pub mal_heads: MalHeads,
    pub squeeze_factor: usize,
    pub mlp_ratio: usize,
    pub alpha: f64,
    pub scale: usize,
    pub img_channels: usize,
}

impl ModelConfig {
    /// Desk-scale configuration used by tests and the toy trainer.
    pub fn toy() -> Self {
        ModelConfig {
            channels: 16,
            num_rdg: 2,
            sdrcbs_per_rdg: 2,
            growth: 8,
            window_size: 4,
            grid_size: 4,
            head_dim: 4,
            mal_heads: MalHeads {
                grid: 2,
                window: 1,
                shifted: 1,
            },
            squeeze_factor: 8,
            mlp_ratio: 2,
            alpha: 0.2,
            scale: 2,
            img_channels: 3,
        }
    }

    /// Published full-size configuration: 180 channels, 6 groups of 6
    /// blocks, window 16, squeeze factor 16.
    pub fn full() -> Self {
        ModelConfig {
            channels: 180,
            num_rdg: 6,
            sdrcbs_per_rdg: 6,
            growth: 90,
            window_size: 16,
            grid_size: 16,
            head_dim: 30,
            // 45-channel window branches cannot split into 2 heads.
            mal_heads: MalHeads {
                grid: 3,
                window: 3,
                shifted: 3,
            },
            squeeze_factor: 16,
            mlp_ratio: 2,
            alpha: 0.2,
            scale: 4,
            img_channels: 3,
        }
    }

    pub fn sdrcb_spec(&self) -> SdrcbSpec {
        SdrcbSpec {
            channels: self.channels,
            growth: self.growth,
            head_dim: self.head_dim,
            window: self.window_size,
            mlp_ratio: self.mlp_ratio,
            alpha: self.alpha,
        }
    }

    pub fn mal_spec(&self) -> MalSpec {
        MalSpec {
            channels: self.channels,
            window: self.window_size,
            grid: self.grid_size,
            heads: self.mal_heads,
            squeeze: self.squeeze_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("num_rdg", self.num_rdg),
            ("sdrcbs_per_rdg", self.sdrcbs_per_rdg),
            ("growth", self.growth),
            ("window_size", self.window_size),
            ("grid_size", self.grid_size),
            ("head_dim", self.head_dim),
            ("squeeze_factor", self.squeeze_factor),
            ("mlp_ratio", self.mlp_ratio),
            ("img_channels", self.img_channels),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.channels.is_multiple_of(4) {
            return Err(Error::config(
                "channels",
                format!("{} is not divisible by 4", self.channels),
            ));
        }
        if !self.window_size.is_multiple_of(2) {
            return Err(Error::config(
                "window_size",
                format!("{} must be even", self.window_size),
            ));
        }
        if !matches!(self.scale, 2..=4) {
            return Err(Error::config(
                "scale",
                format!("{} is not one of 2, 3, 4", self.scale),
            ));
        }
        if !self.alpha.is_finite() {
            return Err(Error::config("alpha", "must be finite"));
        }
        if self.squeeze_factor > self.channels {
            return Err(Error::config(
                "squeeze_factor",
                format!("{} exceeds {} channels", self.squeeze_factor, self.channels),
            ));
        }
        SdrcbWidths::new(self.channels, self.growth).heads(self.head_dim)?;
        let [cg, cw, cs] = self.mal_spec().split_sizes()?;
        let branches = [
            ("mal_heads.grid", cg, self.mal_heads.grid),
            ("mal_heads.window", cw, self.mal_heads.window),
            ("mal_heads.shifted", cs, self.mal_heads.shifted),
        ];
        for (field, width, heads) in branches {
            if heads == 0 || width % heads != 0 {
                return Err(Error::config(
                    field,
                    format!("branch width {width} is not divisible by {heads} heads"),
                ));
            }
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> Result<usize> {
        self.validate()?;
        let c = self.channels;
        let rdgs = self.num_rdg
            * Rdg::num_params(self.sdrcbs_per_rdg, &self.sdrcb_spec(), &self.mal_spec())?;
        let head: usize = upsample_factors(self.scale)?
            .iter()
            .map(|&r| Conv::num_params(c, c * r * r, 3))
            .sum();
        Ok(Conv::num_params(self.img_channels, c, 3)
            + rdgs
            + Conv::num_params(c, c, 3)
            + head
            + Conv::num_params(c, self.img_channels, 3))
    }

    /// Spatial multiple the body works on.
    pub fn pad_multiple(&self) -> usize {
        lcm(self.window_size, self.grid_size)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Pixel-shuffle factors of the reconstruction head.
pub fn upsample_factors(scale: usize) -> Result<Vec<usize>> {
    match scale {
        2 => Ok(vec![2]),
        3 => Ok(vec![3]),
        4 => Ok(vec![2, 2]),
        s => Err(Error::config("scale", format!("{s} is not one of 2, 3, 4"))),
    }
}

/// Sub-pixel convolution head: `conv(C→r²C) + shuffle(r)` per factor, then a
/// final convolution to image channels.
#[derive(Clone, Debug)]
pub struct ReconHead {
    pub stages: Vec<(Conv, usize)>,
    pub last: Conv,
}

impl ReconHead {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize, img_channels: usize, scale: usize) -> Result<Self> {
        let mut pb = pb.child("head");
        let stages = upsample_factors(scale)?
            .into_iter()
            .enumerate()
            .map(|(i, r)| Ok((Conv::new(&mut pb, &format!("up{i}"), channels, channels * r * r, 3)?, r)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ReconHead {
            stages,
            last: Conv::new(&mut pb, "last", channels, img_channels, 3)?,
        })
    }

    pub fn forward<F: Real>(&self, cx: &Ctx<'_, F>, features: &Var<F>) -> Result<Var<F>> {
        let g = cx.graph();
        let mut y = features.clone();
        for (conv, r) in &self.stages {
            let up = conv.forward(cx, &y)?;
            y = g.gather(&up, &layout::pixel_shuffle_map(up.shape(), *r)?)?;
        }
        self.last.forward(cx, &y)
    }
}

/// The assembled network. Parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Haat {
    pub config: ModelConfig,
    pub shallow: Conv,
    pub rdgs: Vec<Rdg>,
    pub conv_after_body: Conv,
    pub head: ReconHead,
}

/// Builds the network and initializes all parameters from `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<(Haat, ParamStore<f32>)> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pb = ParamBuilder::new(&mut store, &mut rng);
    let c = config.channels;
    let shallow = Conv::new(&mut pb, "shallow", config.img_channels, c, 3)?;
    let rdgs = {
        let mut body = pb.child("body");
        (0..config.num_rdg)
            .map(|i| {
                Rdg::new(
                    &mut body,
                    &format!("rdg{i}"),
                    config.sdrcbs_per_rdg,
                    config.sdrcb_spec(),
                    config.mal_spec(),
                )
            })
            .collect::<Result<Vec<_>>>()?
    };
    let conv_after_body = Conv::new(&mut pb, "conv_after_body", c, c, 3)?;
    let head = ReconHead::new(&mut pb, c, config.img_channels, config.scale)?;
    let model = Haat {
        config: *config,
        shallow,
        rdgs,
        conv_after_body,
        head,
    };
    Ok((model, store))
}

impl Haat {
    /// `[B, img_channels, H, W] -> [B, img_channels, sH, sW]`, unclamped.
    pub fn forward<F: Real>(&self, cx: &Ctx<'_, F>, x: &Var<F>) -> Result<Var<F>> {
        let [_, c, h, w] = x.value().dims4()?;
        if c != self.config.img_channels {
            return Err(Error::shape(format!(
                "model expects {} image channels, input has {c}",
                self.config.img_channels
            )));
        }
        let g = cx.graph();
        let (pad, _) = layout::pad_to_multiple_map(x.shape(), self.config.pad_multiple())?;
        let x = g.gather(x, &pad)?;
        let shallow = self.shallow.forward(cx, &x)?;
        let mut body = shallow.clone();
        for rdg in &self.rdgs {
            body = rdg.forward(cx, &body)?;
        }
        let features = g.add(&self.conv_after_body.forward(cx, &body)?, &shallow)?;
        let out = self.head.forward(cx, &features)?;
        let s = self.config.scale;
        let extent = layout::Extent { h: h * s, w: w * s };
        g.gather(&out, &layout::crop_map(out.shape(), extent)?)
    }

    /// Inference without recording a tape.
    pub fn upscale<F: Real>(&self, store: &ParamStore<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        let graph = Graph::inference();
        let cx = Ctx::new(&graph, store);
        let y = self.forward(&cx, &Var::constant(x.clone()))?;
        if !y.value().all_finite() {
            return Err(Error::NonFinite("model forward"));
        }
        Ok(y.into_value())
    }
}
