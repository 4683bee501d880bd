//! Finite-difference gradient checks, a loop-based attention oracle and the
//! toy overfitting trainer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::{self, ChannelAttn, Mhsa, LN_EPS};
use crate::autograd::{Activation, Graph, OpKind, Var};
use crate::blocks::{Hgab, Mal, MalHeads, MalSpec, Sdrcb, SdrcbSpec, Stl};
use crate::error::{Error, Result};
use crate::imaging;
use crate::layout;
use crate::model::{build_model, Haat, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Ctx, ParamBuilder, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Central differences of a scalar function, element by element.
pub fn finite_diff_grad(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckResult {
    pub name: String,
    pub max_rel_err: f64,
    /// Parameter name and flat element index of the worst mismatch.
    pub worst: Option<(String, usize)>,
    pub pass: bool,
    pub tol: f64,
}

impl std::fmt::Display for GradCheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{} {verdict} {:.3e}", self.name, self.max_rel_err)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    pub floor: f64,
    /// Probe at most this many elements per tensor (chosen by seed).
    pub max_per_tensor: Option<usize>,
    /// Test hook: corrupt the backward of one op kind.
    pub fault: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-4,
            tol: 1e-4,
            floor: 1e-6,
            max_per_tensor: None,
            fault: None,
        }
    }
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares tape gradients of `sum(f(store) ⊙ R)` against central
/// differences for every tensor in `store`, with `R` drawn from `seed`.
pub fn gradcheck_with(
    name: &str,
    store: &ParamStore<f64>,
    f: impl Fn(&Ctx<'_, f64>) -> Result<Var<f64>>,
    seed: u64,
    opts: GradCheckOptions,
) -> Result<GradCheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let probe_shape = {
        let g = Graph::inference();
        f(&Ctx::new(&g, store))?.shape().to_vec()
    };
    let weights = Tensor::from_fn(&probe_shape, |_| rng.gen_range(-1.0..1.0));
    let loss_of = |s: &ParamStore<f64>| -> Result<f64> {
        let g = Graph::inference();
        let y = f(&Ctx::new(&g, s))?;
        Ok(y.value().data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    };

    let graph = Graph::new();
    graph.inject_fault(opts.fault);
    let cx = Ctx::new(&graph, store);
    let y = f(&cx)?;
    let loss = graph.sum(&graph.mul(&y, &Var::constant(weights.clone()))?);
    let grads = graph.backward(&loss)?;

    let mut probe = store.clone();
    let mut worst = (0.0f64, None);
    for i in 0..store.len() {
        let id = ParamId(i);
        let n = store.get(id).len();
        let analytic = grads.get(&cx.vars()[i]).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        let elems: Vec<usize> = match opts.max_per_tensor {
            Some(k) if k < n => (0..k).map(|_| rng.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for e in elems {
            let orig = store.get(id).data()[e];
            let mut at = |x: f64| -> Result<f64> {
                probe.get_mut(id).data_mut()[e] = x;
                let l = loss_of(&probe);
                probe.get_mut(id).data_mut()[e] = orig;
                l
            };
            let a = analytic.data()[e];
            // Kinks (ReLU family) inside ±h spoil the central difference;
            // smaller steps converge to the true slope, so refining only
            // the failures cannot hide a wrong tape gradient.
            let mut err = f64::INFINITY;
            for refine in [1.0, 1e-1, 1e-2] {
                let h = opts.h * refine;
                let (up, down) = (at(orig + h)?, at(orig - h)?);
                err = err.min(rel_err(a, (up - down) / (2.0 * h), opts.floor));
                if err < opts.tol {
                    break;
                }
            }
            if err > worst.0 || worst.1.is_none() {
                worst = (err, Some((store.name(id).to_string(), e)));
            }
        }
    }
    Ok(GradCheckResult {
        name: name.to_string(),
        max_rel_err: worst.0,
        worst: worst.1,
        pass: worst.0 < opts.tol,
        tol: opts.tol,
    })
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * std
}

/// Replaces every tensor with fresh normal noise so zero-initialized
/// biases and tables carry gradient signal.
pub fn randomize(store: &mut ParamStore<f64>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..store.len() {
        store.get_mut(ParamId(i)).data_mut().iter_mut().for_each(|v| *v = normal(&mut rng, std));
    }
}

/// Parameters plus a random input registered as the last tensor, `"input"`.
struct Fixture<M> {
    module: M,
    store: ParamStore<f64>,
    input: ParamId,
}

fn fixture<M>(
    seed: u64,
    input_shape: &[usize],
    std: f64,
    build: impl FnOnce(&mut ParamBuilder<'_>) -> Result<M>,
) -> Result<Fixture<M>> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let module = build(&mut ParamBuilder::new(&mut store, &mut rng))?;
    let mut store = store.cast::<f64>();
    randomize(&mut store, std, seed.wrapping_add(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let input = store.insert("input", Tensor::from_fn(input_shape, |_| normal(&mut rng, 1.0)))?;
    Ok(Fixture { module, store, input })
}

/// Gradcheck suite granularity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Primitives,
    Blocks,
    Model,
}

impl std::str::FromStr for Level {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "primitives" => Ok(Level::Primitives),
            "blocks" => Ok(Level::Blocks),
            "model" => Ok(Level::Model),
            _ => Err(Error::config("level", format!("unknown level `{s}`"))),
        }
    }
}

fn inputs(seed: u64, shapes: &[(&str, &[usize])]) -> Result<ParamStore<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in shapes {
        store.insert(*name, Tensor::from_fn(shape, |_| normal(&mut rng, 1.0)))?;
    }
    Ok(store)
}

fn p(i: usize) -> ParamId {
    ParamId(i)
}

/// Every primitive op, each on its own small random inputs.
pub fn primitive_checks(seed: u64, opts: GradCheckOptions) -> Result<Vec<GradCheckResult>> {
    let mut out = Vec::new();
    let mut run = |name: &str,
                   shapes: &[(&str, &[usize])],
                   f: &dyn Fn(&Ctx<'_, f64>) -> Result<Var<f64>>|
     -> Result<()> {
        let store = inputs(seed, shapes)?;
        out.push(gradcheck_with(name, &store, f, seed, opts)?);
        Ok(())
    };
    run("linear", &[("x", &[2, 3, 4]), ("w", &[5, 4]), ("b", &[5])], &|cx| {
        cx.graph().linear(cx.p(p(0)), cx.p(p(1)), Some(cx.p(p(2))))
    })?;
    run("matmul", &[("a", &[2, 3, 4]), ("b", &[2, 4, 5])], &|cx| {
        cx.graph().matmul(cx.p(p(0)), cx.p(p(1)))
    })?;
    run("matmul_bt", &[("a", &[3, 4]), ("b", &[5, 4])], &|cx| {
        cx.graph().matmul_ext(cx.p(p(0)), cx.p(p(1)), true)
    })?;
    run("conv2d", &[("x", &[2, 2, 5, 4]), ("w", &[3, 2, 3, 3]), ("b", &[3])], &|cx| {
        cx.graph().conv2d(cx.p(p(0)), cx.p(p(1)), Some(cx.p(p(2))), 1)
    })?;
    run("conv2d_1x1", &[("x", &[1, 3, 3, 3]), ("w", &[2, 3, 1, 1]), ("b", &[2])], &|cx| {
        cx.graph().conv2d(cx.p(p(0)), cx.p(p(1)), Some(cx.p(p(2))), 0)
    })?;
    run("add", &[("a", &[2, 3]), ("b", &[2, 3])], &|cx| cx.graph().add(cx.p(p(0)), cx.p(p(1))))?;
    run("mul", &[("a", &[2, 3]), ("b", &[2, 3])], &|cx| cx.graph().mul(cx.p(p(0)), cx.p(p(1))))?;
    run("scale", &[("a", &[4])], &|cx| Ok(cx.graph().scale(cx.p(p(0)), -1.7)))?;
    run("add_broadcast", &[("x", &[2, 3, 4, 5]), ("b", &[3, 5])], &|cx| {
        cx.graph().add_broadcast(cx.p(p(0)), cx.p(p(1)), [2, 3, 4, 5])
    })?;
    run("scale_channels", &[("x", &[2, 3, 2, 2]), ("s", &[2, 3, 1, 1])], &|cx| {
        cx.graph().scale_channels(cx.p(p(0)), cx.p(p(1)))
    })?;
    run("layer_norm", &[("x", &[3, 6]), ("g", &[6]), ("b", &[6])], &|cx| {
        cx.graph().layer_norm(cx.p(p(0)), cx.p(p(1)), cx.p(p(2)), LN_EPS)
    })?;
    run("softmax", &[("x", &[3, 5])], &|cx| Ok(cx.graph().softmax(cx.p(p(0)))))?;
    for (name, act) in [
        ("leaky_relu", Activation::LeakyRelu(0.2)),
        ("gelu", Activation::Gelu),
        ("relu", Activation::Relu),
        ("sigmoid", Activation::Sigmoid),
    ] {
        run(name, &[("x", &[2, 7])], &|cx| Ok(cx.graph().activation(cx.p(p(0)), act)))?;
    }
    run("global_avg_pool", &[("x", &[2, 3, 3, 2])], &|cx| cx.graph().global_avg_pool(cx.p(p(0))))?;
    run("window_partition", &[("x", &[1, 2, 4, 4])], &|cx| {
        let x = cx.p(p(0));
        cx.graph().gather(x, &layout::window_partition_map(x.shape(), 2)?)
    })?;
    run("grid_partition", &[("x", &[1, 2, 4, 4])], &|cx| {
        let x = cx.p(p(0));
        cx.graph().gather(x, &layout::grid_partition_map(x.shape(), 2)?)
    })?;
    run("cyclic_shift", &[("x", &[1, 2, 4, 4])], &|cx| {
        let x = cx.p(p(0));
        cx.graph().gather(x, &layout::cyclic_shift_map(x.shape(), -1, -1)?)
    })?;
    run("reflect_pad", &[("x", &[1, 2, 3, 5])], &|cx| {
        let x = cx.p(p(0));
        cx.graph().gather(x, &layout::pad_to_multiple_map(x.shape(), 4)?.0)
    })?;
    run("pixel_shuffle", &[("x", &[1, 8, 2, 2])], &|cx| {
        let x = cx.p(p(0));
        cx.graph().gather(x, &layout::pixel_shuffle_map(x.shape(), 2)?)
    })?;
    run("concat", &[("a", &[1, 2, 3]), ("b", &[1, 3, 3])], &|cx| {
        cx.graph().concat(&[cx.p(p(0)), cx.p(p(1))], 1)
    })?;
    run("split", &[("x", &[2, 5, 2])], &|cx| {
        let parts = cx.graph().split(cx.p(p(0)), 1, &[2, 3])?;
        cx.graph().mul(&parts[0], &cx.graph().narrow(&parts[1], 1, 1, 2)?)
    })?;
    run("reshape", &[("x", &[2, 6])], &|cx| cx.graph().reshape(cx.p(p(0)), &[3, 4]))?;
    run("sum", &[("x", &[3, 3])], &|cx| Ok(cx.graph().sum(cx.p(p(0)))))?;
    run("l1_loss", &[("x", &[2, 4])], &|cx| {
        cx.graph().l1_loss(cx.p(p(0)), &Tensor::full(&[2, 4], 0.05))
    })?;
    Ok(out)
}

fn attn_checks(seed: u64, opts: GradCheckOptions) -> Result<Vec<GradCheckResult>> {
    let mut out = Vec::new();
    let fx = fixture(seed, &[1, 4, 8, 8], 0.3, |pb| Mhsa::new(pb, "attn", 4, 2, 4))?;
    let x = fx.input;
    out.push(gradcheck_with(
        "w_msa",
        &fx.store,
        |cx| attention::w_msa(cx, cx.p(x), &fx.module, 4),
        seed,
        opts,
    )?);
    out.push(gradcheck_with(
        "sw_msa",
        &fx.store,
        |cx| attention::sw_msa(cx, cx.p(x), &fx.module, 4, 2),
        seed,
        opts,
    )?);
    out.push(gradcheck_with(
        "grid_msa",
        &fx.store,
        |cx| attention::grid_msa(cx, cx.p(x), &fx.module, 4),
        seed,
        opts,
    )?);
    let fx = fixture(seed, &[2, 8, 3, 3], 0.3, |pb| ChannelAttn::new(pb, "ca", 8, 4))?;
    out.push(gradcheck_with(
        "channel_attention",
        &fx.store,
        |cx| attention::channel_attention(cx, cx.p(fx.input), &fx.module),
        seed,
        opts,
    )?);
    Ok(out)
}

/// Toy block configuration at `C = 8` on `8×8` inputs.
pub fn block_spec() -> (SdrcbSpec, MalSpec) {
    (
        SdrcbSpec {
            channels: 8,
            growth: 4,
            head_dim: 4,
            window: 4,
            mlp_ratio: 2,
            alpha: 0.2,
        },
        MalSpec {
            channels: 8,
            window: 4,
            grid: 4,
            heads: MalHeads {
                grid: 2,
                window: 1,
                shifted: 1,
            },
            squeeze: 4,
        },
    )
}

pub fn block_checks(seed: u64, opts: GradCheckOptions) -> Result<Vec<GradCheckResult>> {
    let (sdrcb, mal) = block_spec();
    let shape = [1, 8, 8, 8];
    let mut out = attn_checks(seed, opts)?;

    let fx = fixture(seed, &shape, 0.3, |pb| Stl::new(pb, "stl", 8, 2, 4, 2, 2))?;
    out.push(gradcheck_with("stl", &fx.store, |cx| fx.module.forward(cx, cx.p(fx.input)), seed, opts)?);

    let fx = fixture(seed, &shape, 0.3, |pb| Sdrcb::new(pb, "sdrcb", sdrcb))?;
    out.push(gradcheck_with("sdrcb", &fx.store, |cx| fx.module.forward(cx, cx.p(fx.input)), seed, opts)?);

    let fx = fixture(seed, &shape, 0.3, |pb| Mal::new(pb, "mal", mal))?;
    out.push(gradcheck_with("mal", &fx.store, |cx| fx.module.forward(cx, cx.p(fx.input)), seed, opts)?);

    let fx = fixture(seed, &shape, 0.3, |pb| Hgab::new(pb, "hgab", mal, 2))?;
    out.push(gradcheck_with("hgab", &fx.store, |cx| fx.module.forward(cx, cx.p(fx.input)), seed, opts)?);
    Ok(out)
}

/// Toy model shrunk to `C = 8`, one group of one block, scale 2.
pub fn gradcheck_model_config() -> ModelConfig {
    let (sdrcb, mal) = block_spec();
    ModelConfig {
        channels: 8,
        num_rdg: 1,
        sdrcbs_per_rdg: 1,
        growth: sdrcb.growth,
        window_size: 4,
        grid_size: 4,
        head_dim: sdrcb.head_dim,
        mal_heads: mal.heads,
        squeeze_factor: mal.squeeze,
        mlp_ratio: 2,
        alpha: 0.2,
        scale: 2,
        img_channels: 3,
    }
}

pub fn model_check(seed: u64, opts: GradCheckOptions) -> Result<GradCheckResult> {
    model_check_with_std(seed, MODEL_PARAM_STD, opts)
}

/// Parameter noise for the whole-model check. Larger values make the
/// stacked convolutions blow the output up until finite-difference
/// round-off dominates.
pub const MODEL_PARAM_STD: f64 = 0.05;

pub fn model_check_with_std(seed: u64, std: f64, opts: GradCheckOptions) -> Result<GradCheckResult> {
    let (model, store) = build_model(&gradcheck_model_config(), seed)?;
    let mut store = store.cast::<f64>();
    randomize(&mut store, std, seed.wrapping_add(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let input = store.insert("input", Tensor::from_fn(&[1, 3, 8, 8], |_| rng.gen_range(0.0..1.0)))?;
    gradcheck_with("model", &store, |cx| model.forward(cx, cx.p(input)), seed, opts)
}

pub fn run_level(level: Level, seed: u64, opts: GradCheckOptions) -> Result<Vec<GradCheckResult>> {
    match level {
        Level::Primitives => primitive_checks(seed, opts),
        Level::Blocks => block_checks(seed, opts),
        Level::Model => Ok(vec![model_check(seed, opts)?]),
    }
}

/// Which query/key pairs may attend and the relative offset used for the
/// bias lookup, over the `H·W` tokens of one image in row-major order.
#[derive(Clone, Debug)]
pub struct AttnPattern {
    pub tokens: usize,
    pub allowed: Vec<bool>,
    pub offsets: Vec<(isize, isize)>,
}

impl AttnPattern {
    fn build(h: usize, w: usize, rule: impl Fn((isize, isize), (isize, isize)) -> Option<(isize, isize)>) -> Self {
        let t = h * w;
        let mut allowed = vec![false; t * t];
        let mut offsets = vec![(0, 0); t * t];
        for i in 0..t {
            for j in 0..t {
                let a = ((i / w) as isize, (i % w) as isize);
                let b = ((j / w) as isize, (j % w) as isize);
                if let Some(off) = rule(a, b) {
                    allowed[i * t + j] = true;
                    offsets[i * t + j] = off;
                }
            }
        }
        AttnPattern { tokens: t, allowed, offsets }
    }

    /// Tokens attend within the same `win×win` tile after a cyclic shift by
    /// `shift`, but never across the wrap-around seam.
    pub fn window(h: usize, w: usize, win: usize, shift: usize) -> Self {
        let (hh, ww, s, wn) = (h as isize, w as isize, shift as isize, win as isize);
        let tile = |(y, x): (isize, isize)| (((y - s).rem_euclid(hh)) / wn, ((x - s).rem_euclid(ww)) / wn);
        Self::build(h, w, |a, b| {
            let d = (a.0 - b.0, a.1 - b.1);
            (tile(a) == tile(b) && d.0.abs() < wn && d.1.abs() < wn).then_some(d)
        })
    }

    /// Tokens with equal coordinates modulo `stride` attend together; the
    /// offset is measured in group steps.
    pub fn grid(h: usize, w: usize, stride: usize) -> Self {
        let g = stride as isize;
        Self::build(h, w, |a, b| {
            (a.0.rem_euclid(g) == b.0.rem_euclid(g) && a.1.rem_euclid(g) == b.1.rem_euclid(g))
                .then_some(((a.0 - b.0) / g, (a.1 - b.1) / g))
        })
    }
}

/// Attention by explicit loops over allowed keys, for `tokens: [T, C]`.
pub fn naive_attention_oracle(
    tokens: &Tensor<f64>,
    p: &Mhsa,
    store: &ParamStore<f64>,
    pattern: &AttnPattern,
) -> Result<Tensor<f64>> {
    let (t, c) = (tokens.shape()[0], tokens.shape()[1]);
    if t != pattern.tokens || c != p.dim {
        return Err(Error::shape("oracle inputs disagree"));
    }
    let lin = |l: &crate::attention::Linear, x: &[f64]| -> Vec<f64> {
        let w = store.get(l.weight).data();
        let b = store.get(l.bias).data();
        (0..l.out_dim)
            .map(|o| b[o] + (0..l.in_dim).map(|i| w[o * l.in_dim + i] * x[i]).sum::<f64>())
            .collect()
    };
    let rows: Vec<&[f64]> = tokens.data().chunks_exact(c).collect();
    let q: Vec<Vec<f64>> = rows.iter().map(|r| lin(&p.query, r)).collect();
    let k: Vec<Vec<f64>> = rows.iter().map(|r| lin(&p.key, r)).collect();
    let v: Vec<Vec<f64>> = rows.iter().map(|r| lin(&p.value, r)).collect();
    let table = store.get(p.rel_table).data();
    let reach = p.table_window as isize - 1;
    let d = p.head_dim();
    let mut out = Vec::with_capacity(t * c);
    for i in 0..t {
        let mut mixed = vec![0.0; c];
        for h in 0..p.heads {
            let hs = h * d..(h + 1) * d;
            let mut keys = Vec::new();
            for j in (0..t).filter(|&j| pattern.allowed[i * t + j]) {
                let (dy, dx) = pattern.offsets[i * t + j];
                let row = (dy.clamp(-reach, reach) + reach) * (2 * reach + 1) + dx.clamp(-reach, reach) + reach;
                let dot: f64 = hs.clone().map(|e| q[i][e] * k[j][e]).sum();
                keys.push((j, dot / (d as f64).sqrt() + table[row as usize * p.heads + h]));
            }
            let max = keys.iter().map(|k| k.1).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = keys.iter().map(|k| (k.1 - max).exp()).sum();
            for (j, s) in keys {
                let a = (s - max).exp() / z;
                for e in hs.clone() {
                    mixed[e] += a * v[j][e];
                }
            }
        }
        out.extend(lin(&p.proj, &mixed));
    }
    Tensor::new(&[t, c], out)
}

/// Loss trajectory of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainCurve {
    pub losses: Vec<f64>,
    pub seed: u64,
    pub fingerprint: String,
}

impl TrainCurve {
    /// Trailing mean over `window` steps, defined from step `window - 1`.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        self.losses
            .windows(window)
            .map(|w| w.iter().sum::<f64>() / window as f64)
            .collect()
    }
}

pub fn fingerprint(cfg: &ModelConfig) -> String {
    format!(
        "C{}-R{}-S{}-g{}-w{}-grid{}-hd{}-mh{}.{}.{}-r{}-mlp{}-a{}-x{}",
        cfg.channels,
        cfg.num_rdg,
        cfg.sdrcbs_per_rdg,
        cfg.growth,
        cfg.window_size,
        cfg.grid_size,
        cfg.head_dim,
        cfg.mal_heads.grid,
        cfg.mal_heads.window,
        cfg.mal_heads.shifted,
        cfg.squeeze_factor,
        cfg.mlp_ratio,
        cfg.alpha,
        cfg.scale
    )
}

/// Deterministic 16×16 RGB test pattern with edges and smooth gradients.
pub fn synthetic_patch(size: usize) -> Tensor<f32> {
    let n = size as f32;
    Tensor::from_fn(&[1, 3, size, size], |i| {
        let (c, y, x) = (i / (size * size), (i / size) % size, i % size);
        let (fy, fx) = (y as f32 / n, x as f32 / n);
        let v = match c {
            0 => 0.5 + 0.4 * (6.0 * fx + 2.0 * fy).sin(),
            1 => if (x / 4 + y / 4) % 2 == 0 { 0.8 } else { 0.2 },
            _ => 0.2 + 0.6 * fy * fx + 0.1 * (9.0 * fy).cos(),
        };
        v.clamp(0.0, 1.0)
    })
}

/// Fits the model to map the bicubic downscale of `hr` back to `hr` with
/// Adam on the L1 loss. Returns the curve and the trained parameters.
pub fn train(
    model: &Haat,
    mut store: ParamStore<f32>,
    hr: &Tensor<f32>,
    steps: usize,
    seed: u64,
    adam: AdamConfig,
) -> Result<(TrainCurve, ParamStore<f32>)> {
    let lr_img = imaging::downscale(hr, model.config.scale)?;
    let mut opt = Adam::new(&store, adam);
    let mut losses = Vec::with_capacity(steps);
    let input = Var::constant(lr_img);
    for step in 0..steps {
        let graph = Graph::new();
        let cx = Ctx::new(&graph, &store);
        let y = model.forward(&cx, &input)?;
        let loss = graph.l1_loss(&y, hr)?;
        let value = loss.value().data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        losses.push(value);
        let mut grads = graph.backward(&loss)?;
        let vars = cx.vars().to_vec();
        drop(cx);
        drop(graph);
        opt.step(&mut store, &vars, &mut grads)?;
        log::debug!("step {step} loss {value:.6}");
    }
    Ok((
        TrainCurve {
            losses,
            seed,
            fingerprint: fingerprint(&model.config),
        },
        store,
    ))
}

/// Builds the model from `seed` and runs [`train`].
pub fn toy_overfit(
    cfg: &ModelConfig,
    hr: &Tensor<f32>,
    steps: usize,
    seed: u64,
    adam: AdamConfig,
) -> Result<(TrainCurve, Haat, ParamStore<f32>)> {
    let (model, store) = build_model(cfg, seed)?;
    let (curve, store) = train(&model, store, hr, steps, seed, adam)?;
    Ok((curve, model, store))
}
