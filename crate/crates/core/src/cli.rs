//! `haat` command-line interface.
//!
//! Exit codes: 0 success, 1 operational failure, 2 usage or configuration
//! error. Diagnostics go to stderr, data to files or stdout.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::blocks::MalHeads;
use crate::error::{Error, Result};
use crate::eval::{self, Bicubic, EvalOptions, ModelUpscaler, Upscaler};
use crate::imaging::{self, MetricSpace};
use crate::model::{build_model, ModelConfig};
use crate::optim::AdamConfig;
use crate::tensor::Tensor;
use crate::verification::{self, GradCheckOptions, Level};
use crate::weights;

#[derive(Parser, Debug)]
#[command(name = "haat", version, about = "Hybrid attention aggregation transformer for image super-resolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a model from a preset or config file and write its weights.
    InitWeights(InitArgs),
    /// Super-resolve one PNG.
    Upscale(UpscaleArgs),
    /// Score a folder of HR PNGs against their bicubic-downscaled inputs.
    Benchmark(BenchArgs),
    /// Compare tape gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Overfit the model on a single HR patch.
    TrainToy(TrainArgs),
}

#[derive(Args, Debug)]
pub struct InitArgs {
    /// `toy`, `full`, or a key=value config file.
    #[arg(long, default_value = "toy")]
    pub config: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Override the preset's upscaling factor.
    #[arg(long)]
    pub scale: Option<usize>,
}

#[derive(Args, Debug)]
pub struct UpscaleArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, required_unless_present = "bicubic", conflicts_with = "bicubic")]
    pub weights: Option<PathBuf>,
    /// Evaluate plain bicubic upscaling instead of a model.
    #[arg(long)]
    pub bicubic: bool,
    #[arg(long)]
    pub hr_dir: PathBuf,
    /// Required with --bicubic; must match the weights otherwise.
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Score BT.601 luma instead of RGB.
    #[arg(long)]
    pub y_channel: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// primitives, blocks or model
    #[arg(long, default_value = "blocks")]
    pub level: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// HR training patch; defaults to a built-in 16×16 pattern.
    #[arg(long)]
    pub hr: Option<PathBuf>,
    /// Start from these weights instead of a fresh toy model.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub out_weights: Option<PathBuf>,
    #[arg(long)]
    pub curve_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
}

const CONFIG_KEYS: [&str; 15] = [
    "channels",
    "num_rdg",
    "sdrcbs_per_rdg",
    "growth",
    "window_size",
    "grid_size",
    "head_dim",
    "mal_heads_grid",
    "mal_heads_window",
    "mal_heads_shifted",
    "squeeze_factor",
    "mlp_ratio",
    "alpha",
    "scale",
    "img_channels",
];

/// Parses `key = value` lines. `base = toy|full` picks the starting preset
/// (default toy); `#` starts a comment.
pub fn parse_config(text: &str) -> Result<ModelConfig> {
    let mut pairs = Vec::new();
    let mut base = ModelConfig::toy();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config("config", format!("line {}: expected key = value", lineno + 1))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k == "base" {
            base = preset(v).ok_or_else(|| Error::config("config", format!("unknown base `{v}`")))?;
        } else {
            pairs.push((lineno + 1, k.to_string(), v.to_string()));
        }
    }
    let mut cfg = base;
    for (lineno, k, v) in pairs {
        let field = CONFIG_KEYS
            .iter()
            .copied()
            .find(|&f| f == k || (k == "stl_growth" && f == "growth"))
            .ok_or_else(|| Error::config("config", format!("line {lineno}: unknown key `{k}`")))?;
        let int = || {
            v.parse::<usize>()
                .map_err(|_| Error::config(field, format!("`{v}` is not a non-negative integer")))
        };
        match field {
            "channels" => cfg.channels = int()?,
            "num_rdg" => cfg.num_rdg = int()?,
            "sdrcbs_per_rdg" => cfg.sdrcbs_per_rdg = int()?,
            "growth" => cfg.growth = int()?,
            "window_size" => cfg.window_size = int()?,
            "grid_size" => cfg.grid_size = int()?,
            "head_dim" => cfg.head_dim = int()?,
            "mal_heads_grid" => cfg.mal_heads.grid = int()?,
            "mal_heads_window" => cfg.mal_heads.window = int()?,
            "mal_heads_shifted" => cfg.mal_heads.shifted = int()?,
            "squeeze_factor" => cfg.squeeze_factor = int()?,
            "mlp_ratio" => cfg.mlp_ratio = int()?,
            "alpha" => {
                cfg.alpha = v
                    .parse()
                    .map_err(|_| Error::config("alpha", format!("`{v}` is not a number")))?
            }
            "scale" => cfg.scale = int()?,
            "img_channels" => cfg.img_channels = int()?,
            _ => unreachable!(),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Renders a config in the format [`parse_config`] reads.
pub fn format_config(cfg: &ModelConfig) -> String {
    let MalHeads { grid, window, shifted } = cfg.mal_heads;
    let vals = [
        cfg.channels.to_string(),
        cfg.num_rdg.to_string(),
        cfg.sdrcbs_per_rdg.to_string(),
        cfg.growth.to_string(),
        cfg.window_size.to_string(),
        cfg.grid_size.to_string(),
        cfg.head_dim.to_string(),
        grid.to_string(),
        window.to_string(),
        shifted.to_string(),
        cfg.squeeze_factor.to_string(),
        cfg.mlp_ratio.to_string(),
        cfg.alpha.to_string(),
        cfg.scale.to_string(),
        cfg.img_channels.to_string(),
    ];
    CONFIG_KEYS
        .iter()
        .zip(vals)
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

fn preset(name: &str) -> Option<ModelConfig> {
    match name {
        "toy" => Some(ModelConfig::toy()),
        "full" => Some(ModelConfig::full()),
        _ => None,
    }
}

pub fn resolve_config(spec: &str) -> Result<ModelConfig> {
    if let Some(cfg) = preset(spec) {
        return Ok(cfg);
    }
    let text = fs::read_to_string(spec)
        .map_err(|e| Error::config("config", format!("`{spec}` is neither a preset nor a readable file: {e}")))?;
    parse_config(&text)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents)?;
    Ok(())
}

fn init_weights(a: &InitArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.config)?;
    if let Some(s) = a.scale {
        cfg.scale = s;
    }
    let (_, store) = build_model(&cfg, a.seed)?;
    weights::save_weights(&store, &cfg, &a.out)?;
    log::info!(
        "wrote {} tensors ({} parameters) to {}",
        store.len(),
        store.num_elements(),
        a.out.display()
    );
    Ok(())
}

fn upscale(a: &UpscaleArgs) -> Result<()> {
    let (model, store) = weights::load_model(&a.weights)?;
    let img = imaging::load_image(&a.input)?;
    let y = model.upscale(&store, &imaging::to_unit_tensor::<f32>(&img))?;
    imaging::save_image(&imaging::from_unit_tensor(&y)?, &a.out)
}

fn benchmark(a: &BenchArgs, out: &mut dyn Write) -> Result<()> {
    let up: Box<dyn Upscaler> = match &a.weights {
        Some(path) => {
            let (model, store) = weights::load_model(path)?;
            if let Some(s) = a.scale.filter(|&s| s != model.config.scale) {
                return Err(Error::config(
                    "scale",
                    format!("--scale {s} but the weights are for x{}", model.config.scale),
                ));
            }
            Box::new(ModelUpscaler { model, store })
        }
        None => {
            let s = a
                .scale
                .ok_or_else(|| Error::config("scale", "--bicubic needs --scale"))?;
            if !(2..=4).contains(&s) {
                return Err(Error::config("scale", format!("{s} is not one of 2, 3, 4")));
            }
            Box::new(Bicubic(s))
        }
    };
    let opts = EvalOptions {
        jobs: a.jobs,
        space: if a.y_channel { MetricSpace::Y } else { MetricSpace::Rgb },
    };
    let report = eval::evaluate_folder(up.as_ref(), &a.hr_dir, opts)?;
    if let Some(csv) = &a.csv {
        write_file(csv, report.to_csv().as_bytes())?;
    }
    let dataset = a
        .hr_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let method = if a.bicubic { "Bicubic" } else { "HAAT" };
    write!(out, "{}", report.table(&dataset, method))?;
    Ok(())
}

fn gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<bool> {
    let level: Level = a.level.parse()?;
    let results = verification::run_level(level, a.seed, GradCheckOptions::default())?;
    for r in &results {
        writeln!(out, "{r}")?;
    }
    Ok(results.iter().all(|r| r.pass))
}

fn train_toy(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let (model, store) = match &a.weights {
        Some(p) => weights::load_model(p)?,
        None => build_model(&ModelConfig::toy(), a.seed)?,
    };
    let hr: Tensor<f32> = match &a.hr {
        Some(p) => imaging::to_unit_tensor(&imaging::load_image(p)?),
        None => verification::synthetic_patch(16),
    };
    let adam = AdamConfig {
        lr: a.lr,
        ..Default::default()
    };
    let (curve, store) = verification::train(&model, store, &hr, a.steps, a.seed, adam)?;
    if let Some(path) = &a.curve_csv {
        let mut s = String::from("step,loss\n");
        for (i, l) in curve.losses.iter().enumerate() {
            s.push_str(&format!("{i},{l}\n"));
        }
        write_file(path, s.as_bytes())?;
    }
    if let Some(path) = &a.out_weights {
        weights::save_weights(&store, &model.config, path)?;
    }
    match (curve.losses.first(), curve.losses.last()) {
        (Some(first), Some(last)) => writeln!(
            out,
            "steps {} initial {first:.6} final {last:.6} ratio {:.4}",
            curve.losses.len(),
            last / first
        )?,
        _ => writeln!(out, "steps 0")?,
    }
    Ok(())
}

/// Runs one invocation and returns its exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::InitWeights(a) => init_weights(a).map(|_| true),
        Command::Upscale(a) => upscale(a).map(|_| true),
        Command::Benchmark(a) => benchmark(a, out).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::TrainToy(a) => train_toy(a, out).map(|_| true),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 2,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_roundtrip() {
        let full = ModelConfig::full();
        assert_eq!(parse_config(&format_config(&full)).unwrap(), full);
        let cfg = parse_config("base = full\n# comment\nscale = 2\n").unwrap();
        assert_eq!(cfg.scale, 2);
        assert_eq!(cfg.channels, 180);
    }

    #[test]
    fn config_errors_name_the_key() {
        assert!(matches!(parse_config("bogus = 1"), Err(Error::Config { field: "config", .. })));
        assert!(matches!(parse_config("scale = x"), Err(Error::Config { field: "scale", .. })));
        assert!(matches!(parse_config("scale = 5"), Err(Error::Config { field: "scale", .. })));
    }
}
