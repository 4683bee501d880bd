//! HAATW binary weight files.
//!
//! Little-endian layout:
//!
//! ```text
//! magic        8 bytes   "HAATW1\0\0"
//! config       16 × i32  C, num_rdg, S, g, w, grid, head_dim,
//!                        heads(grid), heads(window), heads(shifted),
//!                        r, mlp ratio, alpha × 1e6, scale, img_channels, reserved
//! count        u32
//! per tensor   u16 name length, UTF-8 name, u8 rank, rank × u32 dims,
//!              raw f32 data
//! ```

use std::fs;
use std::path::Path;

use crate::blocks::MalHeads;
use crate::error::{Error, Result, WeightsError};
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HAATW1\0\0";
const MAGIC_STEM: &[u8; 5] = b"HAATW";
const VERSION: u8 = b'1';
const CONFIG_FIELDS: usize = 16;

fn encode_config(cfg: &ModelConfig) -> Result<[i32; CONFIG_FIELDS]> {
    let field = |name: &'static str, v: usize| {
        i32::try_from(v).map_err(|_| Error::config(name, format!("{v} does not fit in i32")))
    };
    let alpha = (cfg.alpha * 1e6).round();
    if !(i32::MIN as f64..=i32::MAX as f64).contains(&alpha) {
        return Err(Error::config("alpha", "out of range for the weight file"));
    }
    Ok([
        field("channels", cfg.channels)?,
        field("num_rdg", cfg.num_rdg)?,
        field("sdrcbs_per_rdg", cfg.sdrcbs_per_rdg)?,
        field("growth", cfg.growth)?,
        field("window_size", cfg.window_size)?,
        field("grid_size", cfg.grid_size)?,
        field("head_dim", cfg.head_dim)?,
        field("mal_heads.grid", cfg.mal_heads.grid)?,
        field("mal_heads.window", cfg.mal_heads.window)?,
        field("mal_heads.shifted", cfg.mal_heads.shifted)?,
        field("squeeze_factor", cfg.squeeze_factor)?,
        field("mlp_ratio", cfg.mlp_ratio)?,
        alpha as i32,
        field("scale", cfg.scale)?,
        field("img_channels", cfg.img_channels)?,
        0,
    ])
}

fn decode_config(v: &[i32; CONFIG_FIELDS]) -> Result<ModelConfig> {
    const NAMES: [&str; CONFIG_FIELDS] = [
        "channels",
        "num_rdg",
        "sdrcbs_per_rdg",
        "growth",
        "window_size",
        "grid_size",
        "head_dim",
        "mal_heads.grid",
        "mal_heads.window",
        "mal_heads.shifted",
        "squeeze_factor",
        "mlp_ratio",
        "alpha",
        "scale",
        "img_channels",
        "reserved",
    ];
    let u = |i: usize| {
        usize::try_from(v[i]).map_err(|_| Error::config(NAMES[i], format!("negative value {}", v[i])))
    };
    let cfg = ModelConfig {
        channels: u(0)?,
        num_rdg: u(1)?,
        sdrcbs_per_rdg: u(2)?,
        growth: u(3)?,
        window_size: u(4)?,
        grid_size: u(5)?,
        head_dim: u(6)?,
        mal_heads: MalHeads {
            grid: u(7)?,
            window: u(8)?,
            shifted: u(9)?,
        },
        squeeze_factor: u(10)?,
        mlp_ratio: u(11)?,
        alpha: v[12] as f64 / 1e6,
        scale: u(13)?,
        img_channels: u(14)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn encode(store: &ParamStore<f32>, cfg: &ModelConfig) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(64 + 4 * store.num_elements());
    out.extend_from_slice(MAGIC);
    for v in encode_config(cfg)? {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Contract(format!("parameter name `{name}` too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], WeightsError> {
        let end = self.pos.checked_add(n).ok_or(WeightsError::Truncated(what))?;
        let s = self.buf.get(self.pos..end).ok_or(WeightsError::Truncated(what))?;
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], WeightsError> {
        Ok(self.take(N, what)?.try_into().expect("exact length"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ParamStore<f32>, ModelConfig)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 8] = r.array("magic")?;
    if &magic[..5] != MAGIC_STEM || magic[6..] != [0, 0] {
        return Err(WeightsError::BadMagic(magic).into());
    }
    if magic[5] != VERSION {
        return Err(WeightsError::UnsupportedVersion(magic[5]).into());
    }
    let mut fields = [0i32; CONFIG_FIELDS];
    for f in fields.iter_mut() {
        *f = i32::from_le_bytes(r.array("config block")?);
    }
    let cfg = decode_config(&fields)?;
    let count = u32::from_le_bytes(r.array("tensor count")?) as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.array("tensor name length")?) as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| WeightsError::BadName)?
            .to_string();
        let rank = r.array::<1>("tensor rank")?[0] as usize;
        let dims = (0..rank)
            .map(|_| Ok(u32::from_le_bytes(r.array("tensor dims")?) as usize))
            .collect::<Result<Vec<_>, WeightsError>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0 && rank > 0)
            .ok_or_else(|| WeightsError::BadTensor {
                name: name.clone(),
                expected: 0,
            })?;
        let raw = r.take(n.checked_mul(4).ok_or(WeightsError::Truncated("tensor data"))?, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&dims, data).map_err(|_| WeightsError::BadTensor {
            name: name.clone(),
            expected: n,
        })?;
        store.insert(name, t)?;
    }
    if r.pos != bytes.len() {
        return Err(WeightsError::TrailingBytes(bytes.len() - r.pos).into());
    }
    Ok((store, cfg))
}

pub fn save_weights(store: &ParamStore<f32>, cfg: &ModelConfig, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(store, cfg)?)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<(ParamStore<f32>, ModelConfig)> {
    decode(&fs::read(path)?)
}

/// Checks that `loaded` has exactly the names and shapes of `expected`, in
/// order, reporting the first offending tensor.
pub fn check_compatible(expected: &ParamStore<f32>, loaded: &ParamStore<f32>) -> Result<(), WeightsError> {
    for (index, ((en, et), (ln, lt))) in expected.iter().zip(loaded.iter()).enumerate() {
        if en != ln {
            return Err(WeightsError::NameMismatch {
                index,
                expected: en.to_string(),
                found: ln.to_string(),
            });
        }
        if et.shape() != lt.shape() {
            return Err(WeightsError::ShapeMismatch {
                name: en.to_string(),
                expected: et.shape().to_vec(),
                found: lt.shape().to_vec(),
            });
        }
    }
    if expected.len() != loaded.len() {
        return Err(WeightsError::CountMismatch {
            expected: expected.len(),
            found: loaded.len(),
        });
    }
    Ok(())
}

/// Loads a weight file and rebuilds the model it describes.
pub fn load_model(path: impl AsRef<Path>) -> Result<(crate::model::Haat, ParamStore<f32>)> {
    let (store, cfg) = load_weights(path)?;
    let (model, template) = crate::model::build_model(&cfg, 0)?;
    check_compatible(&template, &store)?;
    Ok((model, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_block_roundtrip() {
        for cfg in [ModelConfig::toy(), ModelConfig::full()] {
            let enc = encode_config(&cfg).unwrap();
            assert_eq!(enc[12], 200_000);
            assert_eq!(decode_config(&enc).unwrap(), cfg);
        }
    }

    #[test]
    fn magic_and_version_errors_are_distinct() {
        let mut bytes = encode(&ParamStore::new(), &ModelConfig::toy()).unwrap();
        bytes[5] = b'2';
        assert!(matches!(
            decode(&bytes),
            Err(Error::Weights(WeightsError::UnsupportedVersion(b'2')))
        ));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Weights(WeightsError::BadMagic(_)))));
    }
}
