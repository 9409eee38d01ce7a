use std::fs;
use std::path::Path;

use super::{NetConfig, NetParams, FEATURES};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"GLINET";
pub const VERSION: u32 = 1;

const HEADER_LEN: usize = 6 + 4 + 8 * 4 + 8 + 8;

pub fn encode_params(params: &NetParams) -> Vec<u8> {
    let cfg = params.config();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * params.as_slice().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let fields = [
        cfg.conv_sizes[0],
        cfg.conv_sizes[1],
        cfg.conv_sizes[2],
        cfg.hidden_sizes[0],
        cfg.hidden_sizes[1],
        cfg.feedback_rounds,
        FEATURES,
        cfg.grid_resolution,
    ];
    for f in fields {
        out.extend_from_slice(&(f as u32).to_le_bytes());
    }
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    out.extend_from_slice(&cfg.distance_norm.to_bits().to_le_bytes());
    for v in params.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<NetParams> {
    let bad = |m: String| Error::Format(m);
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..6] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let u32_at = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().unwrap()) as usize;
    let u64_at = |k: usize| u64::from_le_bytes(bytes[k..k + 8].try_into().unwrap());
    let version = u32_at(6) as u32;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let f: Vec<usize> = (0..8).map(|k| u32_at(10 + 4 * k)).collect();
    if f[6] != FEATURES {
        return Err(bad(format!("{} input features, expected {FEATURES}", f[6])));
    }
    let cfg = NetConfig {
        conv_sizes: [f[0], f[1], f[2]],
        hidden_sizes: [f[3], f[4]],
        feedback_rounds: f[5],
        grid_resolution: f[7],
        seed: u64_at(42),
        distance_norm: f64::from_bits(u64_at(50)),
    };
    cfg.validate().map_err(|e| bad(format!("header: {e}")))?;
    let body = &bytes[HEADER_LEN..];
    let want = 8 * cfg.param_count();
    if body.len() != want {
        return Err(bad(format!(
            "body has {} bytes, expected {want}",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    NetParams::from_flat(&cfg, data).map_err(|e| bad(e.to_string()))
}

pub fn save_params(path: &Path, params: &NetParams) -> Result<()> {
    fs::write(path, encode_params(params))?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<NetParams> {
    let bytes = fs::read(path)?;
    decode_params(&bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
