//! Plain-text file formats: layout CSV with a `key=value` metadata sibling,
//! and per-link policy CSV.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{Layout, LayoutGenSpec, Point, Policy};

pub const LAYOUT_HEADER: [&str; 5] = ["link", "tx_x", "tx_y", "rx_x", "rx_y"];
pub const POLICY_HEADER: [&str; 2] = ["link", "p"];

/// Scientific notation with 17 significant digits; parses back bit-exactly.
pub fn exact(v: f64) -> String {
    format!("{v:.16e}")
}

/// Sibling metadata path: `foo.csv` -> `foo.meta`.
pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta")
}

pub fn write_kv(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut out = String::new();
    for (k, v) in entries {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            reason: format!("line {}: expected key=value", n + 1),
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn parse_field<T: std::str::FromStr>(path: &Path, what: &str, raw: &str) -> Result<T> {
    raw.trim().parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        reason: format!("cannot parse {what} from {raw:?}"),
    })
}

/// Writes the layout CSV plus its metadata sibling. `spec` is recorded when
/// the layout came from the generator.
pub fn write_layout(path: &Path, layout: &Layout, spec: Option<&LayoutGenSpec>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(LAYOUT_HEADER)?;
    for (i, (t, r)) in layout.tx().iter().zip(layout.rx()).enumerate() {
        w.write_record([
            i.to_string(),
            exact(t.x),
            exact(t.y),
            exact(r.x),
            exact(r.y),
        ])?;
    }
    w.flush()?;

    let mut meta = vec![
        ("side_length".to_string(), exact(layout.side_length())),
        ("n_links".to_string(), layout.n_links().to_string()),
    ];
    if let Some(s) = spec {
        meta.push(("d_min".into(), exact(s.d_min)));
        meta.push(("d_max".into(), exact(s.d_max)));
        meta.push(("seed".into(), s.seed.to_string()));
    }
    write_kv(&meta_path(path), &meta)
}

pub struct LayoutFile {
    pub layout: Layout,
    pub spec: Option<LayoutGenSpec>,
}

pub fn read_layout(path: &Path) -> Result<LayoutFile> {
    let meta = read_kv(&meta_path(path))?;
    let side: f64 = match meta.get("side_length") {
        Some(v) => parse_field(path, "side_length", v)?,
        None => {
            return Err(Error::Parse {
                path: meta_path(path),
                reason: "missing side_length".into(),
            })
        }
    };

    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().collect::<Vec<_>>() != LAYOUT_HEADER {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            reason: format!("expected header {}", LAYOUT_HEADER.join(",")),
        });
    }
    let mut tx = Vec::new();
    let mut rx = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let link: usize = parse_field(path, "link", &rec[0])?;
        if link != row {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                reason: format!("row {row} carries link index {link}"),
            });
        }
        let f = |k: usize| parse_field::<f64>(path, LAYOUT_HEADER[k], &rec[k]);
        tx.push(Point::new(f(1)?, f(2)?));
        rx.push(Point::new(f(3)?, f(4)?));
    }
    let layout = Layout::new(tx, rx, side)?;

    let spec = match (meta.get("d_min"), meta.get("d_max"), meta.get("seed")) {
        (Some(lo), Some(hi), Some(seed)) => Some(LayoutGenSpec {
            n_links: layout.n_links(),
            side_length: side,
            d_min: parse_field(path, "d_min", lo)?,
            d_max: parse_field(path, "d_max", hi)?,
            seed: parse_field(path, "seed", seed)?,
        }),
        _ => None,
    };
    Ok(LayoutFile { layout, spec })
}

pub fn write_policy(path: &Path, policy: &Policy) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(POLICY_HEADER)?;
    for (i, p) in policy.as_slice().iter().enumerate() {
        w.write_record([i.to_string(), exact(*p)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_policy(path: &Path) -> Result<Policy> {
    let mut r = csv::Reader::from_path(path)?;
    let mut p = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let link: usize = parse_field(path, "link", &rec[0])?;
        if link != row {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                reason: format!("row {row} carries link index {link}"),
            });
        }
        p.push(parse_field(path, "p", &rec[1])?);
    }
    Policy::new(p)
}
