use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{streams, ExperimentConfig};
use crate::error::{Error, Result};
use crate::io::{read_layout, write_layout};
use crate::model::{derive_seed, generate_layout, Layout, LayoutGenSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub name: String,
    pub count: usize,
    pub stream: u64,
    /// Generator seed of every layout, in file order.
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub id: String,
    pub base_seed: u64,
    pub layout: LayoutGenSpec,
    pub splits: Vec<SplitRecord>,
}

pub const MANIFEST: &str = "manifest.json";

fn layout_file(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("layout_{k:05}.csv"))
}

fn write_split(out: &Path, spec: &LayoutGenSpec, split: &SplitRecord) -> Result<()> {
    let dir = out.join(&split.name);
    fs::create_dir_all(&dir)?;
    split
        .seeds
        .par_iter()
        .enumerate()
        .try_for_each(|(k, &seed)| {
            let s = spec.with_seed(seed);
            write_layout(&layout_file(&dir, k), &generate_layout(&s)?, Some(&s))
        })
}

fn build(out: &Path, manifest: &DatasetManifest) -> Result<()> {
    fs::create_dir_all(out)?;
    for split in &manifest.splits {
        write_split(out, &manifest.layout, split)?;
    }
    fs::write(out.join(MANIFEST), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

/// Writes `train/` and `test/` layout files plus `manifest.json` below `out`.
pub fn gen_dataset(cfg: &ExperimentConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.layout.validate()?;
    let split = |name: &str, count: usize, stream: u64| SplitRecord {
        name: name.into(),
        count,
        stream,
        seeds: (0..count as u64)
            .map(|k| derive_seed(cfg.seed, stream, k))
            .collect(),
    };
    let manifest = DatasetManifest {
        id: cfg.id.clone(),
        base_seed: cfg.seed,
        layout: cfg.layout.with_seed(0),
        splits: vec![
            split("train", cfg.n_train, streams::TRAIN),
            split("test", cfg.n_test, streams::TEST),
        ],
    };
    build(out, &manifest)?;
    Ok(manifest)
}

/// Rebuilds a dataset from its manifest alone.
pub fn gen_dataset_from_manifest(manifest: &Path, out: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(manifest)?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: manifest.to_path_buf(),
        reason: e.to_string(),
    })?;
    build(out, &m)?;
    Ok(m)
}

/// Reads every `layout_*.csv` in `dir`, in file-name order.
pub fn load_split(dir: &Path) -> Result<Vec<Layout>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "csv")
                && p.file_name()
                    .is_some_and(|n| n.to_string_lossy().starts_with("layout_"))
        })
        .collect();
    files.sort();
    files
        .par_iter()
        .map(|p| Ok(read_layout(p)?.layout))
        .collect()
}
