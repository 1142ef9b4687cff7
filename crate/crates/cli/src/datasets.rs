//! Dataset spec strings and their loaders.
//!
//! Specs: `synth:rings`, `idx:<images>,<labels>` (alias `mnist:`), and
//! `csv:<path>`.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use divclust_core::data::{load_dense_csv, load_idx, make_circle_ring, Dataset};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    Rings,
    Idx { images: PathBuf, labels: PathBuf },
    Csv { path: PathBuf },
}

impl DataSpec {
    pub fn parse(spec: &str) -> Result<DataSpec> {
        let Some((kind, rest)) = spec.split_once(':') else {
            bail!("dataset spec '{}' needs a prefix (synth:, idx:, mnist:, csv:)", spec);
        };
        match kind {
            "synth" => {
                if rest != "rings" {
                    bail!("unknown synthetic dataset '{}' (expected rings)", rest);
                }
                Ok(DataSpec::Rings)
            }
            "idx" | "mnist" => {
                let Some((images, labels)) = rest.split_once(',') else {
                    bail!("'{}:' needs <images>,<labels> paths", kind);
                };
                Ok(DataSpec::Idx { images: images.into(), labels: labels.into() })
            }
            "csv" => Ok(DataSpec::Csv { path: rest.into() }),
            other => bail!("unknown dataset kind '{}'", other),
        }
    }
}

impl std::fmt::Display for DataSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DataSpec::Rings => write!(f, "synth:rings"),
            DataSpec::Idx { images, labels } => {
                write!(f, "idx:{},{}", images.display(), labels.display())
            }
            DataSpec::Csv { path } => write!(f, "csv:{}", path.display()),
        }
    }
}

/// Resolved dataset options, recorded alongside the spec for provenance.
#[derive(Debug, Clone)]
pub struct DataOptions {
    pub n_per_class: usize,
    pub inner_radius: f64,
    pub ring_radius: f64,
    pub noise_std: f64,
    pub classes: Option<Vec<usize>>,
    pub per_class_cap: Option<usize>,
    pub csv_labels: bool,
}

impl Default for DataOptions {
    fn default() -> Self {
        DataOptions {
            n_per_class: 500,
            inner_radius: 1.0,
            ring_radius: 4.0,
            noise_std: 0.15,
            classes: None,
            per_class_cap: None,
            csv_labels: false,
        }
    }
}

pub fn parse_class_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|c| c.trim().parse::<usize>().with_context(|| format!("bad class '{}'", c)))
        .collect()
}

pub fn load(spec: &DataSpec, opts: &DataOptions, seed: u64) -> Result<Dataset<f32>> {
    match spec {
        DataSpec::Rings => Ok(make_circle_ring(
            opts.n_per_class,
            opts.inner_radius,
            opts.ring_radius,
            opts.noise_std,
            seed,
        )?),
        DataSpec::Idx { images, labels } => Ok(load_idx(
            images,
            labels,
            opts.classes.as_deref(),
            opts.per_class_cap,
            seed,
        )?),
        DataSpec::Csv { path } => Ok(load_dense_csv(path, opts.csv_labels)?),
    }
}

/// Stable sub-seed derivation so one seed argument drives every random
/// choice through named streams (FNV-1a over the label, mixed with the base).
pub fn seed_for(base: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ base.wrapping_mul(0x0100_0000_01b3);
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
