//! The declarative run file read by `train` and `eval`.
//!
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};

use anyhow::Context;
use evframe::attention::CbamSettings;
use evframe::codec::Format;
use evframe::dataset::{FrameManifest, MANIFEST_NAME};
use evframe::model::{HeadConfig, ModelConfig};
use evframe::representation::{NormalizeMode, ReduceMode, SliceMode};
use evframe::train::TrainConfig;
use evframe::{Error, SensorGeometry};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Drives the split, weight init and batch order.
    #[serde(default)]
    pub seed: u64,
    /// Run directory for the metrics log, checkpoints and split listing.
    pub output: PathBuf,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Frame cache written by `evframe convert`.
    pub frames: PathBuf,
    /// Raw class-directory tree, read only when `auto_convert` is set.
    #[serde(default)]
    pub raw: Option<PathBuf>,
    #[serde(default)]
    pub auto_convert: bool,
    #[serde(default)]
    pub format: Option<Format>,
    /// Sensor size for formats that do not record one (ATIS `.bin`).
    #[serde(default)]
    pub width: Option<u16>,
    #[serde(default)]
    pub height: Option<u16>,
    pub slices: usize,
    #[serde(default)]
    pub slice_mode: SliceMode,
    #[serde(default)]
    pub flip_polarity: bool,
    /// Falls back to what the cache manifest records, then to the defaults.
    #[serde(default)]
    pub reduce: Option<ReduceMode>,
    #[serde(default)]
    pub normalize: Option<NormalizeMode>,
    /// Per-class share of `frames` used for fitting when `val` is absent.
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    /// Separate held-out frame cache.
    #[serde(default)]
    pub val: Option<PathBuf>,
}

fn default_fraction() -> f64 {
    0.9
}

/// Architecture knobs. Input size and class count come from the data.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub stage_channels: Option<Vec<usize>>,
    pub convs_per_block: Option<usize>,
    pub cbam_stages: Option<Vec<usize>>,
    pub cbam: Option<CbamSettings>,
    pub head: Option<HeadConfig>,
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidConfig(msg.into()).into()
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let table: toml::Table = toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        if table.get("train").and_then(|t| t.get("seed")).is_some() {
            return Err(invalid("train.seed: set the top-level `seed` instead"));
        }
        let mut cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| invalid(format!("{}: {e}", path.display())))?;
        cfg.train.seed = cfg.seed;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.output);
        join(&mut self.data.frames);
        self.data.raw.as_mut().map(join);
        self.data.val.as_mut().map(join);
    }

    fn validate(&self) -> anyhow::Result<()> {
        let d = &self.data;
        if d.slices == 0 {
            return Err(invalid("data.slices must be at least 1"));
        }
        if !(d.train_fraction > 0.0 && d.train_fraction <= 1.0) {
            return Err(invalid("data.train_fraction must lie in (0, 1]"));
        }
        if d.width.is_some() != d.height.is_some() {
            return Err(invalid("data.width and data.height must be given together"));
        }
        if d.auto_convert {
            match &d.raw {
                None => return Err(invalid("data.raw is required when data.auto_convert is set")),
                Some(raw) if !raw.is_dir() => {
                    return Err(invalid(format!("data.raw: {} does not exist", raw.display())))
                }
                _ => {}
            }
            if d.format.is_none() {
                return Err(invalid("data.format is required when data.auto_convert is set"));
            }
        } else if !d.frames.join(MANIFEST_NAME).is_file() {
            return Err(invalid(format!(
                "data.frames: no frame cache at {} (run `evframe convert` first or set data.auto_convert)",
                d.frames.display()
            )));
        }
        if let Some(val) = &d.val {
            if !val.join(MANIFEST_NAME).is_file() {
                return Err(invalid(format!("data.val: no frame cache at {}", val.display())));
            }
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn geometry(&self) -> SensorGeometry {
        match (self.data.width, self.data.height) {
            (Some(w), Some(h)) => SensorGeometry { width: w, height: h },
            _ => SensorGeometry::ATIS,
        }
    }

    /// Reduce and normalize modes, taking unset fields from the manifest.
    pub fn input_modes(&self, manifest: &FrameManifest) -> (ReduceMode, NormalizeMode) {
        (
            self.data.reduce.or(manifest.reduce).unwrap_or_default(),
            self.data.normalize.or(manifest.normalize).unwrap_or_default(),
        )
    }

    /// Rejects a cache cut with different slicing than the run asks for.
    pub fn check_manifest(&self, manifest: &FrameManifest, dir: &Path) -> anyhow::Result<()> {
        if manifest.slices != self.data.slices || manifest.slice_mode != self.data.slice_mode {
            return Err(invalid(format!(
                "data.slices / data.slice_mode ({}, {:?}) differ from the cache at {} ({}, {:?})",
                self.data.slices,
                self.data.slice_mode,
                dir.display(),
                manifest.slices,
                manifest.slice_mode
            )));
        }
        Ok(())
    }

    pub fn model_config(&self, reduce: ReduceMode, height: usize, width: usize, classes: usize) -> anyhow::Result<ModelConfig> {
        let m = &self.model;
        let mut cfg = ModelConfig::vgg_cbam(reduce.input_channels(self.data.slices), height, width, classes);
        if let Some(s) = &m.stage_channels {
            cfg.stage_channels = s.clone();
        }
        if let Some(c) = m.convs_per_block {
            cfg.convs_per_block = c;
        }
        if m.cbam_stages.is_some() {
            cfg.cbam_stages = m.cbam_stages.clone();
        }
        if let Some(c) = m.cbam {
            cfg.cbam = c;
        }
        if let Some(h) = &m.head {
            cfg.head = h.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
