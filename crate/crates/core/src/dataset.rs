//! Class-per-directory datasets, the converted frame cache and splits.
//!
//! Raw layout: `<root>/<class>/<sample>.<ext>`; labels are the indices of
//! the sorted class directory names. The cache written by [`convert_all`]
//! mirrors it as `<out>/<class>/<sample>.frm` plus `manifest.json`.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{encode_portable, read_file, Format};
use crate::error::{Error, Result};
use crate::event::{stream_stats, EventStream, SensorGeometry, StreamStats};
use crate::par;
use crate::representation::{
    decode_frames, encode_frames, frames_from_stream, prepare_input, FrameTensor, NormalizeMode,
    ReduceMode, SliceMode,
};
use crate::tensor::Tensor;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const FRAME_EXTENSION: &str = "frm";

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub classes: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            classes: self.classes.clone(),
        }
    }

    /// Stacks the given samples into a batch tensor and label list.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let inputs: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i].input).collect();
        let labels = indices.iter().map(|&i| self.samples[i].label).collect();
        Ok((Tensor::stack(&inputs)?, labels))
    }

    /// Reduces and normalizes every frame tensor into a network input.
    pub fn from_frames(
        frames: &[(FrameTensor, usize)],
        classes: Vec<String>,
        reduce: ReduceMode,
        normalize: NormalizeMode,
    ) -> Dataset {
        let samples = par::map_range(frames.len(), |i| Sample {
            input: prepare_input(&frames[i].0, reduce, normalize),
            label: frames[i].1,
        });
        Dataset { samples, classes }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawEntry {
    pub path: PathBuf,
    pub class: String,
    pub label: usize,
}

/// Sorted class directories under `root` and every file with extension
/// `ext` inside them, in (class, file name) order.
pub fn scan_class_dirs(root: &Path, ext: &str) -> Result<(Vec<String>, Vec<RawEntry>)> {
    let io = |e: std::io::Error| Error::from(e).in_file(root);
    let mut classes = Vec::new();
    for entry in std::fs::read_dir(root).map_err(io)? {
        let entry = entry.map_err(io)?;
        if entry.file_type().map_err(io)?.is_dir() {
            classes.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    classes.sort();
    let mut entries = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        let dir = root.join(class);
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::from(e).in_file(&dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == ext))
            .collect();
        files.sort();
        entries.extend(files.into_iter().map(|path| RawEntry {
            path,
            class: class.clone(),
            label,
        }));
    }
    Ok((classes, entries))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvertOptions {
    pub format: Format,
    /// Used by formats that carry no geometry of their own.
    pub geometry: SensorGeometry,
    pub slices: usize,
    pub slice_mode: SliceMode,
    pub flip_polarity: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub source: String,
    /// Relative to the manifest's directory.
    pub frames: String,
    pub class: String,
    pub label: usize,
    pub stats: StreamStats,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFailure {
    pub source: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameManifest {
    pub format: Format,
    pub slices: usize,
    pub slice_mode: SliceMode,
    pub flip_polarity: bool,
    pub classes: Vec<String>,
    /// Input preparation suggested at conversion time. The cache itself
    /// always holds raw counts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduce: Option<ReduceMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalize: Option<NormalizeMode>,
    pub samples: Vec<ManifestSample>,
    pub failures: Vec<ManifestFailure>,
    /// False when any input failed to convert.
    pub complete: bool,
}

pub fn convert_stream(stream: EventStream, opts: &ConvertOptions) -> Result<(FrameTensor, StreamStats)> {
    let stream = if opts.flip_polarity {
        stream.flip_polarity()
    } else {
        stream
    };
    let stats = stream_stats(&stream)?;
    let frames = frames_from_stream(&stream, opts.slices, opts.slice_mode)?;
    Ok((frames, stats))
}

pub fn convert_file(path: &Path, opts: &ConvertOptions) -> Result<(FrameTensor, StreamStats)> {
    let stream = read_file(path, opts.format, opts.geometry)?;
    convert_stream(stream, opts).map_err(|e| e.in_file(path))
}

/// Converts every entry in parallel and writes the cache and manifest.
/// Per-file failures are recorded rather than aborting the batch.
pub fn convert_all(
    classes: &[String],
    entries: &[RawEntry],
    out: &Path,
    opts: &ConvertOptions,
) -> Result<FrameManifest> {
    for class in classes {
        let dir = out.join(class);
        std::fs::create_dir_all(&dir).map_err(|e| Error::from(e).in_file(&dir))?;
    }
    let results = par::map_range(entries.len(), |i| -> Result<ManifestSample> {
        let entry = &entries[i];
        let stem = entry
            .path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let rel = format!("{}/{stem}.{FRAME_EXTENSION}", entry.class);
        let (frames, stats) = convert_file(&entry.path, opts)?;
        let dst = out.join(&rel);
        std::fs::write(&dst, encode_frames(&frames)).map_err(|e| Error::from(e).in_file(&dst))?;
        Ok(ManifestSample {
            source: entry.path.display().to_string(),
            frames: rel,
            class: entry.class.clone(),
            label: entry.label,
            stats,
        })
    });
    let mut samples = Vec::new();
    let mut failures = Vec::new();
    for (entry, r) in entries.iter().zip(results) {
        match r {
            Ok(s) => samples.push(s),
            Err(e) => failures.push(ManifestFailure {
                source: entry.path.display().to_string(),
                error: e.to_string(),
            }),
        }
    }
    let manifest = FrameManifest {
        format: opts.format,
        slices: opts.slices,
        slice_mode: opts.slice_mode,
        flip_polarity: opts.flip_polarity,
        classes: classes.to_vec(),
        reduce: None,
        normalize: None,
        complete: failures.is_empty(),
        samples,
        failures,
    };
    write_manifest(out, &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(dir: &Path, manifest: &FrameManifest) -> Result<()> {
    let path = dir.join(MANIFEST_NAME);
    let json = serde_json::to_vec_pretty(manifest)?;
    std::fs::write(&path, json).map_err(|e| Error::from(e).in_file(&path))
}

pub fn read_manifest(dir: &Path) -> Result<FrameManifest> {
    let path = dir.join(MANIFEST_NAME);
    let bytes = std::fs::read(&path).map_err(|e| Error::from(e).in_file(&path))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::from(e).in_file(&path))
}

/// Loads every sample listed in the cache manifest, in manifest order.
pub fn load_frame_cache(dir: &Path) -> Result<(FrameManifest, Vec<(FrameTensor, usize)>)> {
    let manifest = read_manifest(dir)?;
    let loaded = par::map_range(manifest.samples.len(), |i| {
        let path = dir.join(&manifest.samples[i].frames);
        let bytes = std::fs::read(&path).map_err(|e| Error::from(e).in_file(&path))?;
        let frames = decode_frames(&bytes).map_err(|e| e.in_file(&path))?;
        Ok((frames, manifest.samples[i].label))
    });
    let frames = loaded.into_iter().collect::<Result<Vec<_>>>()?;
    Ok((manifest, frames))
}

/// Writes generated streams as `.evt` files under `<root>/<class>/`.
pub fn write_streams(root: &Path, classes: &[&str], streams: &[EventStream]) -> Result<()> {
    for class in classes {
        let dir = root.join(class);
        std::fs::create_dir_all(&dir).map_err(|e| Error::from(e).in_file(&dir))?;
    }
    for (i, s) in streams.iter().enumerate() {
        let label = s.label.unwrap_or(0) as usize;
        let class = classes.get(label).ok_or(Error::LabelOutOfRange {
            label,
            classes: classes.len(),
        })?;
        let path = root.join(class).join(format!("{i:05}.{}", Format::Evt.extension()));
        std::fs::write(&path, encode_portable(s)).map_err(|e| Error::from(e).in_file(&path))?;
    }
    Ok(())
}

/// Seeded per-class split. Each class keeps `round(n · train_fraction)`
/// samples for training (at least one when it has any).
pub fn split_per_class(labels: &[usize], train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let n = ((idx.len() as f64 * train_fraction).round() as usize).clamp(1, idx.len());
        train.extend_from_slice(&idx[..n]);
        test.extend_from_slice(&idx[n..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Tab-separated `path  label  split` lines.
pub fn render_split_manifest(rows: &[(String, usize, &str)]) -> String {
    let mut s = String::from("path\tlabel\tsplit\n");
    for (path, label, split) in rows {
        s.push_str(&format!("{path}\t{label}\t{split}\n"));
    }
    s
}
