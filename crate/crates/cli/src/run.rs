//! `train` and `eval`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use evframe::checkpoint::Checkpoint;
use evframe::codec::Format;
use evframe::dataset::{
    convert_all, convert_file, load_frame_cache, read_manifest, render_split_manifest, scan_class_dirs, split_per_class,
    ConvertOptions, Dataset, FrameManifest, MANIFEST_NAME,
};
use evframe::model::{build_model, ModelConfig};
use evframe::representation::{decode_frames, FrameTensor};
use evframe::train::{evaluate, train, RunDir, TrainState};
use evframe::Error;

use crate::config::RunConfig;
use crate::Failure;

pub const SPLIT_NAME: &str = "split.tsv";
pub const MODEL_NAME: &str = "model.json";

type Labelled = Vec<(FrameTensor, usize)>;

fn convert_options(cfg: &RunConfig) -> ConvertOptions {
    ConvertOptions {
        format: cfg.data.format.unwrap_or(Format::Evt),
        geometry: cfg.geometry(),
        slices: cfg.data.slices,
        slice_mode: cfg.data.slice_mode,
        flip_polarity: cfg.data.flip_polarity,
    }
}

/// Builds the frame cache from `data.raw` when asked to and none exists.
fn ensure_cache(cfg: &RunConfig) -> anyhow::Result<()> {
    let frames = &cfg.data.frames;
    if frames.join(MANIFEST_NAME).is_file() || !cfg.data.auto_convert {
        return Ok(());
    }
    let raw = cfg.data.raw.as_ref().expect("checked when the config was loaded");
    let opts = convert_options(cfg);
    let (classes, entries) = scan_class_dirs(raw, opts.format.extension())?;
    if entries.is_empty() {
        return Err(Error::EmptyDataset.in_file(raw).into());
    }
    println!("auto-converting {} files from {}", entries.len(), raw.display());
    let manifest = convert_all(&classes, &entries, frames, &opts)?;
    for f in &manifest.failures {
        eprintln!("failed: {}: {}", f.source, f.error);
    }
    Ok(())
}

fn frame_shape(f: &FrameTensor) -> (usize, usize) {
    (f.geometry.height as usize, f.geometry.width as usize)
}

fn load_cache(cfg: &RunConfig, dir: &Path) -> anyhow::Result<(FrameManifest, Labelled)> {
    let (manifest, frames) = load_frame_cache(dir)?;
    cfg.check_manifest(&manifest, dir)?;
    if !manifest.complete {
        eprintln!(
            "warning: {} is incomplete ({} conversion failures)",
            dir.display(),
            manifest.failures.len()
        );
    }
    if let Some(first) = frames.first() {
        if let Some((i, _)) = frames.iter().enumerate().find(|(_, f)| frame_shape(&f.0) != frame_shape(&first.0)) {
            bail!(Failure::data(format!(
                "{}: sample {} has a different sensor size than sample 0",
                dir.display(),
                manifest.samples[i].frames
            )));
        }
    }
    Ok((manifest, frames))
}

/// Model config implied by the run file and the training cache.
fn model_for(cfg: &RunConfig, manifest: &FrameManifest, first: &FrameTensor) -> anyhow::Result<ModelConfig> {
    let (reduce, _) = cfg.input_modes(manifest);
    let (h, w) = frame_shape(first);
    cfg.model_config(reduce, h, w, manifest.classes.len())
}

pub fn run_train(config_path: &Path, resume: Option<&Path>) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config_path)?;
    ensure_cache(&cfg)?;
    let (manifest, frames) = load_cache(&cfg, &cfg.data.frames)?;
    let first = frames.first().ok_or_else(|| Error::EmptyDataset.in_file(&cfg.data.frames))?;
    let model_cfg = model_for(&cfg, &manifest, &first.0)?;
    let (reduce, normalize) = cfg.input_modes(&manifest);
    let all = Dataset::from_frames(&frames, manifest.classes.clone(), reduce, normalize);

    std::fs::create_dir_all(&cfg.output).with_context(|| format!("creating {}", cfg.output.display()))?;
    let (train_set, val_set) = match &cfg.data.val {
        Some(dir) => {
            let (vm, vf) = load_cache(&cfg, dir)?;
            if vm.classes != manifest.classes {
                bail!(Failure::data(format!("{}: class list differs from data.frames", dir.display())));
            }
            (all, Some(Dataset::from_frames(&vf, vm.classes, reduce, normalize)))
        }
        None => {
            let (tr, va) = split_per_class(&all.labels(), cfg.data.train_fraction, cfg.seed);
            let mut rows: Vec<(String, usize, &str)> = Vec::new();
            for (idx, name) in [(&tr, "train"), (&va, "val")] {
                rows.extend(idx.iter().map(|&i| (manifest.samples[i].frames.clone(), manifest.samples[i].label, name)));
            }
            rows.sort();
            let path = cfg.output.join(SPLIT_NAME);
            std::fs::write(&path, render_split_manifest(&rows)).with_context(|| format!("writing {}", path.display()))?;
            let val = (!va.is_empty()).then(|| all.subset(&va));
            (all.subset(&tr), val)
        }
    };
    let path = cfg.output.join(MODEL_NAME);
    std::fs::write(&path, serde_json::to_string_pretty(&model_cfg)? + "\n").with_context(|| format!("writing {}", path.display()))?;

    let mut state = match resume {
        Some(ckpt) => {
            let ck = Checkpoint::load(ckpt)?;
            ck.check_config(&model_cfg)?;
            println!("resuming from {} after epoch {}", ckpt.display(), ck.meta.epoch);
            TrainState::from_checkpoint(&ck)?
        }
        None => TrainState::new(build_model(&model_cfg, cfg.seed)?),
    };
    println!(
        "training on {} samples ({} held out), {} classes, input {}x{}x{}",
        train_set.len(),
        val_set.as_ref().map_or(0, Dataset::len),
        model_cfg.num_classes,
        model_cfg.input_channels,
        model_cfg.input_height,
        model_cfg.input_width
    );
    let run_dir = RunDir(cfg.output.clone());
    train(&mut state, &train_set, val_set.as_ref(), &cfg.train, Some(&run_dir), |r| {
        println!(
            "epoch {:>4} {:<5} loss {:.6} top-1 {:.4}",
            r.epoch, r.split, r.loss, r.top1
        );
    })?;
    match (state.best_top1, state.best_epoch) {
        (Some(top1), Some(epoch)) => println!("done: best top-1 {top1:.4} at epoch {epoch}"),
        _ => println!("done: no epochs run"),
    }
    println!("run directory {}", cfg.output.display());
    Ok(())
}

/// Frames of an evaluation directory: a frame cache, or a raw class tree
/// converted in memory.
fn eval_frames(cfg: &RunConfig, dir: &Path) -> anyhow::Result<(Vec<String>, Labelled)> {
    if !dir.is_dir() {
        bail!(Failure::io(format!("{}: no such directory", dir.display())));
    }
    if dir.join(MANIFEST_NAME).is_file() {
        let (m, f) = load_cache(cfg, dir)?;
        return Ok((m.classes, f));
    }
    let opts = convert_options(cfg);
    let (classes, entries) = scan_class_dirs(dir, opts.format.extension())?;
    let mut frames = Vec::with_capacity(entries.len());
    for e in &entries {
        frames.push((convert_file(&e.path, &opts)?.0, e.label));
    }
    Ok((classes, frames))
}

pub fn run_eval(ckpt: &Path, data: &Path, config_path: &Path, confusion: Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let manifest = read_manifest(&cfg.data.frames)?;
    let first = manifest
        .samples
        .first()
        .ok_or_else(|| Error::EmptyDataset.in_file(&cfg.data.frames))?;
    let first_path = cfg.data.frames.join(&first.frames);
    let bytes = std::fs::read(&first_path).with_context(|| format!("reading {}", first_path.display()))?;
    let first = decode_frames(&bytes).map_err(|e| e.in_file(&first_path))?;
    let model_cfg = model_for(&cfg, &manifest, &first)?;

    let ck = Checkpoint::load(ckpt)?;
    ck.check_config(&model_cfg)?;
    let model = ck.restore_model()?;

    let (classes, frames) = eval_frames(&cfg, data)?;
    if frames.is_empty() {
        return Err(Error::EmptyDataset.in_file(data).into());
    }
    if classes != manifest.classes {
        bail!(Failure::data(format!(
            "{}: classes {:?} differ from the training classes {:?}",
            data.display(),
            classes,
            manifest.classes
        )));
    }
    let (reduce, normalize) = cfg.input_modes(&manifest);
    let set = Dataset::from_frames(&frames, classes, reduce, normalize);
    let ev = evaluate(&model, &set, cfg.train.batch_size)?;
    println!("samples   {}", set.len());
    println!("loss      {:.6}", ev.loss);
    println!("top-1     {:.4}", ev.top1);

    let out = confusion.unwrap_or_else(|| ckpt.with_file_name("confusion.txt"));
    let mut grid = format!("# rows: true class, columns: predicted; classes: {}\n", set.classes.join(" "));
    grid.push_str(&ev.render_confusion());
    std::fs::write(&out, grid).with_context(|| format!("writing {}", out.display()))?;
    println!("confusion {}", out.display());
    Ok(())
}
