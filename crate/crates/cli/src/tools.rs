//! `convert`, `inspect`, `synth` and `profile`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use evframe::accounting::{profile, render_comparison};
use evframe::checkpoint::Checkpoint;
use evframe::codec::{read_file, Format};
use evframe::dataset::{convert_all, scan_class_dirs, write_manifest, write_streams, ConvertOptions, RawEntry};
use evframe::model::{build_model, ModelConfig};
use evframe::representation::{decode_frames, NormalizeMode, ReduceMode};
use evframe::synthetic::{bar_dataset, BarSettings, CLASS_NAMES};
use evframe::event::stream_stats;
use evframe::SensorGeometry;

use crate::Failure;

/// Class name given to a lone input file.
const UNLABELLED: &str = "unlabelled";

pub struct ConvertArgs {
    pub input: PathBuf,
    pub out: PathBuf,
    pub opts: ConvertOptions,
    pub reduce: Option<ReduceMode>,
    pub normalize: Option<NormalizeMode>,
}

pub fn convert(args: &ConvertArgs) -> anyhow::Result<()> {
    let ext = args.opts.format.extension();
    let (classes, entries) = if args.input.is_file() {
        let entry = RawEntry {
            path: args.input.clone(),
            class: UNLABELLED.into(),
            label: 0,
        };
        (vec![UNLABELLED.to_string()], vec![entry])
    } else if args.input.is_dir() {
        scan_class_dirs(&args.input, ext)?
    } else {
        bail!(Failure::io(format!("{}: no such file or directory", args.input.display())));
    };
    if entries.is_empty() {
        bail!(Failure::data(format!(
            "no .{ext} files under class directories of {}",
            args.input.display()
        )));
    }
    let mut manifest = convert_all(&classes, &entries, &args.out, &args.opts)?;
    manifest.reduce = args.reduce;
    manifest.normalize = args.normalize;
    write_manifest(&args.out, &manifest)?;

    println!(
        "converted {} of {} files into {} ({} classes, T = {})",
        manifest.samples.len(),
        entries.len(),
        args.out.display(),
        classes.len(),
        args.opts.slices
    );
    for f in &manifest.failures {
        eprintln!("failed: {}: {}", f.source, f.error);
    }
    if !manifest.complete {
        bail!(Failure::data(format!(
            "{} of {} files failed; the manifest is marked incomplete",
            manifest.failures.len(),
            entries.len()
        )));
    }
    Ok(())
}

pub fn inspect(path: &Path, geometry: SensorGeometry) -> anyhow::Result<()> {
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "frm" => inspect_frames(path),
        "ckpt" => inspect_checkpoint(path),
        _ => {
            let Some(format) = Format::from_extension(&ext) else {
                bail!(Failure::data(format!(
                    "{}: unknown extension (expected .bin, .aedat, .evt, .frm or .ckpt)",
                    path.display()
                )));
            };
            let s = read_file(path, format, geometry)?;
            println!("file      {}", path.display());
            println!("format    {}", format.extension());
            println!("geometry  {}x{}", s.geometry.width, s.geometry.height);
            if let Some(l) = s.label {
                println!("label     {l}");
            }
            println!("events    {}", s.len());
            if let Ok(st) = stream_stats(&s) {
                let on = st.on_count as f64 / st.count as f64;
                println!("duration  {} us", st.duration_us);
                println!("polarity  on {} / off {} ({:.1}% on)", st.on_count, st.off_count, 100.0 * on);
                println!("x range   {}..={}", st.min_x, st.max_x);
                println!("y range   {}..={}", st.min_y, st.max_y);
            }
            Ok(())
        }
    }
}

fn inspect_frames(path: &Path) -> anyhow::Result<()> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let f = decode_frames(&bytes).map_err(|e| e.in_file(path))?;
    let [t, c, h, w] = f.shape();
    println!("file      {}", path.display());
    println!("frames    T = {t}, channels = {c}, {h}x{w}");
    println!("total     {}", f.total());
    println!("slice         off          on");
    for (n, [off, on]) in f.plane_totals().iter().enumerate() {
        println!("{n:>5} {off:>11} {on:>11}");
    }
    Ok(())
}

fn inspect_checkpoint(path: &Path) -> anyhow::Result<()> {
    let ck = Checkpoint::load(path)?;
    let m = &ck.meta;
    println!("file      {}", path.display());
    println!("epoch     {}", m.epoch);
    if let Some(step) = m.adam_step {
        println!("adam step {step}");
    }
    if let (Some(top1), Some(epoch)) = (m.best_top1, m.best_epoch) {
        println!("best      top-1 {top1:.4} at epoch {epoch}");
    }
    println!("config    sha256 {}", ck.digest());
    println!("tensors   {}", ck.tensors.len());
    println!("{}", serde_json::to_string_pretty(&ck.config)?);
    Ok(())
}

pub fn synth(out: &Path, per_class: usize, size: u16, noise: f64, seed: u64) -> anyhow::Result<()> {
    if size < 4 {
        bail!(Failure::config("--size must be at least 4"));
    }
    let settings = BarSettings {
        geometry: SensorGeometry::new(size, size)?,
        noise,
    };
    let streams = bar_dataset(per_class, &settings, seed);
    write_streams(out, &CLASS_NAMES, &streams)?;
    println!("wrote {} streams under {}", streams.len(), out.display());
    Ok(())
}

pub fn run_profile(cfg: &ModelConfig, delta: bool) -> anyhow::Result<()> {
    let model = build_model(cfg, 0)?;
    let report = profile(&model);
    print!("{}", report.render());
    if delta {
        let original = ModelConfig::vgg_original(cfg.input_height, cfg.input_width, cfg.num_classes);
        let base = profile(&build_model(&original, 0)?);
        println!();
        println!(
            "delta against a 3-channel VGG with the original fully connected head ({} params, {:.1} MFLOPs):",
            base.total_params(),
            base.mflops()
        );
        print!("{}", render_comparison(&base, &report));
    }
    Ok(())
}
