//! `evframe`: convert event recordings to frames, train and evaluate the
//! VGG/CBAM classifier, and report model costs.

mod config;
mod run;
mod tools;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use evframe::codec::Format;
use evframe::dataset::ConvertOptions;
use evframe::model::ModelConfig;
use evframe::representation::{NormalizeMode, ReduceMode, SliceMode};
use evframe::{par, Error, SensorGeometry};

/// Worker-thread override; the only environment variable read.
const THREADS_VAR: &str = "EVFRAME_THREADS";

const EXIT_CONFIG: u8 = 3;
const EXIT_IO: u8 = 4;
const EXIT_DATA: u8 = 5;

#[derive(Debug, Clone, Copy)]
pub enum FailureKind {
    Config,
    Io,
    Data,
}

/// A CLI-level error carrying its exit class.
#[derive(Debug)]
pub struct Failure {
    kind: FailureKind,
    message: String,
}

impl Failure {
    pub fn config(m: impl Into<String>) -> Self {
        Self { kind: FailureKind::Config, message: m.into() }
    }
    pub fn io(m: impl Into<String>) -> Self {
        Self { kind: FailureKind::Io, message: m.into() }
    }
    pub fn data(m: impl Into<String>) -> Self {
        Self { kind: FailureKind::Data, message: m.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f.kind {
                FailureKind::Config => EXIT_CONFIG,
                FailureKind::Io => EXIT_IO,
                FailureKind::Data => EXIT_DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e.root() {
                Error::InvalidConfig(_) | Error::ConfigDigestMismatch { .. } => EXIT_CONFIG,
                Error::Io(_) => EXIT_IO,
                _ => EXIT_DATA,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_DATA;
        }
    }
    1
}

#[derive(Parser)]
#[command(name = "evframe", version, about = "Event-camera frame pipeline and VGG/CBAM classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    AtisBin,
    Aedat2,
    Evt,
}

#[derive(Clone, Copy, ValueEnum)]
enum SliceModeArg {
    /// Drop the N mod T leftover events.
    Strict,
    /// Append the leftover events to the last slice.
    Remainder,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReduceArg {
    Mean,
    Sum,
    Stack,
    PerFrame,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormalizeArg {
    None,
    Max,
    Log1p,
}

#[derive(clap::Args)]
struct GeometryArgs {
    /// Sensor width for formats that do not record one (ATIS .bin).
    #[arg(long, default_value_t = SensorGeometry::ATIS.width)]
    width: u16,
    #[arg(long, default_value_t = SensorGeometry::ATIS.height)]
    height: u16,
}

impl GeometryArgs {
    fn geometry(&self) -> anyhow::Result<SensorGeometry> {
        SensorGeometry::new(self.width, self.height).map_err(|e| Failure::config(e.to_string()).into())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Slice recordings into T two-channel count frames (.frm) plus a manifest.
    Convert {
        /// One recording, or a directory with one subdirectory per class.
        input: PathBuf,
        #[arg(long, value_enum)]
        format: FormatArg,
        #[arg(long)]
        slices: usize,
        #[arg(long, value_enum, default_value = "remainder")]
        slice_mode: SliceModeArg,
        /// Input preparation recorded in the manifest for later runs.
        #[arg(long, value_enum)]
        reduce: Option<ReduceArg>,
        #[arg(long, value_enum)]
        normalize: Option<NormalizeArg>,
        #[arg(long)]
        out: PathBuf,
        /// Swap ON and OFF before slicing.
        #[arg(long)]
        flip_polarity: bool,
        #[command(flatten)]
        geometry: GeometryArgs,
    },
    /// Summarize a .bin, .aedat, .evt, .frm or .ckpt file.
    Inspect {
        file: PathBuf,
        #[command(flatten)]
        geometry: GeometryArgs,
    },
    /// Train from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Top-1 accuracy and confusion matrix of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Frame cache, or raw class tree in the config's data.format.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Where to write the confusion grid [default: next to the checkpoint].
        #[arg(long)]
        confusion: Option<PathBuf>,
    },
    /// Write a synthetic moving-bar dataset (classes left/right) as .evt files.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        per_class: usize,
        /// Square sensor side in pixels.
        #[arg(long, default_value_t = 16)]
        size: u16,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-layer parameter and FLOP table.
    Profile {
        #[arg(long, default_value_t = 2)]
        channels: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        /// Also print the delta against a 3-channel VGG with the original head.
        #[arg(long)]
        delta: bool,
    },
}

fn format(f: FormatArg) -> Format {
    match f {
        FormatArg::AtisBin => Format::AtisBin,
        FormatArg::Aedat2 => Format::Aedat2,
        FormatArg::Evt => Format::Evt,
    }
}

fn reduce(r: ReduceArg) -> ReduceMode {
    match r {
        ReduceArg::Mean => ReduceMode::Mean,
        ReduceArg::Sum => ReduceMode::Sum,
        ReduceArg::Stack => ReduceMode::Stack,
        ReduceArg::PerFrame => ReduceMode::PerFrame,
    }
}

fn normalize(n: NormalizeArg) -> NormalizeMode {
    match n {
        NormalizeArg::None => NormalizeMode::None,
        NormalizeArg::Max => NormalizeMode::PerSampleMax,
        NormalizeArg::Log1p => NormalizeMode::Log1p,
    }
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Convert {
            input,
            format: f,
            slices,
            slice_mode,
            reduce: r,
            normalize: n,
            out,
            flip_polarity,
            geometry,
        } => {
            if slices == 0 {
                return Err(Failure::config("--slices must be at least 1").into());
            }
            let opts = ConvertOptions {
                format: format(f),
                geometry: geometry.geometry()?,
                slices,
                slice_mode: match slice_mode {
                    SliceModeArg::Strict => SliceMode::StrictPaper,
                    SliceModeArg::Remainder => SliceMode::RemainderToLast,
                },
                flip_polarity,
            };
            tools::convert(&tools::ConvertArgs {
                input,
                out,
                opts,
                reduce: r.map(reduce),
                normalize: n.map(normalize),
            })
        }
        Command::Inspect { file, geometry } => tools::inspect(&file, geometry.geometry()?),
        Command::Train { config, resume } => run::run_train(&config, resume.as_deref()),
        Command::Eval {
            ckpt,
            data,
            config,
            confusion,
        } => run::run_eval(&ckpt, &data, &config, confusion),
        Command::Synth {
            out,
            per_class,
            size,
            noise,
            seed,
        } => tools::synth(&out, per_class, size, noise, seed),
        Command::Profile {
            channels,
            height,
            width,
            classes,
            delta,
        } => {
            let cfg = ModelConfig::vgg_cbam(channels, height, width, classes);
            cfg.validate()?;
            tools::run_profile(&cfg, delta)
        }
    }
}

/// The error chain joined with ": ", skipping causes already quoted by
/// their parent's message.
fn describe(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let s = cause.to_string();
        if msg.contains(&s) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&s);
    }
    msg
}

fn threads() -> anyhow::Result<usize> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(0),
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::config(format!("{THREADS_VAR}={v:?} is not a thread count")).into()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = threads().and_then(|n| par::with_threads(n, || dispatch(cli.command)));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
