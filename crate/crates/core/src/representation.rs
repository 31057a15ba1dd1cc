//! Fixed-count slicing of an event stream into two-channel count frames.
//!
//! A stream of `N` events is cut into `T` consecutive index ranges of
//! `⌊N/T⌋` events each. Slice `n` covers the half-open range
//! `[⌊N/T⌋·n, ⌊N/T⌋·(n+1))`, so adjacent slices never share an event.
//! Within a slice, `Frame(n, p, x, y)` is the number of events with
//! polarity `p` at pixel `(x, y)`.
//!
//! Counts stay integral until [`temporal_reduce`] turns them into a real
//! network input.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{EventStream, SensorGeometry};
use crate::par;
use crate::tensor::Tensor;

/// What to do with the `N mod T` events left over by equal-count slicing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceMode {
    /// Drop them; every slice holds exactly `⌊N/T⌋` events.
    #[serde(alias = "strict")]
    StrictPaper,
    /// Append them to the last slice.
    #[default]
    #[serde(alias = "remainder")]
    RemainderToLast,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceSpec {
    pub slices: usize,
    pub mode: SliceMode,
    pub boundaries: Vec<Range<usize>>,
}

impl SliceSpec {
    /// Number of events covered by all slices together.
    pub fn covered(&self) -> usize {
        self.boundaries.last().map_or(0, |r| r.end)
    }
}

pub fn slice_by_count(events: usize, slices: usize, mode: SliceMode) -> Result<SliceSpec> {
    if slices == 0 || events < slices {
        return Err(Error::TooFewEvents { events, slices });
    }
    let width = events / slices;
    let mut boundaries: Vec<Range<usize>> =
        (0..slices).map(|n| width * n..width * (n + 1)).collect();
    if mode == SliceMode::RemainderToLast {
        if let Some(last) = boundaries.last_mut() {
            last.end = events;
        }
    }
    Ok(SliceSpec {
        slices,
        mode,
        boundaries,
    })
}

/// `T × 2 × H × W` event counts, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameTensor {
    pub slices: usize,
    pub geometry: SensorGeometry,
    pub counts: Vec<u32>,
}

impl FrameTensor {
    pub fn zeros(slices: usize, geometry: SensorGeometry) -> Self {
        Self {
            slices,
            geometry,
            counts: vec![0; slices * 2 * geometry.pixels()],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        [
            self.slices,
            2,
            self.geometry.height as usize,
            self.geometry.width as usize,
        ]
    }

    pub fn index(&self, n: usize, p: usize, x: usize, y: usize) -> usize {
        let [_, c, h, w] = self.shape();
        ((n * c + p) * h + y) * w + x
    }

    pub fn get(&self, n: usize, p: usize, x: usize, y: usize) -> u32 {
        self.counts[self.index(n, p, x, y)]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }

    /// Total count per `(slice, polarity)` plane.
    pub fn plane_totals(&self) -> Vec<[u64; 2]> {
        let plane = self.geometry.pixels();
        self.counts
            .chunks(2 * plane)
            .map(|s| {
                [
                    s[..plane].iter().map(|&c| u64::from(c)).sum(),
                    s[plane..].iter().map(|&c| u64::from(c)).sum(),
                ]
            })
            .collect()
    }
}

pub fn integrate_frames(stream: &EventStream, spec: &SliceSpec) -> Result<FrameTensor> {
    if spec.covered() > stream.len() {
        return Err(Error::SliceSpecMismatch {
            covered: spec.covered(),
            available: stream.len(),
        });
    }
    let geometry = stream.geometry;
    let mut frames = FrameTensor::zeros(spec.slices, geometry);
    let plane = geometry.pixels();
    let width = geometry.width as usize;
    par::for_each_chunk_mut(&mut frames.counts, 2 * plane, |n, slice| {
        for e in &stream.events[spec.boundaries[n].clone()] {
            slice[e.p.index() * plane + e.y as usize * width + e.x as usize] += 1;
        }
    });
    Ok(frames)
}

/// Convenience wrapper: slice `stream` into `slices` frames and integrate.
pub fn frames_from_stream(
    stream: &EventStream,
    slices: usize,
    mode: SliceMode,
) -> Result<FrameTensor> {
    let spec = slice_by_count(stream.len(), slices, mode)?;
    integrate_frames(stream, &spec)
}

/// How `T` frames become one network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReduceMode {
    /// `2 × H × W`, average over slices.
    #[default]
    Mean,
    /// `2 × H × W`, sum over slices.
    Sum,
    /// `2T × H × W`; channel `2n + p` is slice `n`, polarity `p`.
    Stack,
    /// `T × 2 × H × W`; each slice goes through the network separately and
    /// the logits are averaged.
    #[serde(alias = "per-frame")]
    PerFrame,
}

impl ReduceMode {
    /// Channels seen by the first convolution.
    pub fn input_channels(self, slices: usize) -> usize {
        match self {
            ReduceMode::Stack => 2 * slices,
            _ => 2,
        }
    }
}

pub fn temporal_reduce(frames: &FrameTensor, mode: ReduceMode) -> Tensor {
    let [t, c, h, w] = frames.shape();
    let as_real: Vec<f64> = frames.counts.iter().map(|&v| f64::from(v)).collect();
    match mode {
        ReduceMode::Stack => Tensor::new(vec![t * c, h, w], as_real),
        ReduceMode::PerFrame => Tensor::new(vec![t, c, h, w], as_real),
        ReduceMode::Sum | ReduceMode::Mean => {
            let frame = c * h * w;
            let mut out = vec![0.0; frame];
            for slice in as_real.chunks(frame) {
                for (o, v) in out.iter_mut().zip(slice) {
                    *o += v;
                }
            }
            if mode == ReduceMode::Mean {
                let inv = t as f64;
                out.iter_mut().for_each(|v| *v /= inv);
            }
            Tensor::new(vec![c, h, w], out)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeMode {
    None,
    /// Divide by the largest entry (an all-zero input stays zero).
    #[default]
    #[serde(alias = "max")]
    PerSampleMax,
    Log1p,
}

pub fn normalize_input(x: Tensor, mode: NormalizeMode) -> Tensor {
    match mode {
        NormalizeMode::None => x,
        NormalizeMode::PerSampleMax => {
            let max = x.data().iter().copied().fold(0.0f64, f64::max);
            if max > 0.0 {
                x.map(|v| v / max)
            } else {
                x
            }
        }
        NormalizeMode::Log1p => x.map(f64::ln_1p),
    }
}

/// Reduces and normalizes one sample into a network input.
pub fn prepare_input(frames: &FrameTensor, reduce: ReduceMode, normalize: NormalizeMode) -> Tensor {
    normalize_input(temporal_reduce(frames, reduce), normalize)
}

pub const FRAME_MAGIC: &[u8; 8] = b"EVFRAM01";
pub const FRAME_HEADER_LEN: usize = 8 + 4 * 4 + 1;
/// Only integral counts are stored; reduction happens at load time.
pub const DTYPE_U32: u8 = 0;

pub fn encode_frames(frames: &FrameTensor) -> Vec<u8> {
    let [t, c, h, w] = frames.shape();
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + 4 * frames.counts.len());
    out.extend_from_slice(FRAME_MAGIC);
    for d in [t, c, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(DTYPE_U32);
    for &v in &frames.counts {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_frames(bytes: &[u8]) -> Result<FrameTensor> {
    if bytes.len() < 8 || &bytes[..8] != FRAME_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(FRAME_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into_owned(),
        });
    }
    if bytes.len() < FRAME_HEADER_LEN {
        return Err(Error::TruncatedHeader {
            needed: FRAME_HEADER_LEN,
            available: bytes.len(),
        });
    }
    let dim = |i: usize| {
        let at = 8 + 4 * i;
        u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]) as usize
    };
    let (t, c, h, w) = (dim(0), dim(1), dim(2), dim(3));
    if c != 2 {
        return Err(Error::ShapeMismatch(format!("frame file has {c} channels, expected 2")));
    }
    let dtype = bytes[FRAME_HEADER_LEN - 1];
    if dtype != DTYPE_U32 {
        return Err(Error::UnsupportedVersion(format!("frame dtype tag {dtype}")));
    }
    let geometry = SensorGeometry::new(
        u16::try_from(w).map_err(|_| Error::ShapeMismatch(format!("width {w}")))?,
        u16::try_from(h).map_err(|_| Error::ShapeMismatch(format!("height {h}")))?,
    )?;
    let expected = t * c * h * w;
    let payload = &bytes[FRAME_HEADER_LEN..];
    if payload.len() != expected * 4 {
        let whole = (payload.len() / 4).min(expected);
        return Err(Error::TruncatedRecord {
            offset: FRAME_HEADER_LEN + whole * 4,
            remaining: payload.len().saturating_sub(whole * 4),
        });
    }
    let counts = payload
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(FrameTensor {
        slices: t,
        geometry,
        counts,
    })
}
