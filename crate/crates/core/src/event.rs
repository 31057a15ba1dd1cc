//! In-memory event streams.
//!
//! An event is the quadruple `(x, y, t, p)`. Timestamps are always 64-bit
//! microseconds; the decoders in [`crate::codec`] unwrap any hardware
//! rollover before a stream is built, so nothing downstream ever sees a
//! timestamp going backwards.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sign of the brightness change. The discriminant is the channel index used
/// by frame integration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Polarity {
    Off = 0,
    On = 1,
}

impl Polarity {
    pub fn from_bit(bit: bool) -> Self {
        if bit {
            Polarity::On
        } else {
            Polarity::Off
        }
    }

    pub fn from_u8(value: u8) -> Option<Self> {
        match value {
            0 => Some(Polarity::Off),
            1 => Some(Polarity::On),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::Off => Polarity::On,
            Polarity::On => Polarity::Off,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    /// Microseconds.
    pub t: u64,
    pub p: Polarity,
}

impl Event {
    pub fn new(x: u16, y: u16, t: u64, p: Polarity) -> Self {
        Self { x, y, t, p }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SensorGeometry {
    pub width: u16,
    pub height: u16,
}

impl SensorGeometry {
    pub fn new(width: u16, height: u16) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidGeometry {
                width: width.into(),
                height: height.into(),
            });
        }
        Ok(Self { width, height })
    }

    /// DVS128, the sensor behind CIFAR10-DVS.
    pub const DVS128: SensorGeometry = SensorGeometry {
        width: 128,
        height: 128,
    };

    /// Full ATIS array; N-Caltech101 recordings fit inside it.
    pub const ATIS: SensorGeometry = SensorGeometry {
        width: 304,
        height: 240,
    };

    pub fn contains(&self, x: u16, y: u16) -> bool {
        x < self.width && y < self.height
    }

    pub fn pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub geometry: SensorGeometry,
    pub label: Option<u32>,
}

impl EventStream {
    /// Builds and validates a stream.
    pub fn new(events: Vec<Event>, geometry: SensorGeometry, label: Option<u32>) -> Result<Self> {
        validate_stream(Self {
            events,
            geometry,
            label,
        })
    }

    pub fn empty(geometry: SensorGeometry) -> Self {
        Self {
            events: Vec::new(),
            geometry,
            label: None,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev_t = 0u64;
        for (index, e) in self.events.iter().enumerate() {
            if !self.geometry.contains(e.x, e.y) {
                return Err(Error::OutOfBounds {
                    index,
                    x: e.x.into(),
                    y: e.y.into(),
                });
            }
            if index > 0 && e.t < prev_t {
                return Err(Error::NonMonotonicTimestamps { index });
            }
            prev_t = e.t;
        }
        Ok(())
    }

    /// Swaps ON and OFF for every event.
    pub fn flip_polarity(mut self) -> Self {
        for e in &mut self.events {
            e.p = e.p.flipped();
        }
        self
    }

    /// Appends `other` after `self`. Both must share a geometry and the
    /// result must still be time-ordered.
    pub fn concat(mut self, other: EventStream) -> Result<Self> {
        if self.geometry != other.geometry {
            return Err(Error::InvalidGeometry {
                width: other.geometry.width.into(),
                height: other.geometry.height.into(),
            });
        }
        self.events.extend(other.events);
        validate_stream(self)
    }
}

/// Returns the stream unchanged if timestamps are non-decreasing and every
/// event lies inside the geometry.
pub fn validate_stream(stream: EventStream) -> Result<EventStream> {
    stream.validate()?;
    Ok(stream)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamStats {
    pub count: usize,
    pub duration_us: u64,
    pub on_count: usize,
    pub off_count: usize,
    pub min_x: u16,
    pub max_x: u16,
    pub min_y: u16,
    pub max_y: u16,
}

pub fn stream_stats(stream: &EventStream) -> Result<StreamStats> {
    let first = stream.events.first().ok_or(Error::EmptyStream)?;
    let last = stream.events.last().ok_or(Error::EmptyStream)?;
    let mut stats = StreamStats {
        count: stream.events.len(),
        duration_us: last.t - first.t,
        on_count: 0,
        off_count: 0,
        min_x: u16::MAX,
        max_x: 0,
        min_y: u16::MAX,
        max_y: 0,
    };
    for e in &stream.events {
        match e.p {
            Polarity::On => stats.on_count += 1,
            Polarity::Off => stats.off_count += 1,
        }
        stats.min_x = stats.min_x.min(e.x);
        stats.max_x = stats.max_x.max(e.x);
        stats.min_y = stats.min_y.min(e.y);
        stats.max_y = stats.max_y.max(e.y);
    }
    Ok(stats)
}
