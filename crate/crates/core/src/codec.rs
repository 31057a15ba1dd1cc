//! Binary event formats.
//!
//! * ATIS `.bin` (N-Caltech101): 5-byte records. Byte 0 is x, byte 1 is y,
//!   bit 7 of byte 2 is the polarity and the remaining 23 bits are a
//!   big-endian microsecond timestamp.
//! * AEDAT 2.0 (CIFAR10-DVS, DVS128 addressing): `#`-prefixed ASCII header
//!   lines followed by 8-byte big-endian `(address, timestamp)` records.
//! * Portable `.evt`: a lossless little-endian interchange format.
//!
//! Raw timestamps that go backwards are treated as a counter rollover and
//! unwrapped by adding one full period of the format's timestamp width.

use crate::error::{Error, Result};
use crate::event::{validate_stream, Event, EventStream, Polarity, SensorGeometry};

const ATIS_RECORD: usize = 5;
const ATIS_TS_BITS: u32 = 23;
const AEDAT_RECORD: usize = 8;

pub const PORTABLE_MAGIC: &[u8; 8] = b"EVSTRM01";
pub const PORTABLE_VERSION: u16 = 1;
pub const PORTABLE_HEADER_LEN: usize = 8 + 2 + 2 + 2 + 4 + 8;
pub const PORTABLE_RECORD_LEN: usize = 2 + 2 + 1 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    AtisBin,
    Aedat2,
    Evt,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::AtisBin => "bin",
            Format::Aedat2 => "aedat",
            Format::Evt => "evt",
        }
    }

    pub fn from_extension(ext: &str) -> Option<Self> {
        match ext.to_ascii_lowercase().as_str() {
            "bin" => Some(Format::AtisBin),
            "aedat" => Some(Format::Aedat2),
            "evt" => Some(Format::Evt),
            _ => None,
        }
    }
}

/// Turns a sequence of wrapping `bits`-wide counters into monotone 64-bit
/// timestamps.
#[derive(Debug, Clone)]
pub struct RolloverUnwrapper {
    period: u64,
    offset: u64,
    prev: Option<u64>,
}

impl RolloverUnwrapper {
    pub fn new(bits: u32) -> Self {
        Self {
            period: 1u64 << bits,
            offset: 0,
            prev: None,
        }
    }

    pub fn unwrap(&mut self, raw: u64) -> u64 {
        if let Some(prev) = self.prev {
            if raw < prev {
                self.offset += self.period;
            }
        }
        self.prev = Some(raw);
        self.offset + raw
    }
}

pub fn decode_atis_bin(bytes: &[u8], geometry: SensorGeometry) -> Result<EventStream> {
    let remainder = bytes.len() % ATIS_RECORD;
    if remainder != 0 {
        return Err(Error::TruncatedRecord {
            offset: bytes.len() - remainder,
            remaining: remainder,
        });
    }
    let mut clock = RolloverUnwrapper::new(ATIS_TS_BITS);
    let events = bytes
        .chunks_exact(ATIS_RECORD)
        .map(|r| {
            let raw_t = (u64::from(r[2] & 0x7F) << 16) | (u64::from(r[3]) << 8) | u64::from(r[4]);
            Event {
                x: r[0].into(),
                y: r[1].into(),
                t: clock.unwrap(raw_t),
                p: Polarity::from_bit(r[2] & 0x80 != 0),
            }
        })
        .collect();
    validate_stream(EventStream {
        events,
        geometry,
        label: None,
    })
}

/// Inverse of [`decode_atis_bin`] for a single record; `t` is truncated to
/// its low 23 bits.
pub fn encode_atis_record(x: u8, y: u8, p: Polarity, t: u64) -> [u8; 5] {
    let t = t & ((1 << ATIS_TS_BITS) - 1);
    [
        x,
        y,
        ((p as u8) << 7) | ((t >> 16) as u8 & 0x7F),
        (t >> 8) as u8,
        t as u8,
    ]
}

/// Splits the `#` header from the record payload and checks the version
/// line when present. Returns the payload offset.
fn aedat_payload_offset(bytes: &[u8]) -> Result<usize> {
    let mut pos = 0;
    while pos < bytes.len() && bytes[pos] == b'#' {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| pos + i)
            .ok_or_else(|| Error::MalformedHeader {
                offset: pos,
                reason: "header line is not newline-terminated".into(),
            })?;
        let line = std::str::from_utf8(&bytes[pos..end]).map_err(|_| Error::MalformedHeader {
            offset: pos,
            reason: "header line is not ASCII".into(),
        })?;
        let line = line.trim_end_matches('\r');
        if let Some(version) = line.strip_prefix("#!AER-DAT") {
            let major = version
                .split('.')
                .next()
                .and_then(|m| m.trim().parse::<u32>().ok())
                .ok_or_else(|| Error::MalformedHeader {
                    offset: pos,
                    reason: format!("unreadable version line {line:?}"),
                })?;
            if major != 2 {
                return Err(Error::UnsupportedVersion(format!("AEDAT {}", version.trim())));
            }
        }
        pos = end + 1;
    }
    Ok(pos)
}

pub fn decode_aedat2(bytes: &[u8]) -> Result<EventStream> {
    let start = aedat_payload_offset(bytes)?;
    let payload = &bytes[start..];
    let remainder = payload.len() % AEDAT_RECORD;
    if remainder != 0 {
        return Err(Error::TruncatedRecord {
            offset: bytes.len() - remainder,
            remaining: remainder,
        });
    }
    let mut clock = RolloverUnwrapper::new(32);
    let events = payload
        .chunks_exact(AEDAT_RECORD)
        .map(|r| {
            let addr = u32::from_be_bytes([r[0], r[1], r[2], r[3]]);
            let ts = u32::from_be_bytes([r[4], r[5], r[6], r[7]]);
            Event {
                x: ((addr >> 1) & 0x7F) as u16,
                y: ((addr >> 8) & 0x7F) as u16,
                t: clock.unwrap(ts.into()),
                p: Polarity::from_bit(addr & 1 != 0),
            }
        })
        .collect();
    validate_stream(EventStream {
        events,
        geometry: SensorGeometry::DVS128,
        label: None,
    })
}

/// DVS128 address word for `(x, y, p)`.
pub fn dvs128_address(x: u16, y: u16, p: Polarity) -> u32 {
    (u32::from(y & 0x7F) << 8) | (u32::from(x & 0x7F) << 1) | p as u32
}

pub fn encode_portable(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(PORTABLE_HEADER_LEN + stream.len() * PORTABLE_RECORD_LEN);
    out.extend_from_slice(PORTABLE_MAGIC);
    out.extend_from_slice(&PORTABLE_VERSION.to_le_bytes());
    out.extend_from_slice(&stream.geometry.width.to_le_bytes());
    out.extend_from_slice(&stream.geometry.height.to_le_bytes());
    let label = stream.label.map_or(-1, |l| l as i32);
    out.extend_from_slice(&label.to_le_bytes());
    out.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    for e in &stream.events {
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.p as u8);
        out.extend_from_slice(&e.t.to_le_bytes());
    }
    out
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u64(b: &[u8], at: usize) -> u64 {
    let mut w = [0u8; 8];
    w.copy_from_slice(&b[at..at + 8]);
    u64::from_le_bytes(w)
}

pub fn decode_portable(bytes: &[u8]) -> Result<EventStream> {
    if bytes.len() < PORTABLE_MAGIC.len() || &bytes[..8] != PORTABLE_MAGIC {
        let n = bytes.len().min(8);
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(PORTABLE_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..n]).into_owned(),
        });
    }
    if bytes.len() < PORTABLE_HEADER_LEN {
        return Err(Error::TruncatedHeader {
            needed: PORTABLE_HEADER_LEN,
            available: bytes.len(),
        });
    }
    let version = le_u16(bytes, 8);
    if version != PORTABLE_VERSION {
        return Err(Error::UnsupportedVersion(format!("evt v{version}")));
    }
    let geometry = SensorGeometry::new(le_u16(bytes, 10), le_u16(bytes, 12))?;
    let label = i32::from_le_bytes([bytes[14], bytes[15], bytes[16], bytes[17]]);
    let count = le_u64(bytes, 18);

    let payload = &bytes[PORTABLE_HEADER_LEN..];
    let remainder = payload.len() % PORTABLE_RECORD_LEN;
    if remainder != 0 {
        return Err(Error::TruncatedRecord {
            offset: bytes.len() - remainder,
            remaining: remainder,
        });
    }
    let found = (payload.len() / PORTABLE_RECORD_LEN) as u64;
    if found != count {
        return Err(Error::CountMismatch {
            expected: count,
            found,
        });
    }
    let mut events = Vec::with_capacity(found as usize);
    for (i, r) in payload.chunks_exact(PORTABLE_RECORD_LEN).enumerate() {
        let p = Polarity::from_u8(r[4]).ok_or(Error::InvalidPolarity {
            offset: PORTABLE_HEADER_LEN + i * PORTABLE_RECORD_LEN + 4,
            value: r[4],
        })?;
        events.push(Event {
            x: le_u16(r, 0),
            y: le_u16(r, 2),
            p,
            t: le_u64(r, 5),
        });
    }
    validate_stream(EventStream {
        events,
        geometry,
        label: (label >= 0).then_some(label as u32),
    })
}

/// Decodes `bytes` in the given format. `geometry` is only consulted for
/// ATIS files, which carry none of their own.
pub fn decode(format: Format, bytes: &[u8], geometry: SensorGeometry) -> Result<EventStream> {
    match format {
        Format::AtisBin => decode_atis_bin(bytes, geometry),
        Format::Aedat2 => decode_aedat2(bytes),
        Format::Evt => decode_portable(bytes),
    }
}

pub fn read_file(
    path: &std::path::Path,
    format: Format,
    geometry: SensorGeometry,
) -> Result<EventStream> {
    let bytes = std::fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
    decode(format, &bytes, geometry).map_err(|e| e.in_file(path))
}
