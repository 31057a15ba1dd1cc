//! Moving-bar event streams for desk-scale training runs.
//!
//! A bright vertical bar sweeps horizontally across a dark scene. The
//! leading edge brightens (ON events) and the trailing edge darkens (OFF
//! events), so ON activity sits on the side the bar is heading towards.
//! Label 0 is a leftward sweep, label 1 rightward.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::event::{Event, EventStream, Polarity, SensorGeometry};

pub const CLASS_NAMES: [&str; 2] = ["left", "right"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarSettings {
    pub geometry: SensorGeometry,
    /// Fraction of events replaced by uniform background noise.
    pub noise: f64,
}

impl Default for BarSettings {
    fn default() -> Self {
        Self {
            geometry: SensorGeometry {
                width: 16,
                height: 16,
            },
            noise: 0.05,
        }
    }
}

/// One sweep. Start column, sweep length, bar width, vertical extent and
/// speed are drawn from `rng`.
pub fn moving_bar<R: Rng>(rightward: bool, settings: &BarSettings, rng: &mut R) -> EventStream {
    let g = settings.geometry;
    let (w, h) = (g.width as i64, g.height as i64);
    let bar = rng.gen_range(1..=2i64);
    let steps = rng.gen_range((w / 2).max(2)..=w);
    let y0 = rng.gen_range(0..(h / 3).max(1));
    let y1 = rng.gen_range((2 * h / 3).min(h - 1)..h);
    let dt = rng.gen_range(500..1500u64);
    // left edge of the bar at step 0; the sweep may start off-sensor
    let dir = if rightward { 1 } else { -1 };
    let start = if rightward {
        rng.gen_range(-bar..=(w - steps).max(-bar))
    } else {
        rng.gen_range((steps - bar).min(w)..=w)
    };

    let mut events = Vec::new();
    let mut t0 = 0u64;
    for s in 0..steps {
        let left = start + dir * s;
        // ON where the bar arrives, OFF where it leaves
        let (on_x, off_x) = if rightward {
            (left + bar, left)
        } else {
            (left - 1, left + bar - 1)
        };
        for (x, p) in [(on_x, Polarity::On), (off_x, Polarity::Off)] {
            if !(0..w).contains(&x) {
                continue;
            }
            for y in y0..=y1 {
                if rng.gen_bool(0.8) {
                    events.push(Event::new(x as u16, y as u16, t0 + rng.gen_range(0..dt), p));
                }
            }
        }
        t0 += dt;
    }
    let noise = ((events.len() as f64) * settings.noise).round() as usize;
    for _ in 0..noise.max(1) {
        events.push(Event::new(
            rng.gen_range(0..g.width),
            rng.gen_range(0..g.height),
            rng.gen_range(0..t0.max(1)),
            Polarity::from_bit(rng.gen_bool(0.5)),
        ));
    }
    events.sort_by_key(|e| e.t);
    EventStream::new(events, g, Some(rightward as u32)).expect("generated events are valid")
}

/// `per_class` streams of each direction, interleaved left/right.
pub fn bar_dataset(per_class: usize, settings: &BarSettings, seed: u64) -> Vec<EventStream> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..2 * per_class)
        .map(|i| moving_bar(i % 2 == 1, settings, &mut rng))
        .collect()
}
