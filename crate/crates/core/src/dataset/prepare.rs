use std::collections::{HashMap, VecDeque};

use thiserror::Error;

use super::{
    AircraftFix, AircraftId, Measurement, RecordId, SensorCatalog, SensorId, TransmissionRecord,
};
use crate::geo::{propagation_delay, GeoPosition};

/// Largest line-of-sight ToA spread (~1.33 ms at 400 km) plus margin.
pub const DEFAULT_DEDUP_WINDOW_NS: f64 = 2_000_000.0;

/// Consistency threshold for GPS-synchronised pairs, seconds.
pub const DEFAULT_VERIFY_THRESHOLD_S: f64 = 10e-6;

/// A reception from a sensor that only reports a rolling counter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawSample {
    pub sensor_id: SensorId,
    pub rolling_counter: u64,
    /// Opaque fingerprint of the decoded payload.
    pub payload_key: u64,
    pub server_time_us: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnwrapOptions {
    /// Value at which the counter wraps, normally `2^k`.
    pub modulus: u64,
    pub counter_hz: f64,
    /// Bound on the one-way server delay variation, microseconds.
    pub server_jitter_us: f64,
}

impl UnwrapOptions {
    /// Counter of `bits` width ticking at `counter_hz`.
    pub fn new(bits: u32, counter_hz: f64) -> Self {
        Self {
            modulus: 1u64 << bits,
            counter_hz,
            server_jitter_us: 200_000.0,
        }
    }

    pub fn with_server_jitter_us(mut self, jitter: f64) -> Self {
        self.server_jitter_us = jitter;
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UnwrapError {
    #[error("counter value {value} is not below the modulus {modulus}")]
    CounterOutOfRange { value: u64, modulus: u64 },
    #[error("sensor {sensor}: wrap count is ambiguous (residual {residual_counts} counts, tolerance {tolerance_counts})")]
    Ambiguous {
        sensor: SensorId,
        residual_counts: f64,
        tolerance_counts: f64,
    },
}

#[derive(Debug, Clone, Copy)]
struct CounterTrack {
    first_count: u128,
    first_server_us: f64,
    last_count: u128,
    last_server_us: f64,
}

impl CounterTrack {
    /// Counts per server microsecond; the nominal rate unless a long baseline
    /// makes a measured rate more trustworthy than the jitter.
    fn rate(&self, nominal: f64) -> f64 {
        let span = self.last_server_us - self.first_server_us;
        if span < 600e6 {
            return nominal;
        }
        let measured = (self.last_count - self.first_count) as f64 / span;
        measured.clamp(nominal * (1.0 - 5e-4), nominal * (1.0 + 5e-4))
    }
}

/// Maps rolling counters onto continuous nanosecond timestamps.
///
/// Per sensor, each sample takes the wrap count that keeps the counter
/// monotone and closest to the elapsed server time. When the server gap
/// proves less than one period has passed, the smallest monotone wrap is
/// used directly. Ambiguous samples yield an error and leave the sensor's
/// state unchanged.
pub fn unwrap_counter(
    samples: &[RawSample],
    opts: &UnwrapOptions,
) -> Vec<Result<f64, UnwrapError>> {
    let modulus = opts.modulus as u128;
    let m = modulus as f64;
    let nominal = opts.counter_hz / 1e6;
    let jitter_counts = 2.0 * opts.server_jitter_us * nominal;
    let mut tracks: HashMap<SensorId, CounterTrack> = HashMap::new();

    samples
        .iter()
        .map(|s| {
            let counter = s.rolling_counter as u128;
            if counter >= modulus {
                return Err(UnwrapError::CounterOutOfRange {
                    value: s.rolling_counter,
                    modulus: opts.modulus,
                });
            }
            let count = match tracks.get(&s.sensor_id) {
                None => counter,
                Some(t) => {
                    let last = t.last_count;
                    let step = (counter + modulus - last % modulus) % modulus;
                    let smallest = last + step;
                    let expected = (s.server_time_us - t.last_server_us) * t.rate(nominal);
                    if expected + jitter_counts < m {
                        smallest
                    } else {
                        let target = last as f64 + expected;
                        let wraps = ((target - smallest as f64) / m).round().max(0.0) as u128;
                        let candidate = smallest + wraps * modulus;
                        let residual = candidate as f64 - target;
                        let tolerance = m / 2.0 - jitter_counts;
                        if tolerance <= 0.0 || residual.abs() > tolerance {
                            return Err(UnwrapError::Ambiguous {
                                sensor: s.sensor_id,
                                residual_counts: residual,
                                tolerance_counts: tolerance,
                            });
                        }
                        candidate
                    }
                }
            };
            tracks
                .entry(s.sensor_id)
                .and_modify(|t| {
                    t.last_count = count;
                    t.last_server_us = s.server_time_us;
                })
                .or_insert(CounterTrack {
                    first_count: count,
                    first_server_us: s.server_time_us,
                    last_count: count,
                    last_server_us: s.server_time_us,
                });
            Ok(count as f64 * 1e9 / opts.counter_hz)
        })
        .collect()
}

/// A reception with a continuous timestamp and its decoded payload.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reception {
    pub sensor_id: SensorId,
    pub toa_ns: f64,
    pub rssi_db: f64,
    pub server_time_us: f64,
    pub payload_key: u64,
    pub aircraft_id: AircraftId,
    pub fix: Option<AircraftFix>,
}

#[derive(Debug)]
struct OpenGroup {
    payload_key: u64,
    earliest_ns: f64,
    latest_ns: f64,
    members: Vec<Reception>,
}

/// Streaming grouper: receptions sharing a payload whose timestamps span at
/// most `window_ns` become one record; singletons are dropped.
///
/// Input should be roughly time ordered; a group is closed once the stream
/// has moved two windows past its earliest member.
pub struct Deduplicator<I> {
    input: I,
    window_ns: f64,
    open: Vec<OpenGroup>,
    ready: VecDeque<TransmissionRecord>,
    next_id: u64,
    done: bool,
}

impl<I: Iterator<Item = Reception>> Deduplicator<I> {
    pub fn new(input: I, window_ns: f64) -> Self {
        Self {
            input,
            window_ns,
            open: Vec::new(),
            ready: VecDeque::new(),
            next_id: 0,
            done: false,
        }
    }

    /// First record id to assign (default 0).
    pub fn starting_id(mut self, id: u64) -> Self {
        self.next_id = id;
        self
    }

    fn close_before(&mut self, horizon_ns: f64) {
        let mut closing: Vec<OpenGroup> = Vec::new();
        let mut i = 0;
        while i < self.open.len() {
            if self.open[i].earliest_ns < horizon_ns {
                closing.push(self.open.swap_remove(i));
            } else {
                i += 1;
            }
        }
        closing.sort_by(|a, b| {
            a.earliest_ns
                .total_cmp(&b.earliest_ns)
                .then(a.payload_key.cmp(&b.payload_key))
        });
        for g in closing {
            if g.members.len() < 2 {
                continue;
            }
            let first = g.members[0];
            let mut measurements: Vec<Measurement> = g
                .members
                .iter()
                .map(|r| Measurement {
                    sensor_id: r.sensor_id,
                    toa_ns: r.toa_ns,
                    rssi_db: r.rssi_db,
                })
                .collect();
            measurements.sort_by_key(|m| m.sensor_id);
            let server_time_us = g
                .members
                .iter()
                .map(|r| r.server_time_us)
                .fold(f64::INFINITY, f64::min);
            let mut record = TransmissionRecord {
                record_id: RecordId(self.next_id),
                server_time_us,
                aircraft_id: first.aircraft_id,
                truth: first.fix,
                baro_altitude_m: first.fix.and_then(|f| f.baro_altitude_m),
                measurements,
                flagged: false,
            };
            record.refresh_flags();
            self.next_id += 1;
            self.ready.push_back(record);
        }
    }

    fn admit(&mut self, r: Reception) {
        let window = self.window_ns;
        let slot = self.open.iter_mut().find(|g| {
            g.payload_key == r.payload_key
                && g.latest_ns.max(r.toa_ns) - g.earliest_ns.min(r.toa_ns) <= window
                && g.members.iter().all(|m| m.sensor_id != r.sensor_id)
        });
        match slot {
            Some(g) => {
                g.earliest_ns = g.earliest_ns.min(r.toa_ns);
                g.latest_ns = g.latest_ns.max(r.toa_ns);
                g.members.push(r);
            }
            None => self.open.push(OpenGroup {
                payload_key: r.payload_key,
                earliest_ns: r.toa_ns,
                latest_ns: r.toa_ns,
                members: vec![r],
            }),
        }
    }
}

impl<I: Iterator<Item = Reception>> Iterator for Deduplicator<I> {
    type Item = TransmissionRecord;

    fn next(&mut self) -> Option<TransmissionRecord> {
        loop {
            if let Some(r) = self.ready.pop_front() {
                return Some(r);
            }
            if self.done {
                return None;
            }
            match self.input.next() {
                Some(r) => {
                    self.close_before(r.toa_ns - 2.0 * self.window_ns);
                    self.admit(r);
                }
                None => {
                    self.done = true;
                    self.close_before(f64::INFINITY);
                }
            }
        }
    }
}

pub fn deduplicate<I>(samples: I, window_ns: f64) -> Deduplicator<I::IntoIter>
where
    I: IntoIterator<Item = Reception>,
{
    Deduplicator::new(samples.into_iter(), window_ns)
}

/// Outcome of checking a reported position against synchronised sensors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Verification {
    Consistent {
        max_residual_s: f64,
        pairs: usize,
    },
    Inconsistent {
        max_residual_s: f64,
        pairs: usize,
    },
    /// Fewer than two usable sensors, or no reported position.
    NotVerifiable,
}

/// Evaluates the pair offset equation with zero assumed offset for every
/// pair of usable sensors and compares the worst residual to `threshold_s`.
pub fn verify_consistency(
    record: &TransmissionRecord,
    sensors: &SensorCatalog,
    good_only: bool,
    threshold_s: f64,
) -> Verification {
    let Some(truth) = record.truth else {
        return Verification::NotVerifiable;
    };
    let Ok(p) = truth.geodetic().to_ecef() else {
        return Verification::NotVerifiable;
    };
    let usable: Vec<(f64, f64)> = record
        .measurements
        .iter()
        .filter_map(|m| {
            let s = sensors.get(m.sensor_id)?;
            if good_only && !s.good.is_true() {
                return None;
            }
            let pos = GeoPosition::to_ecef(&s.position).ok()?;
            Some((propagation_delay(&pos, &p), m.toa_ns * 1e-9))
        })
        .collect();
    if usable.len() < 2 {
        return Verification::NotVerifiable;
    }
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    for (a, (di, ti)) in usable.iter().enumerate() {
        for (dj, tj) in &usable[a + 1..] {
            let residual = (di - dj) - (ti - tj);
            worst = worst.max(residual.abs());
            pairs += 1;
        }
    }
    if worst < threshold_s {
        Verification::Consistent {
            max_residual_s: worst,
            pairs,
        }
    } else {
        Verification::Inconsistent {
            max_residual_s: worst,
            pairs,
        }
    }
}
