//! Opportunistic pairwise clock synchronisation.
//!
//! Records whose transmitter reported its own position give one offset
//! sample per pair of receiving sensors. Each pair keeps its own tracker;
//! there is no network-wide time reference. Pairs are always keyed with the
//! lower sensor id first and the reverse direction is served by negation.

mod graph;
mod snapshot;
mod tracker;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    AircraftCatalog, Indicator, RecordId, SensorCatalog, SensorId, SensorInfo, TransmissionRecord,
};
use crate::exec::Exec;
use crate::geo::SPEED_OF_LIGHT_MPS;

pub use graph::PairGraph;
pub use snapshot::{
    read_snapshot, SnapshotEpoch, SnapshotReader, SnapshotWriter, SNAPSHOT_COLUMNS,
};
pub use tracker::{PairOffsetTracker, TrackerStatus, UpdateOutcome};

/// Unordered sensor pair stored as `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SensorPair {
    pub a: SensorId,
    pub b: SensorId,
}

impl SensorPair {
    /// Orders the pair and returns the sign that maps values keyed on
    /// `(i, j)` onto the stored orientation. `None` when `i == j`.
    pub fn new(i: SensorId, j: SensorId) -> Option<(SensorPair, f64)> {
        match i.cmp(&j) {
            std::cmp::Ordering::Less => Some((SensorPair { a: i, b: j }, 1.0)),
            std::cmp::Ordering::Greater => Some((SensorPair { a: j, b: i }, -1.0)),
            std::cmp::Ordering::Equal => None,
        }
    }

    pub fn contains(&self, s: SensorId) -> bool {
        self.a == s || self.b == s
    }
}

impl fmt::Display for SensorPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.a, self.b)
    }
}

/// One observation of a pair offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetSample {
    pub pair: SensorPair,
    /// Arrival time on the clock of `pair.a`.
    pub t_event_ns: f64,
    /// `(d_a - d_b)/c - (t_a - t_b)`, in nanoseconds.
    pub delta_ns: f64,
    pub source_record_id: RecordId,
}

/// Samples from one record plus the sensors that had to be left out.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<OffsetSample>,
    /// Receiving sensors without a usable position.
    pub skipped: Vec<SensorId>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyncError {
    #[error("record {0} carries no reported position")]
    NoTruth(RecordId),
    #[error("record {0}: reported position unusable")]
    BadTruth(RecordId),
    #[error("non-finite sample from record {0}")]
    NonFinite(RecordId),
    #[error("pair {pair}: sample at {got_ns} ns precedes last update at {last_ns} ns")]
    Ordering {
        pair: SensorPair,
        last_ns: f64,
        got_ns: f64,
    },
    #[error("pair {0} has no offset estimate")]
    NoEstimate(SensorPair),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncConfig {
    pub gate_sigma: f64,
    /// Consecutive rejections tolerated before the tracker restarts.
    pub reject_limit: u32,
    /// Drift random-walk intensity in ns/s per sqrt(s).
    pub drift_random_walk: f64,
    /// Prior standard deviation of a freshly seeded drift, ns/s.
    pub initial_drift_sigma_ns_per_s: f64,
    /// Timestamp noise of GPS-synchronised sensors.
    pub toa_sigma_good_ns: f64,
    pub toa_sigma_other_ns: f64,
    pub noise_adapt_alpha: f64,
    /// Accepted samples before the measurement variance follows the innovations.
    pub noise_adapt_after: u64,
    pub min_measurement_var_ns2: f64,
    /// Oldest tracker state usable for prediction, seconds.
    pub max_extrapolation_s: f64,
    /// Only aircraft with verified position quality feed the trackers.
    pub verified_only: bool,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self {
            gate_sigma: 5.0,
            reject_limit: 5,
            drift_random_walk: 1.0,
            initial_drift_sigma_ns_per_s: 2.0e4,
            toa_sigma_good_ns: 50.0,
            toa_sigma_other_ns: 500.0,
            noise_adapt_alpha: 0.02,
            noise_adapt_after: 20,
            min_measurement_var_ns2: 1.0,
            max_extrapolation_s: 300.0,
            verified_only: false,
        }
    }
}

impl SyncConfig {
    pub fn drift_noise_ns2_per_s3(&self) -> f64 {
        self.drift_random_walk * self.drift_random_walk
    }

    /// Class-based timestamp variance of one sensor, ns².
    pub fn class_variance_ns2(&self, sensor: Option<&SensorInfo>) -> f64 {
        let s = match sensor.map(|s| s.good) {
            Some(Indicator::True) => self.toa_sigma_good_ns,
            _ => self.toa_sigma_other_ns,
        };
        s * s
    }

    pub fn admits(&self, quality: Indicator) -> bool {
        match quality {
            Indicator::True => true,
            Indicator::Unknown => !self.verified_only,
            Indicator::False => false,
        }
    }
}

/// Offset samples for every pair of receivers in a record with a known
/// transmitter position.
pub fn offset_sample(
    record: &TransmissionRecord,
    sensors: &SensorCatalog,
) -> Result<SampleSet, SyncError> {
    let truth = record.truth.ok_or(SyncError::NoTruth(record.record_id))?;
    let p = truth
        .geodetic()
        .to_ecef()
        .map_err(|_| SyncError::BadTruth(record.record_id))?;
    let mut set = SampleSet::default();
    let mut located: Vec<(SensorId, f64, f64)> = Vec::with_capacity(record.measurements.len());
    for m in &record.measurements {
        match sensors.ecef(m.sensor_id) {
            Some(s) => located.push((
                m.sensor_id,
                m.toa_ns,
                s.distance(&p) / SPEED_OF_LIGHT_MPS * 1e9,
            )),
            None => set.skipped.push(m.sensor_id),
        }
    }
    located.sort_by_key(|l| l.0);
    for (x, &(ia, ta, da)) in located.iter().enumerate() {
        for &(ib, tb, db) in &located[x + 1..] {
            let Some((pair, _)) = SensorPair::new(ia, ib) else {
                continue;
            };
            let delta_ns = (da - db) - (ta - tb);
            if !delta_ns.is_finite() || !ta.is_finite() {
                return Err(SyncError::NonFinite(record.record_id));
            }
            set.samples.push(OffsetSample {
                pair,
                t_event_ns: ta,
                delta_ns,
                source_record_id: record.record_id,
            });
        }
    }
    Ok(set)
}

/// Running totals over everything an engine has ingested.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SyncStats {
    pub records_seen: u64,
    pub records_used: u64,
    pub samples: u64,
    pub seeded: u64,
    pub accepted: u64,
    pub rejected: u64,
    pub reinits: u64,
    pub out_of_order: u64,
    pub skipped_sensors: u64,
}

impl SyncStats {
    pub fn rejection_rate(&self) -> f64 {
        let n = self.seeded + self.accepted + self.rejected;
        if n == 0 {
            0.0
        } else {
            self.rejected as f64 / n as f64
        }
    }
}

/// Owns every pair tracker and folds batches of records into them.
///
/// Within a batch, samples are grouped per pair and applied in event-time
/// order; pairs update independently, in parallel when requested.
#[derive(Debug, Clone, Default)]
pub struct SyncEngine {
    cfg: SyncConfig,
    trackers: BTreeMap<SensorPair, PairOffsetTracker>,
    stats: SyncStats,
}

impl SyncEngine {
    pub fn new(cfg: SyncConfig) -> Self {
        Self {
            cfg,
            trackers: BTreeMap::new(),
            stats: SyncStats::default(),
        }
    }

    /// Resumes from saved tracker states.
    pub fn with_trackers(
        cfg: SyncConfig,
        trackers: impl IntoIterator<Item = PairOffsetTracker>,
    ) -> Self {
        Self {
            cfg,
            trackers: trackers.into_iter().map(|t| (t.pair, t)).collect(),
            stats: SyncStats::default(),
        }
    }

    pub fn config(&self) -> &SyncConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &SyncStats {
        &self.stats
    }

    pub fn trackers(&self) -> impl Iterator<Item = &PairOffsetTracker> {
        self.trackers.values()
    }

    pub fn tracker(&self, pair: SensorPair) -> Option<&PairOffsetTracker> {
        self.trackers.get(&pair)
    }

    /// Whether a record may feed synchronisation.
    pub fn eligible(&self, r: &TransmissionRecord, aircraft: &AircraftCatalog) -> bool {
        r.truth.is_some() && !r.flagged && self.cfg.admits(aircraft.quality(r.aircraft_id))
    }

    pub fn ingest(
        &mut self,
        records: &[TransmissionRecord],
        sensors: &SensorCatalog,
        aircraft: &AircraftCatalog,
        exec: Exec,
    ) {
        self.stats.records_seen += records.len() as u64;
        let used: Vec<&TransmissionRecord> = records
            .iter()
            .filter(|r| self.eligible(r, aircraft))
            .collect();
        self.stats.records_used += used.len() as u64;
        let sets = exec.map(&used, |r| offset_sample(r, sensors));

        let mut by_pair: BTreeMap<SensorPair, Vec<OffsetSample>> = BTreeMap::new();
        for set in sets.into_iter().flatten() {
            self.stats.skipped_sensors += set.skipped.len() as u64;
            for s in set.samples {
                by_pair.entry(s.pair).or_default().push(s);
            }
        }

        let cfg = self.cfg;
        let mut work: Vec<(PairOffsetTracker, Vec<OffsetSample>)> = by_pair
            .into_iter()
            .map(|(pair, mut samples)| {
                samples.sort_by(|x, y| x.t_event_ns.total_cmp(&y.t_event_ns));
                let tracker = self.trackers.remove(&pair).unwrap_or_else(|| {
                    let var = cfg.class_variance_ns2(sensors.get(pair.a))
                        + cfg.class_variance_ns2(sensors.get(pair.b));
                    PairOffsetTracker::new(pair, var)
                });
                (tracker, samples)
            })
            .collect();

        let tallies = exec.map_mut(&mut work, |(tracker, samples)| {
            let mut t = SyncStats::default();
            for s in samples.iter() {
                t.samples += 1;
                match tracker.update(s, &cfg) {
                    Ok(UpdateOutcome::Seeded) => t.seeded += 1,
                    Ok(UpdateOutcome::Accepted) => t.accepted += 1,
                    Ok(UpdateOutcome::Rejected) => t.rejected += 1,
                    Ok(UpdateOutcome::RejectedAndReset) => {
                        t.rejected += 1;
                        t.reinits += 1;
                    }
                    Err(_) => t.out_of_order += 1,
                }
            }
            t
        });
        for t in tallies {
            self.stats.samples += t.samples;
            self.stats.seeded += t.seeded;
            self.stats.accepted += t.accepted;
            self.stats.rejected += t.rejected;
            self.stats.reinits += t.reinits;
            self.stats.out_of_order += t.out_of_order;
        }
        for (tracker, _) in work {
            self.trackers.insert(tracker.pair, tracker);
        }
    }

    /// Frozen view of the currently tracking pairs.
    pub fn graph(&self, sensors: &SensorCatalog) -> PairGraph {
        PairGraph::new(self.cfg, self.trackers.values().cloned(), sensors)
    }

    pub fn into_trackers(self) -> BTreeMap<SensorPair, PairOffsetTracker> {
        self.trackers
    }
}

/// Folds a time-ordered record stream into a pairing graph.
pub fn build_pair_graph<I>(
    records: I,
    sensors: &SensorCatalog,
    aircraft: &AircraftCatalog,
    cfg: SyncConfig,
) -> PairGraph
where
    I: IntoIterator<Item = TransmissionRecord>,
{
    let mut engine = SyncEngine::new(cfg);
    let records: Vec<_> = records.into_iter().collect();
    engine.ingest(&records, sensors, aircraft, Exec::Sequential);
    engine.graph(sensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{AircraftFix, AircraftId, Measurement};
    use crate::geo::{enu_offset, GeoPosition};

    fn origin() -> GeoPosition {
        GeoPosition::new(47.0, 8.0, 400.0)
    }

    fn catalog(offsets_km: &[(u64, f64, f64)]) -> SensorCatalog {
        SensorCatalog::new(
            offsets_km
                .iter()
                .map(|&(id, e, n)| {
                    let p = enu_offset(&origin(), e * 1e3, n * 1e3, 0.0)
                        .unwrap()
                        .to_geodetic()
                        .unwrap();
                    SensorInfo {
                        sensor_id: SensorId(id),
                        position: p,
                        good: Indicator::True,
                    }
                })
                .collect(),
        )
        .unwrap()
    }

    fn fix_at(e_km: f64, n_km: f64, up_m: f64) -> AircraftFix {
        let g = enu_offset(&origin(), e_km * 1e3, n_km * 1e3, up_m)
            .unwrap()
            .to_geodetic()
            .unwrap();
        AircraftFix {
            latitude_deg: g.latitude_deg,
            longitude_deg: g.longitude_deg,
            baro_altitude_m: None,
            geo_altitude_m: g.altitude_m,
        }
    }

    /// Record with arrival times `emit + d/c + clock_offset`.
    fn record(
        id: u64,
        sensors: &SensorCatalog,
        fix: AircraftFix,
        emit_ns: f64,
        heard: &[u64],
        clock_ns: impl Fn(u64) -> f64,
    ) -> TransmissionRecord {
        let p = fix.geodetic().to_ecef().unwrap();
        TransmissionRecord {
            record_id: RecordId(id),
            server_time_us: emit_ns / 1e3,
            aircraft_id: AircraftId(1),
            truth: Some(fix),
            baro_altitude_m: None,
            measurements: heard
                .iter()
                .map(|&s| Measurement {
                    sensor_id: SensorId(s),
                    toa_ns: emit_ns
                        + sensors.ecef(SensorId(s)).unwrap().distance(&p) / SPEED_OF_LIGHT_MPS
                            * 1e9
                        + clock_ns(s),
                    rssi_db: f64::NAN,
                })
                .collect(),
            flagged: false,
        }
    }

    #[test]
    fn equidistant_equal_times_give_zero() {
        let s = catalog(&[(1, -10.0, 0.0), (2, 10.0, 0.0)]);
        let fix = fix_at(0.0, 5.0, 9000.0);
        let p = fix.geodetic().to_ecef().unwrap();
        let d1 = s.ecef(SensorId(1)).unwrap().distance(&p);
        let d2 = s.ecef(SensorId(2)).unwrap().distance(&p);
        assert!((d1 - d2).abs() < 1e-6);
        let r = record(0, &s, fix, 1e9, &[1, 2], |_| 0.0);
        let set = offset_sample(&r, &s).unwrap();
        assert_eq!(set.samples.len(), 1);
        assert!(set.samples[0].delta_ns.abs() < 1e-5);
    }

    #[test]
    fn clock_shift_on_first_sensor_gives_negated_offset() {
        let s = catalog(&[(1, -10.0, 3.0), (2, 25.0, -8.0)]);
        let delta = 1234.5;
        let r = record(0, &s, fix_at(2.0, 2.0, 10_000.0), 5e9, &[1, 2], |k| {
            if k == 1 {
                delta
            } else {
                0.0
            }
        });
        let set = offset_sample(&r, &s).unwrap();
        assert!((set.samples[0].delta_ns + delta).abs() < 1e-6);
    }

    #[test]
    fn one_sample_per_pair_and_missing_sensors_skipped() {
        let s = catalog(&[
            (1, 0.0, 0.0),
            (2, 30.0, 0.0),
            (3, 0.0, 30.0),
            (4, 30.0, 30.0),
        ]);
        let mut r = record(
            0,
            &s,
            fix_at(10.0, 10.0, 9000.0),
            0.0,
            &[4, 2, 1, 3],
            |_| 0.0,
        );
        assert_eq!(offset_sample(&r, &s).unwrap().samples.len(), 6);
        r.measurements.push(Measurement {
            sensor_id: SensorId(99),
            toa_ns: 0.0,
            rssi_db: f64::NAN,
        });
        let set = offset_sample(&r, &s).unwrap();
        assert_eq!(set.samples.len(), 6);
        assert_eq!(set.skipped, vec![SensorId(99)]);
        assert!(set.samples.iter().all(|x| x.pair.a < x.pair.b));
        r.truth = None;
        assert_eq!(offset_sample(&r, &s), Err(SyncError::NoTruth(RecordId(0))));
    }

    #[test]
    fn sample_mean_matches_true_offset() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let s = catalog(&[(1, -20.0, 0.0), (2, 20.0, 10.0)]);
        let sigma = 50.0;
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (off1, off2) = (700.0, -300.0);
        let n = 500;
        let mut sum = 0.0;
        for k in 0..n {
            let j1 = noise.sample(&mut rng);
            let j2 = noise.sample(&mut rng);
            let fix = fix_at(-30.0 + 0.06 * k as f64, 5.0, 9000.0);
            let r = record(k, &s, fix, k as f64 * 5e8, &[1, 2], |id| {
                if id == 1 {
                    off1 + j1
                } else {
                    off2 + j2
                }
            });
            sum += offset_sample(&r, &s).unwrap().samples[0].delta_ns;
        }
        let mean = sum / n as f64;
        let truth = off2 - off1;
        assert!(
            (mean - truth).abs() < 3.0 * sigma / (n as f64).sqrt(),
            "{mean} vs {truth}"
        );
    }

    fn fig5() -> SensorCatalog {
        catalog(&[
            (1, -300.0, 100.0),
            (2, -250.0, -250.0),
            (3, 300.0, 200.0),
            (4, 250.0, -300.0),
            (5, -40.0, 0.0),
            (6, 0.0, 0.0),
            (7, 30.0, 25.0),
            (8, 30.0, -25.0),
        ])
    }

    #[test]
    fn fig5_edges() {
        let s = fig5();
        let mut recs = Vec::new();
        for k in 0..40u64 {
            let t = k as f64 * 5e8;
            recs.push(record(
                2 * k,
                &s,
                fix_at(25.0, 0.0, 10_000.0),
                t,
                &[6, 7, 8],
                |_| 0.0,
            ));
            recs.push(record(
                2 * k + 1,
                &s,
                fix_at(-25.0, 5.0, 10_000.0),
                t + 1e6,
                &[5, 6],
                |_| 0.0,
            ));
        }
        let g = build_pair_graph(recs, &s, &AircraftCatalog::default(), SyncConfig::default());
        let edges: Vec<(u64, u64)> = g.edges().map(|p| (p.a.0, p.b.0)).collect();
        assert_eq!(edges, vec![(5, 6), (6, 7), (6, 8), (7, 8)]);
        assert!(!g.contains(SensorId(1), SensorId(2)));
        assert!(!g.contains(SensorId(5), SensorId(7)));
    }

    #[test]
    fn false_quality_aircraft_excluded() {
        let s = fig5();
        let recs: Vec<_> = (0..5)
            .map(|k| {
                record(
                    k,
                    &s,
                    fix_at(25.0, 0.0, 10_000.0),
                    k as f64 * 1e9,
                    &[6, 7],
                    |_| 0.0,
                )
            })
            .collect();
        let bad = AircraftCatalog::new(vec![crate::dataset::AircraftInfo {
            aircraft_id: AircraftId(1),
            position_quality: Indicator::False,
        }])
        .unwrap();
        assert!(build_pair_graph(recs.clone(), &s, &bad, SyncConfig::default()).is_empty());
        let unknown = AircraftCatalog::default();
        assert_eq!(
            build_pair_graph(recs.clone(), &s, &unknown, SyncConfig::default()).len(),
            1
        );
        let strict = SyncConfig {
            verified_only: true,
            ..SyncConfig::default()
        };
        assert!(build_pair_graph(recs, &s, &unknown, strict).is_empty());
    }

    fn world(corrupt: Option<u64>) -> SyncEngine {
        let s = catalog(&[
            (1, 0.0, 0.0),
            (2, 40.0, 0.0),
            (3, 0.0, 40.0),
            (4, 40.0, 40.0),
        ]);
        let recs: Vec<_> = (0..300u64)
            .map(|k| {
                let fix = fix_at(5.0 + 0.05 * k as f64, 15.0, 9000.0);
                let mut r = record(k, &s, fix, k as f64 * 5e8, &[1, 2, 3, 4], |id| {
                    id as f64 * 100.0 + 0.5 * k as f64
                });
                if let Some(bad) = corrupt {
                    for m in r.measurements.iter_mut().filter(|m| m.sensor_id.0 == bad) {
                        m.toa_ns += ((k * 7919) % 1000) as f64 * 1e3;
                    }
                }
                r
            })
            .collect();
        let mut e = SyncEngine::new(SyncConfig::default());
        for chunk in recs.chunks(64) {
            e.ingest(chunk, &s, &AircraftCatalog::default(), Exec::Parallel);
        }
        e
    }

    #[test]
    fn corrupted_sensor_leaves_other_pairs_untouched() {
        let clean = world(None);
        let dirty = world(Some(3));
        for t in clean.trackers() {
            if !t.pair.contains(SensorId(3)) {
                assert_eq!(Some(t), dirty.tracker(t.pair));
            }
        }
        assert!(clean.stats().rejected == 0);
    }

    #[test]
    fn exact_world_cycle_consistency() {
        let e = world(None);
        let s = catalog(&[
            (1, 0.0, 0.0),
            (2, 40.0, 0.0),
            (3, 0.0, 40.0),
            (4, 40.0, 40.0),
        ]);
        let g = e.graph(&s);
        let t = g
            .tracker(SensorPair::new(SensorId(1), SensorId(2)).unwrap().0)
            .unwrap()
            .last_update_ns;
        let o = |i: u64, j: u64| g.predict(SensorId(i), SensorId(j), t).unwrap().0;
        assert!((o(1, 2) + o(2, 3) - o(1, 3)).abs() < 1.0);
        assert!((o(1, 2) - 100.0).abs() < 1.0);
    }

    #[test]
    fn parallel_and_sequential_ingest_agree() {
        let s = fig5();
        let recs: Vec<_> = (0..200u64)
            .map(|k| {
                record(
                    k,
                    &s,
                    fix_at(20.0, (k % 7) as f64, 10_000.0),
                    k as f64 * 2.5e8,
                    &[5, 6, 7, 8],
                    |id| id as f64,
                )
            })
            .collect();
        let mut a = SyncEngine::new(SyncConfig::default());
        let mut b = SyncEngine::new(SyncConfig::default());
        a.ingest(&recs, &s, &AircraftCatalog::default(), Exec::Sequential);
        b.ingest(&recs, &s, &AircraftCatalog::default(), Exec::Parallel);
        assert_eq!(a.into_trackers(), b.into_trackers());
    }
}
