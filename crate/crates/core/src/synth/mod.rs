//! Synthetic worlds with exact ground truth.
//!
//! Aircraft fly piecewise-linear paths and transmit at a fixed rate. Each
//! sensor timestamps arrivals with its own clock: a constant offset, a linear
//! drift, Gaussian jitter, rare gross outliers, and truncation to the
//! sampling grid. Transmitter clock error would cancel in every time
//! difference, so emission times are exact.

mod files;
mod scenarios;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    AircraftFix, AircraftId, AircraftInfo, DatasetError, Indicator, Measurement, RecordId,
    SensorId, SensorInfo, TransmissionRecord,
};
use crate::exec::Exec;
use crate::geo::{EcefPosition, GeoError, GeoPosition, SPEED_OF_LIGHT_MPS};

pub use files::{write_world, WorldFiles};
pub use files::{CLOCK_LOG_COLUMNS, TRUTH_LOG_COLUMNS};
pub use scenarios::{
    noisy_grid, reference_scenario, reference_scenarios, NoisyGridOptions, SCENARIO_NAMES,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockModel {
    pub offset0_ns: f64,
    pub drift_ns_per_s: f64,
    pub jitter_sigma_ns: f64,
    /// Sampling period; timestamps are floored to multiples of it.
    pub resolution_ns: f64,
    pub outlier_rate: f64,
    pub outlier_magnitude_ns: f64,
}

impl ClockModel {
    /// Noise-free clock with the given offset and drift.
    pub fn exact(offset0_ns: f64, drift_ns_per_s: f64) -> Self {
        Self {
            offset0_ns,
            drift_ns_per_s,
            jitter_sigma_ns: 0.0,
            resolution_ns: 1e-6,
            outlier_rate: 0.0,
            outlier_magnitude_ns: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let ok = self.jitter_sigma_ns >= 0.0
            && self.resolution_ns > 0.0
            && (0.0..1.0).contains(&self.outlier_rate)
            && [
                self.offset0_ns,
                self.drift_ns_per_s,
                self.outlier_magnitude_ns,
            ]
            .iter()
            .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(SynthError::Invalid(format!("bad clock model {self:?}")))
        }
    }

    /// Deterministic clock error at true time `t_s`, ns.
    pub fn error_ns(&self, t_s: f64) -> f64 {
        self.offset0_ns + self.drift_ns_per_s * t_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSensor {
    pub info: SensorInfo,
    pub clock: ClockModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t_s: f64,
    pub position: GeoPosition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub aircraft_id: AircraftId,
    /// Straight ECEF segments between consecutive waypoints.
    pub waypoints: Vec<Waypoint>,
    pub emission_hz: f64,
    /// Whether transmissions carry the aircraft's own position.
    pub broadcasts_position: bool,
    pub quality: Indicator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub sensors: Vec<SynthSensor>,
    pub trajectories: Vec<Trajectory>,
    pub rng_seed: u64,
    /// Maximum sensor-to-aircraft distance for a reception, m.
    pub range_m: f64,
}

/// Exact position of one transmission.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub record_id: RecordId,
    pub aircraft_id: AircraftId,
    pub emission_ns: f64,
    pub position: GeoPosition,
    pub ecef: EcefPosition,
}

/// Decomposition of one timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockRow {
    pub record_id: RecordId,
    pub sensor_id: SensorId,
    pub true_arrival_ns: f64,
    /// Offset plus drift at the arrival time.
    pub clock_error_ns: f64,
    pub jitter_ns: f64,
    /// Zero for clean receptions.
    pub outlier_ns: f64,
    pub toa_ns: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub sensors: Vec<SensorInfo>,
    pub aircraft: Vec<AircraftInfo>,
    pub records: Vec<TransmissionRecord>,
    pub truth_log: Vec<TruthRow>,
    pub clock_log: Vec<ClockRow>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SynthError> {
        for s in &self.sensors {
            s.clock.validate()?;
            s.info.position.validate()?;
        }
        let mut ids: Vec<_> = self.sensors.iter().map(|s| s.info.sensor_id).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(SynthError::Invalid("duplicate sensor id".into()));
        }
        for t in &self.trajectories {
            if t.waypoints.is_empty() || !(t.emission_hz > 0.0) {
                return Err(SynthError::Invalid(format!(
                    "aircraft {}: empty path or rate",
                    t.aircraft_id
                )));
            }
            if t.waypoints.windows(2).any(|w| !(w[1].t_s > w[0].t_s)) {
                return Err(SynthError::Invalid(format!(
                    "aircraft {}: waypoint times not increasing",
                    t.aircraft_id
                )));
            }
            for w in &t.waypoints {
                w.position.validate()?;
            }
        }
        if !(self.range_m > 0.0) {
            return Err(SynthError::Invalid("range must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, SynthError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }
}

/// A record before ids are assigned.
struct Emission {
    t_ns: f64,
    aircraft_index: usize,
    record: TransmissionRecord,
    truth: TruthRow,
    clocks: Vec<ClockRow>,
}

fn position_at(path: &[(f64, Vector3<f64>)], t: f64) -> Vector3<f64> {
    let k = path.partition_point(|w| w.0 <= t);
    if k == 0 {
        return path[0].1;
    }
    if k == path.len() {
        return path[k - 1].1;
    }
    let (t0, p0) = path[k - 1];
    let (t1, p1) = path[k];
    p0 + (p1 - p0) * ((t - t0) / (t1 - t0))
}

fn fly(
    scenario: &Scenario,
    sensors: &[(SynthSensor, EcefPosition)],
    index: usize,
) -> Result<Vec<Emission>, SynthError> {
    let traj = &scenario.trajectories[index];
    let mut rng =
        ChaCha8Rng::seed_from_u64(splitmix64(scenario.rng_seed ^ splitmix64(index as u64)));
    let path: Vec<(f64, Vector3<f64>)> = traj
        .waypoints
        .iter()
        .map(|w| Ok((w.t_s, w.position.to_ecef()?.to_vector())))
        .collect::<Result<_, GeoError>>()?;
    let t_start = path[0].0;
    let t_end = path[path.len() - 1].0;
    let period = 1.0 / traj.emission_hz;
    let mut out = Vec::new();
    let mut k = 0u64;
    loop {
        let t = t_start + k as f64 * period;
        if t > t_end + 1e-9 {
            break;
        }
        k += 1;
        let p = EcefPosition::from_vector(&position_at(&path, t));
        let geo = p.to_geodetic()?;
        let mut measurements = Vec::new();
        let mut clocks = Vec::new();
        for (s, pos) in sensors {
            // Draws happen for every sensor so the stream does not depend on
            // range or outlier settings.
            let z: f64 = StandardNormal.sample(&mut rng);
            let u: f64 = rng.random();
            let negative: bool = rng.random();
            let d = pos.distance(&p);
            if d > scenario.range_m {
                continue;
            }
            let c = &s.clock;
            let arrival_s = t + d / SPEED_OF_LIGHT_MPS;
            let clock_error_ns = c.error_ns(arrival_s);
            let jitter_ns = c.jitter_sigma_ns * z;
            let outlier_ns = if u < c.outlier_rate {
                if negative {
                    -c.outlier_magnitude_ns
                } else {
                    c.outlier_magnitude_ns
                }
            } else {
                0.0
            };
            let raw = arrival_s * 1e9 + clock_error_ns + jitter_ns + outlier_ns;
            let toa_ns = (raw / c.resolution_ns).floor() * c.resolution_ns;
            measurements.push(Measurement {
                sensor_id: s.info.sensor_id,
                toa_ns,
                rssi_db: -20.0 * (d / 1_000.0).log10() - 40.0,
            });
            clocks.push(ClockRow {
                record_id: RecordId(0),
                sensor_id: s.info.sensor_id,
                true_arrival_ns: arrival_s * 1e9,
                clock_error_ns,
                jitter_ns,
                outlier_ns,
                toa_ns,
            });
        }
        if measurements.len() < 2 {
            continue;
        }
        let baro = geo.altitude_m - 40.0;
        let truth = traj.broadcasts_position.then_some(AircraftFix {
            latitude_deg: geo.latitude_deg,
            longitude_deg: geo.longitude_deg,
            baro_altitude_m: Some(baro),
            geo_altitude_m: geo.altitude_m,
        });
        let mut record = TransmissionRecord {
            record_id: RecordId(0),
            server_time_us: t * 1e6,
            aircraft_id: traj.aircraft_id,
            truth,
            baro_altitude_m: Some(baro),
            measurements,
            flagged: false,
        };
        record.refresh_flags();
        out.push(Emission {
            t_ns: t * 1e9,
            aircraft_index: index,
            record,
            truth: TruthRow {
                record_id: RecordId(0),
                aircraft_id: traj.aircraft_id,
                emission_ns: t * 1e9,
                position: geo,
                ecef: p,
            },
            clocks,
        });
    }
    Ok(out)
}

/// Generates every transmission of the scenario.
///
/// Aircraft are simulated independently, each from its own seeded stream,
/// then merged by emission time. Record ids follow that order; measurements
/// within a record are sorted by sensor id.
pub fn generate(scenario: &Scenario, exec: Exec) -> Result<World, SynthError> {
    scenario.validate()?;
    let mut sensors: Vec<(SynthSensor, EcefPosition)> = scenario
        .sensors
        .iter()
        .map(|s| Ok((*s, s.info.position.to_ecef()?)))
        .collect::<Result<_, GeoError>>()?;
    sensors.sort_by_key(|s| s.0.info.sensor_id);
    let per_aircraft = exec.map_range(scenario.trajectories.len(), |i| fly(scenario, &sensors, i));
    let mut all = Vec::new();
    for r in per_aircraft {
        all.extend(r?);
    }
    all.sort_by(|a, b| {
        a.t_ns
            .total_cmp(&b.t_ns)
            .then(a.aircraft_index.cmp(&b.aircraft_index))
    });

    let mut world = World {
        sensors: sensors.iter().map(|s| s.0.info).collect(),
        aircraft: scenario
            .trajectories
            .iter()
            .map(|t| AircraftInfo {
                aircraft_id: t.aircraft_id,
                position_quality: t.quality,
            })
            .collect(),
        records: Vec::with_capacity(all.len()),
        truth_log: Vec::with_capacity(all.len()),
        clock_log: Vec::new(),
    };
    world.aircraft.sort_by_key(|a| a.aircraft_id);
    world.aircraft.dedup_by_key(|a| a.aircraft_id);
    for (k, mut e) in all.into_iter().enumerate() {
        let id = RecordId(k as u64);
        e.record.record_id = id;
        e.truth.record_id = id;
        world.records.push(e.record);
        world.truth_log.push(e.truth);
        world.clock_log.extend(
            e.clocks
                .into_iter()
                .map(|c| ClockRow { record_id: id, ..c }),
        );
    }
    Ok(world)
}

impl World {
    /// True `Δt_{a,b}` at the given true time: `err_b - err_a`.
    pub fn true_pair_offset_ns(
        scenario: &Scenario,
        a: SensorId,
        b: SensorId,
        t_s: f64,
    ) -> Option<f64> {
        let clock = |id| {
            scenario
                .sensors
                .iter()
                .find(|s| s.info.sensor_id == id)
                .map(|s| s.clock)
        };
        Some(clock(b)?.error_ns(t_s) - clock(a)?.error_ns(t_s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::enu_offset;

    fn origin() -> GeoPosition {
        GeoPosition::new(47.0, 8.0, 0.0)
    }

    fn geo(e: f64, n: f64, u: f64) -> GeoPosition {
        enu_offset(&origin(), e, n, u)
            .unwrap()
            .to_geodetic()
            .unwrap()
    }

    fn sensor(id: u64, p: GeoPosition, clock: ClockModel) -> SynthSensor {
        SynthSensor {
            info: SensorInfo {
                sensor_id: SensorId(id),
                position: p,
                good: Indicator::True,
            },
            clock,
        }
    }

    fn one_aircraft(
        sensors: Vec<SynthSensor>,
        from: GeoPosition,
        to: GeoPosition,
        secs: f64,
    ) -> Scenario {
        Scenario {
            name: "test".into(),
            sensors,
            trajectories: vec![Trajectory {
                aircraft_id: AircraftId(1),
                waypoints: vec![
                    Waypoint {
                        t_s: 0.0,
                        position: from,
                    },
                    Waypoint {
                        t_s: secs,
                        position: to,
                    },
                ],
                emission_hz: 2.0,
                broadcasts_position: true,
                quality: Indicator::True,
            }],
            rng_seed: 1,
            range_m: 500e3,
        }
    }

    #[test]
    fn equidistant_identity_clocks_tie() {
        let s = vec![
            sensor(1, geo(-20e3, 0.0, 0.0), ClockModel::exact(0.0, 0.0)),
            sensor(2, geo(20e3, 0.0, 0.0), ClockModel::exact(0.0, 0.0)),
        ];
        let p = geo(0.0, 10e3, 9e3);
        let w = generate(&one_aircraft(s, p, p, 1.0), Exec::Sequential).unwrap();
        for r in &w.records {
            assert!((r.measurements[0].toa_ns - r.measurements[1].toa_ns).abs() < 1e-3);
        }
    }

    #[test]
    fn drift_accumulates_linearly() {
        let s = vec![
            sensor(1, geo(0.0, 0.0, 0.0), ClockModel::exact(0.0, 10.0)),
            sensor(2, geo(5e3, 0.0, 0.0), ClockModel::exact(0.0, 0.0)),
        ];
        let p = geo(0.0, 0.0, 9e3);
        let w = generate(&one_aircraft(s, p, p, 600.0), Exec::Sequential).unwrap();
        let last = w
            .clock_log
            .iter()
            .rev()
            .find(|c| c.sensor_id == SensorId(1))
            .unwrap();
        let t = last.true_arrival_ns * 1e-9;
        assert!((t - 600.0).abs() < 1e-3);
        assert!((last.clock_error_ns - 10.0 * t).abs() < 1e-9);
        assert!((last.toa_ns - (last.true_arrival_ns + last.clock_error_ns)).abs() < 1e-3);
    }

    #[test]
    fn jitter_moment_matches() {
        let sigma = 80.0;
        let clock = ClockModel {
            jitter_sigma_ns: sigma,
            ..ClockModel::exact(500.0, 3.0)
        };
        let s = vec![
            sensor(1, geo(0.0, 0.0, 0.0), clock),
            sensor(2, geo(9e3, 0.0, 0.0), clock),
        ];
        let w = generate(
            &one_aircraft(s, geo(-5e4, 0.0, 9e3), geo(5e4, 0.0, 9e3), 25_000.0),
            Exec::Parallel,
        )
        .unwrap();
        let devs: Vec<f64> = w
            .clock_log
            .iter()
            .map(|c| c.toa_ns - c.true_arrival_ns - c.clock_error_ns)
            .collect();
        assert!(devs.len() >= 100_000);
        let n = devs.len() as f64;
        let mean = devs.iter().sum::<f64>() / n;
        let sd = (devs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd - sigma).abs() < 0.05 * sigma, "{sd}");
    }

    #[test]
    fn seeds_are_reproducible_and_outliers_share_draws() {
        let clock = ClockModel {
            jitter_sigma_ns: 50.0,
            ..ClockModel::exact(0.0, 0.0)
        };
        let dirty = ClockModel {
            outlier_rate: 0.3,
            outlier_magnitude_ns: 1e5,
            ..clock
        };
        let build = |c: ClockModel| {
            let s = vec![
                sensor(1, geo(0.0, 0.0, 0.0), c),
                sensor(2, geo(9e3, 0.0, 0.0), c),
            ];
            one_aircraft(s, geo(0.0, 0.0, 9e3), geo(9e3, 0.0, 9e3), 100.0)
        };
        let a = generate(&build(clock), Exec::Sequential).unwrap();
        let b = generate(&build(clock), Exec::Parallel).unwrap();
        assert_eq!(a, b);
        let d = generate(&build(dirty), Exec::Sequential).unwrap();
        let mut n_out = 0;
        for (x, y) in a.clock_log.iter().zip(&d.clock_log) {
            assert_eq!(x.jitter_ns, y.jitter_ns);
            if y.outlier_ns != 0.0 {
                n_out += 1;
                assert_eq!(y.outlier_ns.abs(), 1e5);
            }
        }
        assert!(n_out > 20);
    }

    #[test]
    fn out_of_range_receptions_dropped() {
        let mut sc = one_aircraft(
            vec![
                sensor(1, geo(0.0, 0.0, 0.0), ClockModel::exact(0.0, 0.0)),
                sensor(2, geo(10e3, 0.0, 0.0), ClockModel::exact(0.0, 0.0)),
                sensor(3, geo(300e3, 0.0, 0.0), ClockModel::exact(0.0, 0.0)),
            ],
            geo(0.0, 0.0, 9e3),
            geo(1e3, 0.0, 9e3),
            5.0,
        );
        sc.range_m = 50e3;
        let w = generate(&sc, Exec::Sequential).unwrap();
        assert!(w.records.iter().all(|r| r.measurements.len() == 2));
        sc.range_m = 5e3;
        assert!(generate(&sc, Exec::Sequential).unwrap().records.is_empty());
    }

    #[test]
    fn invalid_scenarios_rejected() {
        let mut sc = one_aircraft(vec![], geo(0.0, 0.0, 0.0), geo(1.0, 0.0, 0.0), 1.0);
        sc.trajectories[0].waypoints[1].t_s = 0.0;
        assert!(matches!(
            generate(&sc, Exec::Sequential),
            Err(SynthError::Invalid(_))
        ));
        let bad = ClockModel {
            resolution_ns: 0.0,
            ..ClockModel::exact(0.0, 0.0)
        };
        assert!(bad.validate().is_err());
    }
}
