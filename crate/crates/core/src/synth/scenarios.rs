//! Named scenarios with fixed seeds, all laid out in a local east/north
//! frame around 47°N 8°E.

use super::{ClockModel, Scenario, SynthError, SynthSensor, Trajectory, Waypoint};
use crate::dataset::{AircraftId, Indicator, SensorId, SensorInfo};
use crate::geo::{enu_offset, GeoPosition};

pub const SCENARIO_NAMES: [&str; 5] = [
    "exact-tetra",
    "noisy-grid",
    "outlier-storm",
    "collinear",
    "fig5",
];

/// Sampling periods of the two receiver classes: about 60 MHz and 2.4 MHz.
const FAST_RESOLUTION_NS: f64 = 1e9 / 60e6;
const SLOW_RESOLUTION_NS: f64 = 1e9 / 2.4e6;

const START_S: f64 = 1.0;

fn origin() -> GeoPosition {
    GeoPosition::new(47.0, 8.0, 0.0)
}

/// Point `east_km`/`north_km` from the origin on the ellipsoid, lifted to
/// `altitude_m`.
fn at(east_km: f64, north_km: f64, altitude_m: f64) -> GeoPosition {
    let g = enu_offset(&origin(), east_km * 1e3, north_km * 1e3, 0.0)
        .and_then(|e| e.to_geodetic())
        .expect("local frame point is finite");
    GeoPosition::new(g.latitude_deg, g.longitude_deg, altitude_m)
}

fn sensor(id: u64, position: GeoPosition, good: bool, clock: ClockModel) -> SynthSensor {
    SynthSensor {
        info: SensorInfo {
            sensor_id: SensorId(id),
            position,
            good: if good {
                Indicator::True
            } else {
                Indicator::False
            },
        },
        clock,
    }
}

fn straight(id: u64, from: GeoPosition, to: GeoPosition, t0: f64, t1: f64) -> Trajectory {
    Trajectory {
        aircraft_id: AircraftId(id),
        waypoints: vec![
            Waypoint {
                t_s: t0,
                position: from,
            },
            Waypoint {
                t_s: t1,
                position: to,
            },
        ],
        emission_hz: 2.0,
        broadcasts_position: true,
        quality: Indicator::True,
    }
}

/// Distinct, deterministic clock parameters for sensor `i`.
fn offset_ns(i: u64) -> f64 {
    ((i * 7919 + 13) % 1000) as f64 * 10.0 - 5000.0
}

fn drift_ns_per_s(i: u64) -> f64 {
    ((i * 31 + 5) % 21) as f64 * 0.2 - 2.0
}

/// Aircraft crossing the area on eight headings at up to 220 m/s, staggered
/// in altitude, for `secs` seconds.
fn crossing_traffic(count: u64, half_span_km: f64, secs: f64) -> Vec<Trajectory> {
    (0..count)
        .map(|k| {
            let heading = std::f64::consts::PI * k as f64 / 4.0 + 0.3;
            let (s, c) = heading.sin_cos();
            let half = (0.5 * 0.22 * secs).min(half_span_km);
            let lateral = (k as f64 - (count as f64 - 1.0) / 2.0) * 4.0;
            let (pe, pn) = (-c * lateral, s * lateral);
            let alt = 8_000.0 + 400.0 * k as f64;
            straight(
                100 + k,
                at(pe - s * half, pn - c * half, alt),
                at(pe + s * half, pn + c * half, alt),
                START_S,
                START_S + secs,
            )
        })
        .collect()
}

/// Four noise-free receivers at different heights, four aircraft, five
/// minutes.
fn exact_tetra() -> Scenario {
    let spots = [
        (0.0, 60.0, 400.0),
        (-52.0, -30.0, 1_200.0),
        (52.0, -30.0, 300.0),
        (5.0, 0.0, 2_500.0),
    ];
    Scenario {
        name: "exact-tetra".into(),
        sensors: spots
            .iter()
            .zip(1u64..)
            .map(|(&(e, n, h), i)| {
                sensor(
                    i,
                    at(e, n, h),
                    true,
                    ClockModel::exact(offset_ns(i), drift_ns_per_s(i)),
                )
            })
            .collect(),
        trajectories: crossing_traffic(4, 33.0, 300.0),
        rng_seed: 0x7e75_a001,
        range_m: 400e3,
    }
}

/// Overrides for [`noisy_grid`]; `None` keeps the per-class default.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NoisyGridOptions {
    pub jitter_sigma_ns: Option<f64>,
    pub resolution_ns: Option<f64>,
    pub seed: Option<u64>,
}

impl NoisyGridOptions {
    /// Every clock exact apart from offset and drift.
    pub fn zero_noise() -> Self {
        Self {
            jitter_sigma_ns: Some(0.0),
            resolution_ns: Some(1e-6),
            seed: None,
        }
    }

    /// Uniform jitter on a fine sampling grid.
    pub fn jitter(sigma_ns: f64) -> Self {
        Self {
            jitter_sigma_ns: Some(sigma_ns),
            resolution_ns: Some(1e-3),
            seed: None,
        }
    }
}

/// Twelve receivers on a 4×3 grid 40 km apart, alternating fast accurate
/// clocks with slow noisy ones, eight aircraft for five minutes.
pub fn noisy_grid(opts: NoisyGridOptions) -> Scenario {
    let mut sensors = Vec::new();
    for row in 0..3u64 {
        for col in 0..4u64 {
            let i = row * 4 + col + 1;
            let fast = (row + col) % 2 == 0;
            let (sigma, res) = if fast {
                (50.0, FAST_RESOLUTION_NS)
            } else {
                (200.0, SLOW_RESOLUTION_NS)
            };
            let clock = ClockModel {
                offset0_ns: offset_ns(i),
                drift_ns_per_s: drift_ns_per_s(i),
                jitter_sigma_ns: opts.jitter_sigma_ns.unwrap_or(sigma),
                resolution_ns: opts.resolution_ns.unwrap_or(res),
                outlier_rate: 0.0,
                outlier_magnitude_ns: 0.0,
            };
            let e = -60.0 + 40.0 * col as f64;
            let n = -40.0 + 40.0 * row as f64;
            let h = 200.0 + ((i * 137) % 900) as f64;
            sensors.push(sensor(i, at(e, n, h), fast, clock));
        }
    }
    Scenario {
        name: "noisy-grid".into(),
        sensors,
        trajectories: crossing_traffic(8, 33.0, 300.0),
        rng_seed: opts.seed.unwrap_or(0x6e01_5e00),
        range_m: 400e3,
    }
}

/// Six receivers with 50 ns jitter where one timestamp in twenty is off by
/// ±100 µs.
fn outlier_storm() -> Scenario {
    let sensors = (0..6u64)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / 6.0;
            let clock = ClockModel {
                offset0_ns: offset_ns(k + 1),
                drift_ns_per_s: drift_ns_per_s(k + 1),
                jitter_sigma_ns: 50.0,
                resolution_ns: 1e-3,
                outlier_rate: 0.05,
                outlier_magnitude_ns: 100e3,
            };
            sensor(
                k + 1,
                at(45.0 * a.cos(), 45.0 * a.sin(), 300.0 + 100.0 * k as f64),
                true,
                clock,
            )
        })
        .collect();
    Scenario {
        name: "outlier-storm".into(),
        sensors,
        trajectories: crossing_traffic(2, 33.0, 300.0),
        rng_seed: 0x0071_1e55,
        range_m: 400e3,
    }
}

/// Four receivers on one straight line through space. Every target is
/// symmetric about that line, so no record has full rank.
fn collinear() -> Scenario {
    let a = at(-45.0, -10.0, 300.0)
        .to_ecef()
        .expect("finite")
        .to_vector();
    let b = at(45.0, 10.0, 300.0).to_ecef().expect("finite").to_vector();
    let sensors = [0.0, 0.3, 0.55, 1.0]
        .iter()
        .zip(1u64..)
        .map(|(&f, i)| {
            let p = crate::geo::EcefPosition::from_vector(&(a + (b - a) * f));
            sensor(
                i,
                p.to_geodetic().expect("finite"),
                true,
                ClockModel::exact(offset_ns(i), drift_ns_per_s(i)),
            )
        })
        .collect();
    Scenario {
        name: "collinear".into(),
        sensors,
        trajectories: crossing_traffic(2, 33.0, 120.0),
        rng_seed: 0xc011_14ea,
        range_m: 400e3,
    }
}

/// Eight receivers where only S5..S8 share airspace. An aircraft near P3 is
/// heard by S6, S7 and S8; one near P2 by S5 and S6; the unbroadcast target
/// P1 by all four. S1..S4 lie 300 km east and hear none of them.
fn fig5() -> Scenario {
    let spots = [
        (300.0, 20.0),
        (320.0, 0.0),
        (300.0, -20.0),
        (280.0, 0.0),
        (-40.0, 0.0),
        (0.0, 0.0),
        (30.0, 25.0),
        (30.0, -25.0),
    ];
    let sensors = spots
        .iter()
        .zip(1u64..)
        .map(|(&(e, n), i)| {
            let h = 300.0 + 150.0 * i as f64;
            sensor(
                i,
                at(e, n, h),
                true,
                ClockModel::exact(offset_ns(i), drift_ns_per_s(i)),
            )
        })
        .collect();
    let alt = 10_000.0;
    let p2 = straight(
        2,
        at(-27.0, 3.0, alt),
        at(-23.0, 7.0, alt),
        START_S,
        START_S + 120.0,
    );
    let p3 = straight(
        3,
        at(23.0, -3.0, alt),
        at(27.0, 3.0, alt),
        START_S,
        START_S + 120.0,
    );
    let mut p1 = straight(
        1,
        at(-3.0, 0.0, alt),
        at(3.0, 0.0, alt),
        START_S + 60.0,
        START_S + 120.0,
    );
    p1.broadcasts_position = false;
    Scenario {
        name: "fig5".into(),
        sensors,
        trajectories: vec![p1, p2, p3],
        rng_seed: 0xf195,
        range_m: 50e3,
    }
}

pub fn reference_scenarios() -> Vec<Scenario> {
    vec![
        exact_tetra(),
        noisy_grid(NoisyGridOptions::default()),
        outlier_storm(),
        collinear(),
        fig5(),
    ]
}

pub fn reference_scenario(name: &str) -> Result<Scenario, SynthError> {
    match name {
        "exact-tetra" => Ok(exact_tetra()),
        "noisy-grid" => Ok(noisy_grid(NoisyGridOptions::default())),
        "outlier-storm" => Ok(outlier_storm()),
        "collinear" => Ok(collinear()),
        "fig5" => Ok(fig5()),
        other => Err(SynthError::UnknownScenario(other.to_string())),
    }
}
