//! Hyperbolic positioning from synchronised sensor pairs.
//!
//! Each tracked pair in view gives one time-difference equation; the
//! position is the weighted least-squares intersection of the hyperboloids.

mod output;
mod solve;
mod stream;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{SensorCatalog, SensorId, TransmissionRecord};
use crate::geo::{EcefPosition, GeoPosition, SPEED_OF_LIGHT_MPS};
use crate::sync::{PairGraph, SensorPair};

pub use output::{read_predictions, write_predictions, PredictionRow, PREDICTION_COLUMNS};
pub use solve::{solve_position, solve_position_traced};
pub use stream::{localize_stream, Localizer, RecordOutcome, TrackState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LocateError {
    #[error("position coincides with sensor {0}")]
    Singular(SensorId),
    #[error("no receiving sensor has a known position")]
    NoGuess,
}

/// One linearisable time-difference equation between sensors `i < j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairEquation {
    pub pair: SensorPair,
    /// `t_i - t_j` as timestamped, seconds.
    pub tdoa_measured_s: f64,
    /// Predicted pair offset `Δt_{i,j}`, seconds.
    pub offset_s: f64,
    pub offset_variance_s2: f64,
    /// Timestamp noise variances of the two sensors, s².
    pub toa_variance_i_s2: f64,
    pub toa_variance_j_s2: f64,
    pub s_i: EcefPosition,
    pub s_j: EcefPosition,
}

impl PairEquation {
    /// Range difference `d_i - d_j` implied by the measurement, metres.
    pub fn range_difference_m(&self) -> f64 {
        (self.tdoa_measured_s + self.offset_s) * SPEED_OF_LIGHT_MPS
    }

    pub fn is_feasible(&self, slack_s: f64) -> bool {
        let limit = self.s_i.distance(&self.s_j) / SPEED_OF_LIGHT_MPS + slack_s;
        (self.tdoa_measured_s + self.offset_s).abs() <= limit
    }
}

/// `(‖s_i − p‖ − ‖s_j − p‖)/c − Δt_{i,j} − (t_i − t_j)`, seconds.
pub fn residual(eq: &PairEquation, p: &EcefPosition) -> f64 {
    (eq.s_i.distance(p) - eq.s_j.distance(p)) / SPEED_OF_LIGHT_MPS
        - eq.offset_s
        - eq.tdoa_measured_s
}

/// Gradient of [`residual`] with respect to `p`, s/m.
pub fn jacobian_row(eq: &PairEquation, p: &EcefPosition) -> Result<Vector3<f64>, LocateError> {
    let pv = p.to_vector();
    let di = pv - eq.s_i.to_vector();
    let dj = pv - eq.s_j.to_vector();
    let (ni, nj) = (di.norm(), dj.norm());
    if ni == 0.0 {
        return Err(LocateError::Singular(eq.pair.a));
    }
    if nj == 0.0 {
        return Err(LocateError::Singular(eq.pair.b));
    }
    Ok((di / ni - dj / nj) / SPEED_OF_LIGHT_MPS)
}

/// How equation errors are combined into weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Weighting {
    /// Each equation independent, weight `1/(offset var + toa var_i + toa var_j)`.
    Diagonal,
    /// Full covariance: equations sharing a sensor share its timestamp noise.
    #[default]
    Correlated,
}

impl Weighting {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "diagonal" => Some(Weighting::Diagonal),
            "correlated" => Some(Weighting::Correlated),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Weighting::Diagonal => "diagonal",
            Weighting::Correlated => "correlated",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocateConfig {
    pub max_iter: u32,
    pub step_tolerance_m: f64,
    pub residual_ceiling_s: f64,
    pub feasibility_slack_s: f64,
    /// Singular values below this fraction of the largest count as zero.
    pub rank_threshold: f64,
    pub min_equations: usize,
    /// Freshness of a previous estimate used as the starting point, seconds.
    pub max_guess_age_s: f64,
    pub weighting: Weighting,
    /// Retry from a raised starting point when the first solve fails.
    pub mirror_retry: bool,
    pub retry_altitude_m: f64,
    /// Altitude of a cold starting point when no barometric reading exists.
    pub guess_altitude_m: f64,
    /// A converged altitude further than this from the barometric reading
    /// triggers a second solve started at the barometric altitude; the
    /// closer of the two is kept. Infinite disables the check.
    pub baro_mirror_tolerance_m: f64,
    pub baro_constraint: bool,
    /// Added to barometric altitude to approximate geometric altitude.
    pub baro_offset_m: f64,
    pub baro_sigma_m: f64,
    pub vdop_threshold: f64,
}

impl Default for LocateConfig {
    fn default() -> Self {
        Self {
            max_iter: 50,
            step_tolerance_m: 0.1,
            residual_ceiling_s: 5e-6,
            feasibility_slack_s: 5e-6,
            rank_threshold: 1e-10,
            min_equations: 3,
            max_guess_age_s: 10.0,
            weighting: Weighting::Correlated,
            mirror_retry: true,
            retry_altitude_m: 9_000.0,
            guess_altitude_m: 9_000.0,
            baro_mirror_tolerance_m: 1_500.0,
            baro_constraint: false,
            baro_offset_m: 0.0,
            baro_sigma_m: 50.0,
            vdop_threshold: 50.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    Diverged,
    Underdetermined,
    Infeasible,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Converged => "converged",
            SolveStatus::Diverged => "diverged",
            SolveStatus::Underdetermined => "underdetermined",
            SolveStatus::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult {
    pub position: EcefPosition,
    pub geodetic: Option<GeoPosition>,
    pub iterations: u32,
    pub final_residual_rms_s: f64,
    pub n_equations_used: usize,
    pub rank: usize,
    /// Position covariance implied by the weights, m². NaN when rank < 3.
    pub covariance_m2: [[f64; 3]; 3],
    pub status: SolveStatus,
}

/// Why a record produced no position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NoPrediction {
    TooFewEquations,
    NoGuess,
    Underdetermined,
    Diverged,
    Infeasible,
}

impl NoPrediction {
    pub const ALL: [NoPrediction; 5] = [
        NoPrediction::TooFewEquations,
        NoPrediction::NoGuess,
        NoPrediction::Underdetermined,
        NoPrediction::Diverged,
        NoPrediction::Infeasible,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            NoPrediction::TooFewEquations => "too-few-equations",
            NoPrediction::NoGuess => "no-guess",
            NoPrediction::Underdetermined => "underdetermined",
            NoPrediction::Diverged => "diverged",
            NoPrediction::Infeasible => "infeasible",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.as_str() == s)
    }

    pub fn from_status(s: SolveStatus) -> Option<Self> {
        match s {
            SolveStatus::Converged => None,
            SolveStatus::Diverged => Some(NoPrediction::Diverged),
            SolveStatus::Underdetermined => Some(NoPrediction::Underdetermined),
            SolveStatus::Infeasible => Some(NoPrediction::Infeasible),
        }
    }
}

/// Equations for one record, with what was left out.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assembly {
    pub equations: Vec<PairEquation>,
    /// Pairs in view without a usable offset estimate.
    pub untracked: usize,
    /// Pairs whose measured difference exceeds the baseline.
    pub infeasible: Vec<SensorPair>,
}

/// Builds one equation per tracked pair of receivers, offsets predicted at
/// the arrival time on the lower-id sensor's clock.
pub fn assemble_equations(
    record: &TransmissionRecord,
    graph: &PairGraph,
    sensors: &SensorCatalog,
    cfg: &LocateConfig,
) -> Assembly {
    let mut located: Vec<(SensorId, f64, EcefPosition)> = record
        .measurements
        .iter()
        .filter(|m| m.toa_ns.is_finite())
        .filter_map(|m| {
            sensors
                .ecef(m.sensor_id)
                .map(|p| (m.sensor_id, m.toa_ns, p))
        })
        .collect();
    located.sort_by_key(|l| l.0);
    let mut out = Assembly::default();
    for (x, &(i, ti, si)) in located.iter().enumerate() {
        for &(j, tj, sj) in &located[x + 1..] {
            let Some((pair, _)) = SensorPair::new(i, j) else {
                continue;
            };
            let Ok((offset_ns, var_ns2)) = graph.predict(i, j, ti) else {
                out.untracked += 1;
                continue;
            };
            let eq = PairEquation {
                pair,
                tdoa_measured_s: (ti - tj) * 1e-9,
                offset_s: offset_ns * 1e-9,
                offset_variance_s2: var_ns2 * 1e-18,
                toa_variance_i_s2: graph.toa_variance_ns2(i) * 1e-18,
                toa_variance_j_s2: graph.toa_variance_ns2(j) * 1e-18,
                s_i: si,
                s_j: sj,
            };
            if eq.is_feasible(cfg.feasibility_slack_s) {
                out.equations.push(eq);
            } else {
                out.infeasible.push(pair);
            }
        }
    }
    out
}

/// A fresh previous estimate if there is one, else the signal-weighted
/// centroid of the receivers with its altitude clamped to the ellipsoid.
pub fn initial_guess(
    record: &TransmissionRecord,
    sensors: &SensorCatalog,
    previous: Option<&TrackState>,
    cfg: &LocateConfig,
) -> Result<EcefPosition, LocateError> {
    if let Some(prev) = previous {
        if ((record.server_time_us - prev.server_time_us) * 1e-6).abs() <= cfg.max_guess_age_s {
            return Ok(prev.position);
        }
    }
    let heard: Vec<(EcefPosition, f64)> = record
        .measurements
        .iter()
        .filter_map(|m| sensors.ecef(m.sensor_id).map(|p| (p, m.rssi_db)))
        .collect();
    if heard.is_empty() {
        return Err(LocateError::NoGuess);
    }
    // 10^(rssi/20), shifted by the strongest reading so the powers stay finite.
    let top = heard
        .iter()
        .map(|h| h.1)
        .filter(|r| r.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = Vector3::zeros();
    let mut wsum = 0.0;
    for (p, rssi) in &heard {
        let w = if rssi.is_finite() {
            10f64.powf((rssi - top) / 20.0)
        } else {
            1.0
        };
        sum += p.to_vector() * w;
        wsum += w;
    }
    // Under the receivers, lifted to the reported barometric altitude or a
    // typical cruise level. Starting on the ground invites the mirror
    // solution below the sensor plane.
    let centroid = EcefPosition::from_vector(&(sum / wsum));
    let g = centroid.to_geodetic().map_err(|_| LocateError::NoGuess)?;
    let altitude = record
        .baro_altitude_m
        .filter(|b| b.is_finite())
        .map_or(cfg.guess_altitude_m, |b| b + cfg.baro_offset_m);
    GeoPosition::new(g.latitude_deg, g.longitude_deg, altitude)
        .to_ecef()
        .map_err(|_| LocateError::NoGuess)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{AircraftId, Indicator, Measurement, RecordId, SensorInfo};
    use crate::geo::enu_offset;
    use proptest::prelude::*;

    fn origin() -> GeoPosition {
        GeoPosition::new(47.0, 8.0, 500.0)
    }

    fn at(e: f64, n: f64, u: f64) -> EcefPosition {
        enu_offset(&origin(), e, n, u).unwrap()
    }

    fn eq(si: EcefPosition, sj: EcefPosition, p: &EcefPosition, offset_s: f64) -> PairEquation {
        let tdoa = (si.distance(p) - sj.distance(p)) / SPEED_OF_LIGHT_MPS - offset_s;
        PairEquation {
            pair: SensorPair::new(SensorId(1), SensorId(2)).unwrap().0,
            tdoa_measured_s: tdoa,
            offset_s,
            offset_variance_s2: 0.0,
            toa_variance_i_s2: 0.0,
            toa_variance_j_s2: 0.0,
            s_i: si,
            s_j: sj,
        }
    }

    #[test]
    fn residual_zero_at_truth_and_on_bisector() {
        let p = at(3_000.0, 7_000.0, 10_000.0);
        let e = eq(at(-20e3, 0.0, 0.0), at(30e3, 5e3, 0.0), &p, 2.5e-6);
        assert!(residual(&e, &p).abs() < 1e-12);
        let sym = PairEquation {
            tdoa_measured_s: 0.0,
            offset_s: 0.0,
            ..eq(at(-10e3, 0.0, 0.0), at(10e3, 0.0, 0.0), &p, 0.0)
        };
        let mid = at(0.0, 12e3, 9e3);
        assert!(residual(&sym, &mid).abs() < 1e-12);
    }

    #[test]
    fn residual_matches_closed_form_displacement() {
        // Sensors 100 km apart; truth at the midpoint of the baseline, then
        // moved 1 km toward s_j: d_i grows by 1 km and d_j shrinks by 1 km.
        let si = EcefPosition::new(6_371_000.0, -50_000.0, 0.0);
        let sj = EcefPosition::new(6_371_000.0, 50_000.0, 0.0);
        let truth = EcefPosition::new(6_371_000.0, 0.0, 0.0);
        let e = eq(si, sj, &truth, 0.0);
        let moved = EcefPosition::new(6_371_000.0, 1_000.0, 0.0);
        let expected = 2_000.0 / SPEED_OF_LIGHT_MPS;
        assert!((residual(&e, &moved) - expected).abs() < 1e-12);
    }

    #[test]
    fn jacobian_symmetric_on_bisector_and_singular_at_sensor() {
        let si = at(-10e3, 0.0, 0.0);
        let sj = at(10e3, 0.0, 0.0);
        let p = at(0.0, 5e3, 8e3);
        let e = eq(si, sj, &p, 0.0);
        let row = jacobian_row(&e, &p).unwrap();
        let base = (sj.to_vector() - si.to_vector()).normalize();
        // On the bisector the row lies along the baseline only.
        assert!((row - base * row.dot(&base)).norm() < 1e-20);
        assert!(row.norm() <= 2.0 / SPEED_OF_LIGHT_MPS);
        assert_eq!(
            jacobian_row(&e, &si),
            Err(LocateError::Singular(SensorId(1)))
        );
        assert_eq!(
            jacobian_row(&e, &sj),
            Err(LocateError::Singular(SensorId(2)))
        );
    }

    proptest! {
        #[test]
        fn jacobian_row_bounded(
            a in prop::array::uniform3(-1e5f64..1e5),
            b in prop::array::uniform3(-1e5f64..1e5),
            q in prop::array::uniform3(-1e5f64..1e5),
        ) {
            let si = at(a[0], a[1], a[2]);
            let sj = at(b[0], b[1], b[2]);
            let p = at(q[0], q[1], q[2] + 2e5);
            let row = jacobian_row(&eq(si, sj, &p, 0.0), &p).unwrap();
            prop_assert!(row.norm() <= 2.0 / SPEED_OF_LIGHT_MPS * (1.0 + 1e-12));
        }
    }

    fn catalog(sensors: &[(u64, f64, f64, f64)]) -> SensorCatalog {
        SensorCatalog::new(
            sensors
                .iter()
                .map(|&(id, e, n, u)| SensorInfo {
                    sensor_id: SensorId(id),
                    position: at(e, n, u).to_geodetic().unwrap(),
                    good: Indicator::True,
                })
                .collect(),
        )
        .unwrap()
    }

    fn rec(ms: &[(u64, f64)]) -> TransmissionRecord {
        TransmissionRecord {
            record_id: RecordId(1),
            server_time_us: 100e6,
            aircraft_id: AircraftId(7),
            truth: None,
            baro_altitude_m: None,
            measurements: ms
                .iter()
                .map(|&(s, rssi)| Measurement {
                    sensor_id: SensorId(s),
                    toa_ns: 0.0,
                    rssi_db: rssi,
                })
                .collect(),
            flagged: false,
        }
    }

    /// The point above `v` at `alt`.
    fn lifted(v: Vector3<f64>, alt: f64) -> Vector3<f64> {
        let g = EcefPosition::from_vector(&v).to_geodetic().unwrap();
        GeoPosition::new(g.latitude_deg, g.longitude_deg, alt)
            .to_ecef()
            .unwrap()
            .to_vector()
    }

    #[test]
    fn guess_rules() {
        let s = catalog(&[
            (1, 0.0, 0.0, 300.0),
            (2, 20e3, 0.0, 900.0),
            (3, 0.0, 1e3, 0.0),
        ]);
        let cfg = LocateConfig::default();
        let e = |id| s.ecef(SensorId(id)).unwrap().to_vector();
        let one = initial_guess(&rec(&[(1, -30.0)]), &s, None, &cfg).unwrap();
        assert!((one.to_vector() - lifted(e(1), 9_000.0)).norm() < 1e-6);
        let two = initial_guess(&rec(&[(1, -30.0), (2, -30.0)]), &s, None, &cfg).unwrap();
        assert!((two.to_vector() - lifted((e(1) + e(2)) / 2.0, 9_000.0)).norm() < 1e-6);
        // 20 dB stronger means ten times the weight.
        let w = initial_guess(&rec(&[(1, -10.0), (2, -30.0)]), &s, None, &cfg).unwrap();
        assert!((w.to_vector() - lifted((e(1) * 10.0 + e(2)) / 11.0, 9_000.0)).norm() < 1e-6);
        let mut baro = rec(&[(1, -30.0)]);
        baro.baro_altitude_m = Some(4_000.0);
        let b = initial_guess(&baro, &s, None, &cfg).unwrap();
        assert!((b.to_geodetic().unwrap().altitude_m - 4_000.0).abs() < 1e-6);

        let prev = TrackState {
            position: at(1.0, 2.0, 3.0),
            server_time_us: 95e6,
        };
        assert_eq!(
            initial_guess(&rec(&[(1, 0.0)]), &s, Some(&prev), &cfg).unwrap(),
            prev.position
        );
        let stale = TrackState {
            server_time_us: 80e6,
            ..prev
        };
        assert_ne!(
            initial_guess(&rec(&[(1, 0.0)]), &s, Some(&stale), &cfg).unwrap(),
            prev.position
        );
        assert_eq!(
            initial_guess(&rec(&[(9, 0.0)]), &s, None, &cfg),
            Err(LocateError::NoGuess)
        );
    }

    #[test]
    fn guess_lifted_above_chord() {
        // The chord midpoint of distant sensors sits far below the surface.
        let s = SensorCatalog::new(
            [(1, 6.0), (2, 10.0)]
                .iter()
                .map(|&(id, lon)| SensorInfo {
                    sensor_id: SensorId(id),
                    position: GeoPosition::new(47.0, lon, 0.0),
                    good: Indicator::True,
                })
                .collect(),
        )
        .unwrap();
        let g = initial_guess(
            &rec(&[(1, f64::NAN), (2, f64::NAN)]),
            &s,
            None,
            &LocateConfig::default(),
        )
        .unwrap()
        .to_geodetic()
        .unwrap();
        assert!((g.altitude_m - 9_000.0).abs() < 1e-6);
    }
}
