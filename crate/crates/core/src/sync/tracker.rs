use serde::{Deserialize, Serialize};

use super::{OffsetSample, SensorPair, SyncConfig, SyncError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrackerStatus {
    Uninitialized,
    Tracking,
    /// Too many consecutive rejections; the next sample seeds a fresh state.
    Reinitializing,
}

impl TrackerStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrackerStatus::Uninitialized => "uninitialized",
            TrackerStatus::Tracking => "tracking",
            TrackerStatus::Reinitializing => "reinitializing",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "uninitialized" => Some(TrackerStatus::Uninitialized),
            "tracking" => Some(TrackerStatus::Tracking),
            "reinitializing" => Some(TrackerStatus::Reinitializing),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateOutcome {
    /// The sample started a fresh state.
    Seeded,
    Accepted,
    Rejected,
    /// Rejected, and the reject limit was exceeded.
    RejectedAndReset,
}

impl UpdateOutcome {
    pub fn is_rejected(&self) -> bool {
        matches!(
            self,
            UpdateOutcome::Rejected | UpdateOutcome::RejectedAndReset
        )
    }
}

/// Offset/drift filter for one ordered sensor pair.
///
/// State is the pair offset in nanoseconds and its rate in ns/s, both on the
/// lower-id sensor's clock. The model is constant drift with a random-walk
/// drift term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOffsetTracker {
    pub pair: SensorPair,
    pub status: TrackerStatus,
    pub offset_ns: f64,
    pub drift_ns_per_s: f64,
    /// Row-major 2x2 covariance of (offset, drift).
    pub covariance: [[f64; 2]; 2],
    pub last_update_ns: f64,
    pub consecutive_rejects: u32,
    /// Measurement noise variance of the pair offset samples, ns².
    pub measurement_var_ns2: f64,
    /// Running estimate of the measurement variance from innovations.
    pub innovation_var_ns2: f64,
    pub accepted: u64,
    pub rejected: u64,
    pub reinits: u64,
}

impl PairOffsetTracker {
    pub fn new(pair: SensorPair, measurement_var_ns2: f64) -> Self {
        Self {
            pair,
            status: TrackerStatus::Uninitialized,
            offset_ns: 0.0,
            drift_ns_per_s: 0.0,
            covariance: [[0.0; 2]; 2],
            last_update_ns: f64::NEG_INFINITY,
            consecutive_rejects: 0,
            measurement_var_ns2,
            innovation_var_ns2: measurement_var_ns2,
            accepted: 0,
            rejected: 0,
            reinits: 0,
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.status == TrackerStatus::Tracking
    }

    fn seed(&mut self, s: &OffsetSample, cfg: &SyncConfig) {
        self.offset_ns = s.delta_ns;
        self.drift_ns_per_s = 0.0;
        let sd = cfg.initial_drift_sigma_ns_per_s;
        self.covariance = [[self.measurement_var_ns2, 0.0], [0.0, sd * sd]];
        self.last_update_ns = s.t_event_ns;
        self.consecutive_rejects = 0;
        self.status = TrackerStatus::Tracking;
        self.accepted += 1;
    }

    fn predicted(&self, dt_s: f64, cfg: &SyncConfig) -> ([f64; 2], [[f64; 2]; 2]) {
        let [[p00, p01], [_, p11]] = self.covariance;
        let q = cfg.drift_noise_ns2_per_s3();
        let x = [
            self.offset_ns + self.drift_ns_per_s * dt_s,
            self.drift_ns_per_s,
        ];
        let a00 = p00 + 2.0 * dt_s * p01 + dt_s * dt_s * p11 + q * dt_s.powi(3) / 3.0;
        let a01 = p01 + dt_s * p11 + q * dt_s * dt_s / 2.0;
        let a11 = p11 + q * dt_s;
        (x, [[a00, a01], [a01, a11]])
    }

    /// Feeds one sample; samples must arrive in non-decreasing event time.
    pub fn update(
        &mut self,
        s: &OffsetSample,
        cfg: &SyncConfig,
    ) -> Result<UpdateOutcome, SyncError> {
        debug_assert_eq!(s.pair, self.pair);
        if !s.delta_ns.is_finite() || !s.t_event_ns.is_finite() {
            return Err(SyncError::NonFinite(s.source_record_id));
        }
        if self.status != TrackerStatus::Tracking {
            if self.status == TrackerStatus::Reinitializing && s.t_event_ns < self.last_update_ns {
                return Err(SyncError::Ordering {
                    pair: self.pair,
                    last_ns: self.last_update_ns,
                    got_ns: s.t_event_ns,
                });
            }
            self.seed(s, cfg);
            return Ok(UpdateOutcome::Seeded);
        }
        if s.t_event_ns < self.last_update_ns {
            return Err(SyncError::Ordering {
                pair: self.pair,
                last_ns: self.last_update_ns,
                got_ns: s.t_event_ns,
            });
        }
        let dt_s = (s.t_event_ns - self.last_update_ns) * 1e-9;
        let (x, p) = self.predicted(dt_s, cfg);
        let r = self.measurement_var_ns2;
        let s_var = p[0][0] + r;
        let innovation = s.delta_ns - x[0];
        self.last_update_ns = s.t_event_ns;

        if innovation.abs() > cfg.gate_sigma * s_var.sqrt() {
            self.offset_ns = x[0];
            self.drift_ns_per_s = x[1];
            self.covariance = p;
            self.rejected += 1;
            self.consecutive_rejects += 1;
            if self.consecutive_rejects > cfg.reject_limit {
                self.status = TrackerStatus::Reinitializing;
                self.reinits += 1;
                return Ok(UpdateOutcome::RejectedAndReset);
            }
            return Ok(UpdateOutcome::Rejected);
        }

        let k = [p[0][0] / s_var, p[1][0] / s_var];
        self.offset_ns = x[0] + k[0] * innovation;
        self.drift_ns_per_s = x[1] + k[1] * innovation;
        // Joseph form keeps the covariance symmetric positive semi-definite.
        let a = [[1.0 - k[0], 0.0], [-k[1], 1.0]];
        let mut out = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = k[i] * r * k[j];
                for m in 0..2 {
                    for n in 0..2 {
                        acc += a[i][m] * p[m][n] * a[j][n];
                    }
                }
                out[i][j] = acc;
            }
        }
        let off = 0.5 * (out[0][1] + out[1][0]);
        out[0][1] = off;
        out[1][0] = off;
        self.covariance = out;
        self.consecutive_rejects = 0;
        self.accepted += 1;

        // The prior dominates the first innovations, so adaptation waits
        // until the state has settled.
        if self.accepted > cfg.noise_adapt_after {
            let alpha = cfg.noise_adapt_alpha;
            self.innovation_var_ns2 = ((1.0 - alpha) * self.innovation_var_ns2
                + alpha * (innovation * innovation - p[0][0]))
                .max(cfg.min_measurement_var_ns2);
            self.measurement_var_ns2 = self.innovation_var_ns2;
        }
        Ok(UpdateOutcome::Accepted)
    }

    /// Extrapolated offset and an inflated variance at `t_query_ns` (on the
    /// lower-id sensor's clock).
    ///
    /// The cross term is taken with its worst-case sign so the variance grows
    /// monotonically with `|Δt|` in both directions.
    pub fn predict_offset(
        &self,
        t_query_ns: f64,
        cfg: &SyncConfig,
    ) -> Result<(f64, f64), SyncError> {
        if self.status != TrackerStatus::Tracking {
            return Err(SyncError::NoEstimate(self.pair));
        }
        let dt = (t_query_ns - self.last_update_ns) * 1e-9;
        let adt = dt.abs();
        let [[p00, p01], [_, p11]] = self.covariance;
        let q = cfg.drift_noise_ns2_per_s3();
        let var = p00 + 2.0 * adt * p01.abs() + adt * adt * p11 + q * adt.powi(3) / 3.0;
        Ok((self.offset_ns + self.drift_ns_per_s * dt, var))
    }

    pub fn covariance_is_psd(&self) -> bool {
        let [[a, b], [c, d]] = self.covariance;
        let tol = 1e-9 * (a.abs() + d.abs()).max(1e-300);
        (b - c).abs() <= tol
            && a >= -tol
            && d >= -tol
            && a * d - b * c >= -tol * (a.abs() + d.abs())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{RecordId, SensorId};
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn pair() -> SensorPair {
        SensorPair::new(SensorId(1), SensorId(2)).unwrap().0
    }

    fn sample(t_s: f64, delta_ns: f64) -> OffsetSample {
        OffsetSample {
            pair: pair(),
            t_event_ns: t_s * 1e9,
            delta_ns,
            source_record_id: RecordId(0),
        }
    }

    fn cfg() -> SyncConfig {
        SyncConfig::default()
    }

    #[test]
    fn constant_offset_noise_free() {
        let cfg = cfg();
        let mut t = PairOffsetTracker::new(pair(), 2.0 * 50.0 * 50.0);
        for k in 0..10 {
            t.update(&sample(k as f64 * 0.5, 1000.0), &cfg).unwrap();
        }
        assert!((t.offset_ns - 1000.0).abs() < 1.0);
        assert!(t.drift_ns_per_s.abs() < 1e-6);
        assert!(t.covariance_is_psd());
    }

    #[test]
    fn known_drift_extrapolates() {
        let cfg = cfg();
        let mut t = PairOffsetTracker::new(pair(), 2.0 * 50.0 * 50.0);
        for k in 0..600 {
            let ts = k as f64 * 0.5;
            t.update(&sample(ts, 200.0 + 10.0 * ts), &cfg).unwrap();
        }
        let last = 299.5;
        let (o, _) = t.predict_offset((last + 100.0) * 1e9, &cfg).unwrap();
        let truth = 200.0 + 10.0 * (last + 100.0);
        assert!((o - truth).abs() < 1.0, "{o} vs {truth}");
        let (at_zero, _) = t.predict_offset(last * 1e9, &cfg).unwrap();
        assert_eq!(at_zero, t.offset_ns);
    }

    #[test]
    fn variance_grows_with_horizon() {
        let cfg = cfg();
        let mut t = PairOffsetTracker::new(pair(), 5000.0);
        for k in 0..50 {
            t.update(&sample(k as f64, 0.0), &cfg).unwrap();
        }
        let now = t.last_update_ns;
        let v = |dt: f64| t.predict_offset(now + dt * 1e9, &cfg).unwrap().1;
        assert!(v(60.0) > v(1.0));
        assert!(v(-60.0) > v(-1.0));
        assert!(v(1.0) >= v(0.0));
    }

    #[test]
    fn uninitialized_has_no_estimate() {
        let t = PairOffsetTracker::new(pair(), 1.0);
        assert!(matches!(
            t.predict_offset(0.0, &cfg()),
            Err(SyncError::NoEstimate(_))
        ));
    }

    #[test]
    fn out_of_order_sample_is_error() {
        let cfg = cfg();
        let mut t = PairOffsetTracker::new(pair(), 1.0);
        t.update(&sample(10.0, 0.0), &cfg).unwrap();
        assert!(matches!(
            t.update(&sample(9.0, 0.0), &cfg),
            Err(SyncError::Ordering { .. })
        ));
    }

    fn noisy_run(outlier_at: Option<usize>) -> PairOffsetTracker {
        let cfg = cfg();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 50.0).unwrap();
        let mut t = PairOffsetTracker::new(pair(), 2.0 * 50.0 * 50.0);
        for k in 0..200 {
            let mut d = 750.0 + noise.sample(&mut rng);
            if Some(k) == outlier_at {
                d += 100_000.0;
            }
            let out = t.update(&sample(k as f64 * 0.5, d), &cfg).unwrap();
            if Some(k) == outlier_at {
                assert_eq!(out, UpdateOutcome::Rejected);
            }
        }
        t
    }

    #[test]
    fn single_outlier_rejected() {
        let clean = noisy_run(None);
        let dirty = noisy_run(Some(120));
        let sigma = clean.covariance[0][0].sqrt();
        assert!(
            ((dirty.offset_ns - 750.0) - (clean.offset_ns - 750.0)).abs() < 3.0 * sigma.max(50.0)
        );
        assert_eq!(dirty.rejected, 1);
    }

    #[test]
    fn reinitializes_after_limit() {
        let cfg = SyncConfig {
            reject_limit: 5,
            ..cfg()
        };
        let mut t = PairOffsetTracker::new(pair(), 2500.0);
        for k in 0..20 {
            t.update(&sample(k as f64 * 0.5, 0.0), &cfg).unwrap();
        }
        for k in 0..6 {
            let out = t.update(&sample(10.0 + k as f64 * 0.5, 1e6), &cfg).unwrap();
            if k < 5 {
                assert_eq!(out, UpdateOutcome::Rejected);
                assert_eq!(t.status, TrackerStatus::Tracking);
            } else {
                assert_eq!(out, UpdateOutcome::RejectedAndReset);
                assert_eq!(t.status, TrackerStatus::Reinitializing);
            }
        }
        assert_eq!(
            t.update(&sample(14.0, 1e6), &cfg).unwrap(),
            UpdateOutcome::Seeded
        );
        assert_eq!(t.offset_ns, 1e6);
        assert!(t.is_tracking());
    }

    #[test]
    fn gating_rate_bounded_without_outliers() {
        let cfg = cfg();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let noise = Normal::new(0.0, 100.0).unwrap();
        let mut t = PairOffsetTracker::new(pair(), 2.0 * 500.0 * 500.0);
        let n = 20_000;
        for k in 0..n {
            t.update(
                &sample(
                    k as f64 * 0.5,
                    3.0 * k as f64 * 0.5 + noise.sample(&mut rng),
                ),
                &cfg,
            )
            .unwrap();
            assert!(t.covariance_is_psd());
        }
        let phi = normal_tail(cfg.gate_sigma);
        assert!((t.rejected as f64 / n as f64) <= 2.0 * phi + 0.01);
    }

    // Upper tail of the standard normal via the complementary error function
    // series; accurate enough for a bound check.
    fn normal_tail(z: f64) -> f64 {
        let t = 1.0 / (1.0 + 0.5 * z / std::f64::consts::SQRT_2);
        let x = z / std::f64::consts::SQRT_2;
        let erfc = t
            * (-x * x - 1.265_512_23
                + t * (1.000_023_68
                    + t * (0.374_091_96
                        + t * (0.096_784_18
                            + t * (-0.186_288_06
                                + t * (0.278_868_07
                                    + t * (-1.135_203_98
                                        + t * (1.488_515_87
                                            + t * (-0.822_152_23 + t * 0.170_872_77)))))))))
                .exp();
        0.5 * erfc
    }
}
