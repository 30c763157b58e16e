use std::collections::BTreeMap;

use super::{PairOffsetTracker, SensorPair, SyncConfig, SyncError};
use crate::dataset::{SensorCatalog, SensorId};

/// Tracking pairs frozen for localization, plus per-sensor timestamp
/// variances derived from the pair noise levels.
#[derive(Debug, Clone, Default)]
pub struct PairGraph {
    cfg: SyncConfig,
    trackers: BTreeMap<SensorPair, PairOffsetTracker>,
    toa_var_ns2: BTreeMap<SensorId, f64>,
}

impl PairGraph {
    /// Keeps only trackers in tracking status.
    pub fn new(
        cfg: SyncConfig,
        trackers: impl IntoIterator<Item = PairOffsetTracker>,
        sensors: &SensorCatalog,
    ) -> Self {
        let trackers: BTreeMap<_, _> = trackers
            .into_iter()
            .filter(|t| t.is_tracking())
            .map(|t| (t.pair, t))
            .collect();
        let toa_var_ns2 = sensor_variances(&cfg, &trackers, sensors);
        Self {
            cfg,
            trackers,
            toa_var_ns2,
        }
    }

    pub fn config(&self) -> &SyncConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.trackers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trackers.is_empty()
    }

    pub fn edges(&self) -> impl Iterator<Item = SensorPair> + '_ {
        self.trackers.keys().copied()
    }

    pub fn trackers(&self) -> impl Iterator<Item = &PairOffsetTracker> {
        self.trackers.values()
    }

    pub fn tracker(&self, pair: SensorPair) -> Option<&PairOffsetTracker> {
        self.trackers.get(&pair)
    }

    pub fn contains(&self, i: SensorId, j: SensorId) -> bool {
        SensorPair::new(i, j).is_some_and(|(p, _)| self.trackers.contains_key(&p))
    }

    pub fn neighbors(&self, s: SensorId) -> Vec<SensorId> {
        self.trackers
            .keys()
            .filter_map(|p| match (p.a == s, p.b == s) {
                (true, _) => Some(p.b),
                (_, true) => Some(p.a),
                _ => None,
            })
            .collect()
    }

    /// Predicted `Δt_{i,j}` and its variance (ns, ns²). `t_ns` is on the
    /// clock of the lower-id sensor of the pair.
    pub fn predict(&self, i: SensorId, j: SensorId, t_ns: f64) -> Result<(f64, f64), SyncError> {
        let (pair, sign) =
            SensorPair::new(i, j).ok_or(SyncError::NoEstimate(SensorPair { a: i, b: j }))?;
        let tracker = self
            .trackers
            .get(&pair)
            .ok_or(SyncError::NoEstimate(pair))?;
        if ((t_ns - tracker.last_update_ns) * 1e-9).abs() > self.cfg.max_extrapolation_s {
            return Err(SyncError::NoEstimate(pair));
        }
        let (offset, var) = tracker.predict_offset(t_ns, &self.cfg)?;
        Ok((sign * offset, var))
    }

    /// Timestamp noise variance of one sensor, ns².
    pub fn toa_variance_ns2(&self, s: SensorId) -> f64 {
        self.toa_var_ns2
            .get(&s)
            .copied()
            .unwrap_or(self.cfg.toa_sigma_other_ns * self.cfg.toa_sigma_other_ns)
    }
}

/// Splits pair measurement variances `R_ij ≈ v_i + v_j` into per-sensor
/// terms by non-negative least squares (cyclic coordinate descent). Sensors
/// without a pair keep their class default.
fn sensor_variances(
    cfg: &SyncConfig,
    trackers: &BTreeMap<SensorPair, PairOffsetTracker>,
    sensors: &SensorCatalog,
) -> BTreeMap<SensorId, f64> {
    let mut v: BTreeMap<SensorId, f64> = sensors
        .iter()
        .map(|s| (s.sensor_id, cfg.class_variance_ns2(Some(s))))
        .collect();
    let mut incident: BTreeMap<SensorId, Vec<(SensorId, f64)>> = BTreeMap::new();
    for t in trackers.values() {
        incident
            .entry(t.pair.a)
            .or_default()
            .push((t.pair.b, t.measurement_var_ns2));
        incident
            .entry(t.pair.b)
            .or_default()
            .push((t.pair.a, t.measurement_var_ns2));
        for s in [t.pair.a, t.pair.b] {
            v.entry(s)
                .or_insert(cfg.toa_sigma_other_ns * cfg.toa_sigma_other_ns);
        }
    }
    let floor = 0.5 * cfg.min_measurement_var_ns2;
    for _ in 0..100 {
        let mut change: f64 = 0.0;
        for (s, edges) in &incident {
            let sum: f64 = edges.iter().map(|(o, r)| r - v[o]).sum();
            let new = (sum / edges.len() as f64).max(floor);
            let old = v.insert(*s, new).unwrap_or(new);
            change = change.max((new - old).abs() / old.max(floor));
        }
        if change < 1e-9 {
            break;
        }
    }
    v
}
