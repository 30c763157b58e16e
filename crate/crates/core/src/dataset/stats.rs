use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{SensorCatalog, TransmissionRecord};

/// Counts gathered while streaming one subset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestStats {
    pub records: u64,
    pub measurements: u64,
    pub with_truth: u64,
    pub flagged: u64,
    pub sensors: u64,
    pub gps_good_sensors: u64,
    /// Receivers per record -> number of records.
    pub redundancy: BTreeMap<usize, u64>,
}

impl IngestStats {
    pub fn with_sensors(sensors: &SensorCatalog) -> Self {
        Self {
            sensors: sensors.len() as u64,
            gps_good_sensors: sensors.good_count() as u64,
            ..Default::default()
        }
    }

    pub fn observe(&mut self, r: &TransmissionRecord) {
        self.records += 1;
        self.measurements += r.measurements.len() as u64;
        self.with_truth += u64::from(r.truth.is_some());
        self.flagged += u64::from(r.flagged);
        *self.redundancy.entry(r.measurements.len()).or_default() += 1;
    }

    pub fn max_redundancy(&self) -> usize {
        self.redundancy.keys().next_back().copied().unwrap_or(0)
    }

    /// Success probability of a geometric law on {2, 3, ...} fitted to the
    /// redundancy histogram.
    pub fn geometric_success(&self) -> Option<f64> {
        fit_geometric_success(&self.redundancy, 2)
    }
}

/// Maximum-likelihood success probability of a geometric distribution with
/// support starting at `min_value`: `1 / (mean - min_value + 1)`.
pub fn fit_geometric_success(histogram: &BTreeMap<usize, u64>, min_value: usize) -> Option<f64> {
    let n: u64 = histogram.values().sum();
    if n == 0 {
        return None;
    }
    let total: f64 = histogram.iter().map(|(k, c)| *k as f64 * *c as f64).sum();
    let mean = total / n as f64;
    Some(1.0 / (mean - min_value as f64 + 1.0))
}

impl fmt::Display for IngestStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "records       {}", self.records)?;
        writeln!(f, "measurements  {}", self.measurements)?;
        writeln!(f, "with truth    {}", self.with_truth)?;
        writeln!(f, "flagged       {}", self.flagged)?;
        writeln!(f, "sensors       {}", self.sensors)?;
        writeln!(f, "gps-good      {}", self.gps_good_sensors)?;
        match self.geometric_success() {
            Some(p) => writeln!(f, "geometric p   {p:.4}")?,
            None => writeln!(f, "geometric p   n/a")?,
        }
        writeln!(f, "max receivers {}", self.max_redundancy())?;
        writeln!(f, "receivers,records")?;
        for (k, c) in &self.redundancy {
            writeln!(f, "{k},{c}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_fit_recovers_parameter() {
        // Expected counts of a shifted geometric law with p = 0.28.
        let p: f64 = 0.28;
        let hist: BTreeMap<usize, u64> = (2..200)
            .map(|k| (k, (1e9 * p * (1.0 - p).powi(k as i32 - 2)).round() as u64))
            .collect();
        let fit = fit_geometric_success(&hist, 2).unwrap();
        assert!((fit - p).abs() < 1e-6, "{fit}");
        assert_eq!(fit_geometric_success(&BTreeMap::new(), 2), None);
    }

    #[test]
    fn table_totals_give_fit_within_band() {
        // Mean receivers per record from the published set-1 totals.
        let mean: f64 = 28_234_130.0 / 6_457_542.0;
        let p = 1.0 / (mean - 1.0);
        assert!((p - 0.28).abs() <= 0.02, "{p}");
    }
}
