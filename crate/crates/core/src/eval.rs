//! Scoring: error against the hidden positions, coverage, and the truncated
//! RMSE in which every missing prediction counts as a fixed penalty.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{AnswerKeyEntry, RecordId};
use crate::geo::{enu_basis, GeoError, GeoPosition};
use crate::locate::PredictionRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ErrorMetric {
    #[default]
    #[serde(rename = "3d")]
    Euclidean3d,
    /// Horizontal distance after removing the vertical at the true position.
    #[serde(rename = "2d")]
    Horizontal2d,
}

impl ErrorMetric {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "3d" => Some(ErrorMetric::Euclidean3d),
            "2d" => Some(ErrorMetric::Horizontal2d),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorMetric::Euclidean3d => "3d",
            ErrorMetric::Horizontal2d => "2d",
        }
    }

    pub fn other(&self) -> Self {
        match self {
            ErrorMetric::Euclidean3d => ErrorMetric::Horizontal2d,
            ErrorMetric::Horizontal2d => ErrorMetric::Euclidean3d,
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction for record {0} which is not in the answer key")]
    UnknownRecord(RecordId),
    #[error("duplicate prediction for record {0}")]
    Duplicate(RecordId),
    #[error("duplicate answer key entry for record {0}")]
    DuplicateKey(RecordId),
    #[error("answer key is empty")]
    EmptyKey,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// There is no default penalty: it has to be chosen for each data set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub min_coverage: f64,
    pub penalty_m: f64,
    pub metric: ErrorMetric,
}

impl EvalConfig {
    pub fn new(penalty_m: f64) -> Result<Self, EvalError> {
        let cfg = Self {
            min_coverage: 0.5,
            penalty_m,
            metric: ErrorMetric::Euclidean3d,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.penalty_m > 0.0 && self.penalty_m.is_finite()) {
            return Err(EvalError::Config(format!(
                "penalty_m must be positive, got {}",
                self.penalty_m
            )));
        }
        if !(self.min_coverage > 0.0 && self.min_coverage <= 1.0) {
            return Err(EvalError::Config(format!(
                "min_coverage must be in (0, 1], got {}",
                self.min_coverage
            )));
        }
        Ok(())
    }
}

pub fn position_error(
    pred: &GeoPosition,
    truth: &GeoPosition,
    metric: ErrorMetric,
) -> Result<f64, GeoError> {
    let d = pred.to_ecef()?.to_vector() - truth.to_ecef()?.to_vector();
    Ok(match metric {
        ErrorMetric::Euclidean3d => d.norm(),
        ErrorMetric::Horizontal2d => {
            let up = enu_basis(truth)[2];
            (d - up * d.dot(&up)).norm()
        }
    })
}

/// Error statistics under one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: ErrorMetric,
    /// `None` when nothing was predicted.
    pub rmse_predicted_m: Option<f64>,
    pub truncated_rmse_m: f64,
    pub p50_m: Option<f64>,
    pub p90_m: Option<f64>,
    pub p99_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub n_eligible: u64,
    pub n_predicted: u64,
    pub coverage: f64,
    pub rmse_predicted_m: Option<f64>,
    pub truncated_rmse_m: f64,
    pub pass_coverage_floor: bool,
    pub p50_m: Option<f64>,
    pub p90_m: Option<f64>,
    pub p99_m: Option<f64>,
    /// Counts of records without a position, by reason; `missing` counts
    /// key entries absent from the prediction file.
    pub no_prediction: BTreeMap<String, u64>,
    /// The same statistics under the other error metric.
    pub other_metric: MetricSummary,
    /// Run configuration, echoed verbatim.
    pub echo: Vec<(String, String)>,
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

fn summarize(
    errors: &[f64],
    n_eligible: u64,
    penalty_m: f64,
    metric: ErrorMetric,
) -> MetricSummary {
    let n_predicted = errors.len() as u64;
    // Summed in record-id order for bit-stable output.
    let ss: f64 = errors.iter().map(|e| e * e).sum();
    let rmse_predicted_m = (n_predicted > 0).then(|| (ss / n_predicted as f64).sqrt());
    let truncated_rmse_m = if n_predicted == 0 {
        penalty_m
    } else {
        let missing = (n_eligible - n_predicted) as f64;
        ((ss + penalty_m * penalty_m * missing) / n_eligible as f64).sqrt()
    };
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    MetricSummary {
        metric,
        rmse_predicted_m,
        truncated_rmse_m,
        p50_m: percentile(&sorted, 50.0),
        p90_m: percentile(&sorted, 90.0),
        p99_m: percentile(&sorted, 99.0),
    }
}

pub fn score(
    predictions: &[PredictionRow],
    key: &[AnswerKeyEntry],
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let mut truth: BTreeMap<RecordId, GeoPosition> = BTreeMap::new();
    for e in key {
        if truth.insert(e.record_id, e.position).is_some() {
            return Err(EvalError::DuplicateKey(e.record_id));
        }
    }
    if truth.is_empty() {
        return Err(EvalError::EmptyKey);
    }
    let mut preds: BTreeMap<RecordId, &PredictionRow> = BTreeMap::new();
    for p in predictions {
        if !truth.contains_key(&p.record_id) {
            return Err(EvalError::UnknownRecord(p.record_id));
        }
        if preds.insert(p.record_id, p).is_some() {
            return Err(EvalError::Duplicate(p.record_id));
        }
    }

    let mut primary = Vec::new();
    let mut secondary = Vec::new();
    let mut no_prediction: BTreeMap<String, u64> = BTreeMap::new();
    for (id, t) in &truth {
        match preds.get(id) {
            Some(PredictionRow {
                position: Some(p), ..
            }) => {
                primary.push(position_error(p, t, cfg.metric)?);
                secondary.push(position_error(p, t, cfg.metric.other())?);
            }
            Some(row) => *no_prediction.entry(row.status().to_string()).or_default() += 1,
            None => *no_prediction.entry("missing".to_string()).or_default() += 1,
        }
    }

    let n_eligible = truth.len() as u64;
    let n_predicted = primary.len() as u64;
    let coverage = n_predicted as f64 / n_eligible as f64;
    let main = summarize(&primary, n_eligible, cfg.penalty_m, cfg.metric);
    Ok(EvalReport {
        config: *cfg,
        n_eligible,
        n_predicted,
        coverage,
        rmse_predicted_m: main.rmse_predicted_m,
        truncated_rmse_m: main.truncated_rmse_m,
        pass_coverage_floor: coverage >= cfg.min_coverage,
        p50_m: main.p50_m,
        p90_m: main.p90_m,
        p99_m: main.p99_m,
        no_prediction,
        other_metric: summarize(&secondary, n_eligible, cfg.penalty_m, cfg.metric.other()),
        echo: Vec::new(),
    })
}

fn metres(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"))
}

impl EvalReport {
    pub fn with_echo(mut self, echo: Vec<(String, String)>) -> Self {
        self.echo = echo;
        self
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.echo {
            let _ = writeln!(s, "# {k} = {v}");
        }
        let _ = writeln!(s, "metric            {}", self.config.metric.as_str());
        let _ = writeln!(s, "penalty_m         {}", self.config.penalty_m);
        let _ = writeln!(s, "min_coverage      {}", self.config.min_coverage);
        let _ = writeln!(s, "eligible          {}", self.n_eligible);
        let _ = writeln!(s, "predicted         {}", self.n_predicted);
        let _ = writeln!(s, "coverage          {:.4}", self.coverage);
        let _ = writeln!(s, "rmse_predicted_m  {}", metres(self.rmse_predicted_m));
        let _ = writeln!(s, "truncated_rmse_m  {:.2}", self.truncated_rmse_m);
        let _ = writeln!(
            s,
            "p50/p90/p99_m     {} / {} / {}",
            metres(self.p50_m),
            metres(self.p90_m),
            metres(self.p99_m)
        );
        let o = &self.other_metric;
        let _ = writeln!(
            s,
            "{} rmse / trunc   {} / {:.2}",
            o.metric.as_str(),
            metres(o.rmse_predicted_m),
            o.truncated_rmse_m
        );
        let _ = writeln!(
            s,
            "coverage floor    {}",
            if self.pass_coverage_floor {
                "pass"
            } else {
                "FAIL"
            }
        );
        for (reason, n) in &self.no_prediction {
            let _ = writeln!(s, "no prediction     {reason}: {n}");
        }
        s
    }

    pub fn to_json(&self) -> Result<String, EvalError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Writes `<stem>.txt` and `<stem>.json`.
pub fn emit_report(report: &EvalReport, stem: &Path) -> Result<(PathBuf, PathBuf), EvalError> {
    let txt = stem.with_extension("txt");
    let json = stem.with_extension("json");
    std::fs::write(&txt, report.to_text())?;
    std::fs::write(&json, report.to_json()? + "\n")?;
    Ok((txt, json))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::enu_offset;
    use crate::locate::NoPrediction;
    use proptest::prelude::*;

    fn truth() -> GeoPosition {
        GeoPosition::new(46.5, 7.25, 9_500.0)
    }

    fn displaced(e: f64, n: f64, u: f64) -> GeoPosition {
        enu_offset(&truth(), e, n, u)
            .unwrap()
            .to_geodetic()
            .unwrap()
    }

    fn row(id: u64, p: Option<GeoPosition>) -> PredictionRow {
        PredictionRow {
            record_id: RecordId(id),
            position: p,
            n_equations: 3,
            rank: Some(3),
            residual_rms_ns: Some(1.0),
            reason: if p.is_some() {
                None
            } else {
                Some(NoPrediction::Underdetermined)
            },
        }
    }

    fn key(n: u64) -> Vec<AnswerKeyEntry> {
        (0..n)
            .map(|i| AnswerKeyEntry {
                record_id: RecordId(i),
                position: truth(),
            })
            .collect()
    }

    #[test]
    fn errors_in_local_frame() {
        let t = truth();
        assert_eq!(
            position_error(&t, &t, ErrorMetric::Euclidean3d).unwrap(),
            0.0
        );
        let p = displaced(3.0, 0.0, 4.0);
        assert!((position_error(&p, &t, ErrorMetric::Euclidean3d).unwrap() - 5.0).abs() < 1e-6);
        assert!((position_error(&p, &t, ErrorMetric::Horizontal2d).unwrap() - 3.0).abs() < 1e-6);
    }

    #[test]
    fn worked_two_record_example() {
        let cfg = EvalConfig::new(1000.0).unwrap();
        let r = score(&[row(0, Some(displaced(0.0, 100.0, 0.0)))], &key(2), &cfg).unwrap();
        assert!(
            (r.truncated_rmse_m - 710.63).abs() < 0.01,
            "{}",
            r.truncated_rmse_m
        );
        assert_eq!(r.coverage, 0.5);
        assert!(r.pass_coverage_floor);
        assert_eq!(r.no_prediction.get("missing"), Some(&1));
    }

    #[test]
    fn empty_predictions_score_the_penalty() {
        let cfg = EvalConfig::new(1234.5).unwrap();
        let r = score(&[], &key(7), &cfg).unwrap();
        assert_eq!(r.truncated_rmse_m, 1234.5);
        assert_eq!(r.coverage, 0.0);
        assert!(!r.pass_coverage_floor);
        assert_eq!(r.rmse_predicted_m, None);
    }

    #[test]
    fn exact_predictions_score_zero() {
        let cfg = EvalConfig::new(500.0).unwrap();
        let preds: Vec<_> = (0..5).map(|i| row(i, Some(truth()))).collect();
        let r = score(&preds, &key(5), &cfg).unwrap();
        assert_eq!(
            (r.coverage, r.rmse_predicted_m, r.truncated_rmse_m),
            (1.0, Some(0.0), 0.0)
        );
    }

    #[test]
    fn invalid_inputs() {
        let cfg = EvalConfig::new(10.0).unwrap();
        assert!(matches!(
            score(&[row(9, None)], &key(2), &cfg),
            Err(EvalError::UnknownRecord(_))
        ));
        assert!(matches!(
            score(&[row(1, None), row(1, None)], &key(2), &cfg),
            Err(EvalError::Duplicate(_))
        ));
        assert!(EvalConfig::new(0.0).is_err());
        assert!(EvalConfig::new(f64::NAN).is_err());
        let bad = EvalConfig {
            min_coverage: 0.0,
            ..cfg
        };
        assert!(score(&[], &key(1), &bad).is_err());
    }

    #[test]
    fn no_prediction_rows_counted_by_reason() {
        let cfg = EvalConfig::new(10.0).unwrap();
        let r = score(&[row(0, None), row(1, Some(truth()))], &key(3), &cfg).unwrap();
        assert_eq!(r.n_predicted, 1);
        assert_eq!(r.no_prediction.get("underdetermined"), Some(&1));
        assert_eq!(r.no_prediction.get("missing"), Some(&1));
    }

    #[test]
    fn json_roundtrip() {
        let cfg = EvalConfig::new(700.0).unwrap();
        let preds = vec![row(0, Some(displaced(1.5, -2.25, 3.125))), row(2, None)];
        let r = score(&preds, &key(4), &cfg)
            .unwrap()
            .with_echo(vec![("seed".into(), "7".into())]);
        assert_eq!(EvalReport::from_json(&r.to_json().unwrap()).unwrap(), r);
        assert!(r.to_text().starts_with("# seed = 7\n"));
    }

    #[test]
    fn percentiles_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), Some(50.0));
        assert_eq!(percentile(&v, 99.0), Some(99.0));
        assert_eq!(percentile(&[4.0], 90.0), Some(4.0));
    }

    proptest! {
        #[test]
        fn random_displacement_error(e in -5e3f64..5e3, n in -5e3f64..5e3, u in -5e3f64..5e3) {
            let norm = (e * e + n * n + u * u).sqrt();
            let err = position_error(&displaced(e, n, u), &truth(), ErrorMetric::Euclidean3d).unwrap();
            prop_assert!((err - norm).abs() <= 1e-6 * norm.max(1.0));
        }

        #[test]
        fn permutation_invariant(errs in prop::collection::vec(0.0f64..2e3, 1..20), seed in any::<u64>()) {
            let cfg = EvalConfig::new(900.0).unwrap();
            let preds: Vec<_> = errs.iter().enumerate().map(|(i, e)| row(i as u64, Some(displaced(*e, 0.0, 0.0)))).collect();
            let mut shuffled = preds.clone();
            let k = seed as usize % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            let k2 = key(errs.len() as u64 + 3);
            prop_assert_eq!(score(&preds, &k2, &cfg).unwrap(), score(&shuffled, &k2, &cfg).unwrap());
        }

        #[test]
        fn adding_predictions_moves_truncated_rmse_toward_their_error(
            errs in prop::collection::vec(0.0f64..3e3, 0..15),
            extra in 0.0f64..3e3,
        ) {
            let penalty = 1500.0;
            let cfg = EvalConfig::new(penalty).unwrap();
            let n = errs.len() as u64 + 5;
            let base: Vec<_> = errs.iter().enumerate().map(|(i, e)| row(i as u64, Some(displaced(*e, 0.0, 0.0)))).collect();
            let mut more = base.clone();
            more.push(row(n - 1, Some(displaced(extra, 0.0, 0.0))));
            let a = score(&base, &key(n), &cfg).unwrap();
            let b = score(&more, &key(n), &cfg).unwrap();
            prop_assert_eq!(b.coverage * n as f64, b.n_predicted as f64);
            if extra < penalty - 1e-6 {
                prop_assert!(b.truncated_rmse_m <= a.truncated_rmse_m + 1e-9);
            } else if extra > penalty + 1e-6 {
                prop_assert!(b.truncated_rmse_m >= a.truncated_rmse_m - 1e-9);
            }
        }
    }
}
