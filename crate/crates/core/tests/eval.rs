use alp_core::dataset::{parse_answer_key, write_answer_key, AnswerKeyEntry, RecordId};
use alp_core::eval::{score, ErrorMetric, EvalConfig};
use alp_core::geo::GeoPosition;
use alp_core::locate::{read_predictions, write_predictions, NoPrediction, PredictionRow};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Written out here rather than borrowed from the geo module.
fn ecef(p: &GeoPosition) -> [f64; 3] {
    let a = 6_378_137.0;
    let f = 1.0 / 298.257_223_563;
    let e2 = f * (2.0 - f);
    let (lat, lon) = (p.latitude_deg.to_radians(), p.longitude_deg.to_radians());
    let n = a / (1.0 - e2 * lat.sin().powi(2)).sqrt();
    [
        (n + p.altitude_m) * lat.cos() * lon.cos(),
        (n + p.altitude_m) * lat.cos() * lon.sin(),
        (n * (1.0 - e2) + p.altitude_m) * lat.sin(),
    ]
}

fn errors(pred: &GeoPosition, truth: &GeoPosition) -> (f64, f64) {
    let (a, b) = (ecef(pred), ecef(truth));
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let (lat, lon) = (
        truth.latitude_deg.to_radians(),
        truth.longitude_deg.to_radians(),
    );
    let up = [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()];
    let norm2 = d.iter().map(|x| x * x).sum::<f64>();
    let vertical = d.iter().zip(up).map(|(x, u)| x * u).sum::<f64>();
    (norm2.sqrt(), (norm2 - vertical * vertical).max(0.0).sqrt())
}

struct Case {
    key: Vec<AnswerKeyEntry>,
    rows: Vec<PredictionRow>,
    /// (3D, 2D) error of every emitted position.
    errs: Vec<(f64, f64)>,
}

fn case(seed: u64, n: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut key = Vec::new();
    let mut rows = Vec::new();
    let mut errs = Vec::new();
    for i in 0..n {
        let truth = GeoPosition::new(
            rng.random_range(40.0..55.0),
            rng.random_range(-5.0..15.0),
            rng.random_range(500.0..12_000.0),
        );
        key.push(AnswerKeyEntry {
            record_id: RecordId(i),
            position: truth,
        });
        let roll: f64 = rng.random();
        if roll < 0.1 {
            // Absent from the prediction file entirely.
            continue;
        }
        let position = (roll >= 0.3).then(|| {
            GeoPosition::new(
                truth.latitude_deg + rng.random_range(-0.01..0.01),
                truth.longitude_deg + rng.random_range(-0.01..0.01),
                truth.altitude_m + rng.random_range(-300.0..300.0),
            )
        });
        if let Some(p) = &position {
            errs.push(errors(p, &truth));
        }
        rows.push(PredictionRow {
            record_id: RecordId(i),
            position,
            n_equations: 3,
            rank: Some(3),
            residual_rms_ns: Some(12.5),
            reason: position.is_none().then_some(NoPrediction::Diverged),
        });
    }
    Case { key, rows, errs }
}

fn truncated(errs: impl Iterator<Item = f64>, n: usize, penalty: f64) -> f64 {
    let (mut ss, mut k) = (0.0, 0);
    for e in errs {
        ss += e * e;
        k += 1;
    }
    ((ss + (n - k) as f64 * penalty * penalty) / n as f64).sqrt()
}

#[test]
fn scores_match_independent_recomputation() {
    let c = case(42, 100);
    let penalty = 1_500.0;
    for metric in [ErrorMetric::Euclidean3d, ErrorMetric::Horizontal2d] {
        let cfg = EvalConfig {
            metric,
            ..EvalConfig::new(penalty).unwrap()
        };
        let r = score(&c.rows, &c.key, &cfg).unwrap();
        let pick = |e: &(f64, f64)| {
            if metric == ErrorMetric::Euclidean3d {
                e.0
            } else {
                e.1
            }
        };
        let want = truncated(c.errs.iter().map(pick), 100, penalty);
        assert!(
            (r.truncated_rmse_m - want).abs() < 1e-6 * want,
            "{metric:?}"
        );
        let other = truncated(
            c.errs.iter().map(|e| {
                if metric == ErrorMetric::Euclidean3d {
                    e.1
                } else {
                    e.0
                }
            }),
            100,
            penalty,
        );
        assert!((r.other_metric.truncated_rmse_m - other).abs() < 1e-6 * other);
        let rmse =
            (c.errs.iter().map(|e| pick(e).powi(2)).sum::<f64>() / c.errs.len() as f64).sqrt();
        assert!((r.rmse_predicted_m.unwrap() - rmse).abs() < 1e-6 * rmse);
        assert_eq!(r.n_eligible, 100);
        assert_eq!(r.n_predicted, c.errs.len() as u64);
        assert_eq!(r.coverage, c.errs.len() as f64 / 100.0);
        let diverged = c.rows.iter().filter(|p| p.position.is_none()).count() as u64;
        assert_eq!(r.no_prediction.get("diverged"), Some(&diverged));
        assert_eq!(
            r.no_prediction.get("missing"),
            Some(&(100 - c.rows.len() as u64))
        );
    }
}

#[test]
fn scores_survive_the_file_round_trip() {
    let c = case(7, 100);
    let cfg = EvalConfig::new(2_000.0).unwrap();
    let echo = vec![("seed".to_string(), "7".to_string())];
    let buf = write_predictions(Vec::new(), &echo, &c.rows).unwrap();
    let rows = read_predictions(buf.as_slice()).unwrap();
    let mut key_buf = Vec::new();
    write_answer_key(&mut key_buf, &c.key).unwrap();
    let key = parse_answer_key(key_buf.as_slice()).unwrap();
    assert_eq!(
        score(&rows, &key, &cfg).unwrap(),
        score(&c.rows, &c.key, &cfg).unwrap()
    );
}

#[test]
fn worked_two_record_example() {
    // One record 100 m high, one unpredicted at a 1000 m penalty.
    let truth = GeoPosition::new(50.0, 10.0, 10_000.0);
    let key: Vec<_> = (0..2)
        .map(|i| AnswerKeyEntry {
            record_id: RecordId(i),
            position: truth,
        })
        .collect();
    let rows = vec![PredictionRow {
        record_id: RecordId(0),
        position: Some(GeoPosition::new(50.0, 10.0, 10_100.0)),
        n_equations: 3,
        rank: Some(3),
        residual_rms_ns: None,
        reason: None,
    }];
    let r = score(&rows, &key, &EvalConfig::new(1_000.0).unwrap()).unwrap();
    assert!(
        (r.truncated_rmse_m - 710.6335).abs() < 0.01,
        "{}",
        r.truncated_rmse_m
    );
    assert_eq!(
        score(&[], &key, &EvalConfig::new(1_000.0).unwrap())
            .unwrap()
            .truncated_rmse_m,
        1_000.0
    );
}
