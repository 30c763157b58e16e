use std::collections::BTreeMap;

use alp_core::dataset::{AircraftCatalog, RecordId, SensorCatalog, SensorId};
use alp_core::eval::{position_error, ErrorMetric};
use alp_core::locate::NoPrediction;
use alp_core::pipeline::{run_pipeline, PipelineConfig, PipelineOutput};
use alp_core::sync::{SensorPair, SnapshotWriter};
use alp_core::synth::{
    generate, noisy_grid, reference_scenario, NoisyGridOptions, Scenario, World,
};
use alp_core::Exec;

fn run(sc: &Scenario, cfg: &PipelineConfig) -> (World, PipelineOutput) {
    let world = generate(sc, Exec::Parallel).unwrap();
    let sensors = SensorCatalog::new(world.sensors.clone()).unwrap();
    let aircraft = AircraftCatalog::new(world.aircraft.clone()).unwrap();
    let out = run_pipeline(
        world.records.iter().cloned().map(Ok),
        &sensors,
        &aircraft,
        cfg,
        None::<&mut SnapshotWriter<Vec<u8>>>,
    )
    .unwrap();
    (world, out)
}

fn max_error_m(world: &World, out: &PipelineOutput) -> f64 {
    let truth: BTreeMap<RecordId, _> = world
        .truth_log
        .iter()
        .map(|t| (t.record_id, t.position))
        .collect();
    out.predictions
        .iter()
        .filter_map(|p| {
            p.position.map(|g| {
                position_error(&g, &truth[&p.record_id], ErrorMetric::Euclidean3d).unwrap()
            })
        })
        .fold(0.0, f64::max)
}

#[test]
fn exact_tetra_closes() {
    let (world, out) = run(
        &reference_scenario("exact-tetra").unwrap(),
        &PipelineConfig::default(),
    );
    assert!(!out.answer_key.is_empty());
    assert_eq!(out.predictions.len(), out.answer_key.len());
    assert_eq!(out.sync.rejected, 0);
    let err = max_error_m(&world, &out);
    assert!(err < 0.01, "max error {err} m");
    // The first epoch's targets precede any tracking; later ones all converge.
    let late: Vec<_> = out
        .predictions
        .iter()
        .filter(|p| p.record_id.0 > 200)
        .collect();
    assert!(
        late.iter().all(|p| p.position.is_some()),
        "{:?}",
        late.iter().find(|p| p.position.is_none())
    );
}

#[test]
fn zero_noise_grid_closes() {
    let (world, out) = run(
        &noisy_grid(NoisyGridOptions::zero_noise()),
        &PipelineConfig::default(),
    );
    assert_eq!(out.converged(), out.predictions.len());
    assert!(max_error_m(&world, &out) < 0.01);
    assert_eq!(out.trackers.len(), 66);
}

#[test]
fn fig5_target_uses_four_pairs() {
    let cfg = PipelineConfig {
        eval_fraction: None,
        ..PipelineConfig::default()
    };
    let (world, out) = run(&reference_scenario("fig5").unwrap(), &cfg);
    let edges: Vec<SensorPair> = out
        .trackers
        .iter()
        .filter(|t| t.is_tracking())
        .map(|t| t.pair)
        .collect();
    let want: Vec<SensorPair> = [(5, 6), (6, 7), (6, 8), (7, 8)]
        .iter()
        .map(|&(a, b)| SensorPair::new(SensorId(a), SensorId(b)).unwrap().0)
        .collect();
    assert_eq!(edges, want);
    assert!(!out.predictions.is_empty());
    assert!(out
        .predictions
        .iter()
        .all(|p| p.n_equations == 4 && p.position.is_some()));
    assert!(max_error_m(&world, &out) < 0.01);
}

#[test]
fn collinear_is_underdetermined() {
    let (_, out) = run(
        &reference_scenario("collinear").unwrap(),
        &PipelineConfig::default(),
    );
    let attempted: Vec<_> = out
        .predictions
        .iter()
        .filter(|p| p.reason != Some(NoPrediction::TooFewEquations))
        .collect();
    assert!(!attempted.is_empty());
    assert!(attempted
        .iter()
        .all(|p| p.reason == Some(NoPrediction::Underdetermined)));
}

#[test]
fn modes_agree() {
    let sc = reference_scenario("noisy-grid").unwrap();
    let seq = PipelineConfig {
        exec: Exec::Sequential,
        ..PipelineConfig::default()
    };
    let (_, a) = run(&sc, &seq);
    let (_, b) = run(&sc, &PipelineConfig::default());
    assert_eq!(a, b);
}
