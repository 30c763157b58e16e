use std::collections::BTreeMap;

use super::solve::{solve_with_hint, vertical_dilution, AltitudeHint};
use super::{
    assemble_equations, initial_guess, LocalizationResult, LocateConfig, NoPrediction, SolveStatus,
};
use crate::dataset::{AircraftId, RecordId, SensorCatalog, TransmissionRecord};
use crate::exec::Exec;
use crate::geo::{EcefPosition, GeoPosition};
use crate::sync::PairGraph;

/// Last accepted estimate for one aircraft.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackState {
    pub position: EcefPosition,
    pub server_time_us: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordOutcome {
    pub record_id: RecordId,
    pub aircraft_id: AircraftId,
    pub n_equations: usize,
    /// The attempted solve, if one ran.
    pub solve: Option<LocalizationResult>,
    /// Set whenever no position is emitted.
    pub reason: Option<NoPrediction>,
}

impl RecordOutcome {
    /// The emitted position; only converged solves qualify.
    pub fn prediction(&self) -> Option<&LocalizationResult> {
        match (&self.solve, self.reason) {
            (Some(r), None) => Some(r),
            _ => None,
        }
    }
}

/// Localizes records against a frozen pair graph, remembering each
/// aircraft's last estimate as the next starting point.
#[derive(Debug, Clone)]
pub struct Localizer<'a> {
    sensors: &'a SensorCatalog,
    cfg: LocateConfig,
    cache: BTreeMap<AircraftId, TrackState>,
}

fn localize_one(
    r: &TransmissionRecord,
    graph: &PairGraph,
    sensors: &SensorCatalog,
    cfg: &LocateConfig,
    prev: Option<&TrackState>,
) -> RecordOutcome {
    let assembly = assemble_equations(r, graph, sensors, cfg);
    let eqs = assembly.equations;
    let mut out = RecordOutcome {
        record_id: r.record_id,
        aircraft_id: r.aircraft_id,
        n_equations: eqs.len(),
        solve: None,
        reason: None,
    };
    if eqs.len() < cfg.min_equations.max(1) {
        out.reason = Some(NoPrediction::TooFewEquations);
        return out;
    }
    let Ok(guess) = initial_guess(r, sensors, prev, cfg) else {
        out.reason = Some(NoPrediction::NoGuess);
        return out;
    };
    let (mut result, _) = solve_with_hint(&eqs, guess, cfg, None);
    if let (SolveStatus::Converged, Some(g), Some(baro)) =
        (result.status, result.geodetic, r.baro_altitude_m)
    {
        let target = baro + cfg.baro_offset_m;
        let miss = |alt: f64| (alt - target).abs();
        if miss(g.altitude_m) > cfg.baro_mirror_tolerance_m {
            if let Ok(start) = GeoPosition::new(g.latitude_deg, g.longitude_deg, target).to_ecef() {
                let (other, _) = solve_with_hint(&eqs, start, cfg, None);
                let closer = other
                    .geodetic
                    .is_some_and(|o| miss(o.altitude_m) < miss(g.altitude_m));
                if other.status == SolveStatus::Converged && closer {
                    result = other;
                }
            }
        }
    }
    if cfg.baro_constraint && result.status == SolveStatus::Converged {
        if let Some(baro) = r.baro_altitude_m {
            if vertical_dilution(&result, &eqs) > cfg.vdop_threshold {
                let hint = AltitudeHint {
                    altitude_m: baro + cfg.baro_offset_m,
                    sigma_m: cfg.baro_sigma_m,
                };
                let (pinned, _) = solve_with_hint(&eqs, result.position, cfg, Some(hint));
                if pinned.status == SolveStatus::Converged {
                    result = pinned;
                }
            }
        }
    }
    out.reason = NoPrediction::from_status(result.status);
    out.solve = Some(result);
    out
}

impl<'a> Localizer<'a> {
    pub fn new(sensors: &'a SensorCatalog, cfg: LocateConfig) -> Self {
        Self {
            sensors,
            cfg,
            cache: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &LocateConfig {
        &self.cfg
    }

    pub fn track(&self, aircraft: AircraftId) -> Option<&TrackState> {
        self.cache.get(&aircraft)
    }

    fn remember(cache: &mut Option<TrackState>, r: &TransmissionRecord, out: &RecordOutcome) {
        if let Some(p) = out.prediction() {
            *cache = Some(TrackState {
                position: p.position,
                server_time_us: r.server_time_us,
            });
        }
    }

    pub fn localize(&mut self, r: &TransmissionRecord, graph: &PairGraph) -> RecordOutcome {
        let mut state = self.cache.get(&r.aircraft_id).copied();
        let out = localize_one(r, graph, self.sensors, &self.cfg, state.as_ref());
        Self::remember(&mut state, r, &out);
        if let Some(s) = state {
            self.cache.insert(r.aircraft_id, s);
        }
        out
    }

    /// Localizes a batch, one worker per aircraft, each aircraft's records in
    /// server-time order. Output is sorted by record id.
    pub fn localize_batch(
        &mut self,
        records: &[TransmissionRecord],
        graph: &PairGraph,
        exec: Exec,
    ) -> Vec<RecordOutcome> {
        let mut groups: BTreeMap<AircraftId, Vec<usize>> = BTreeMap::new();
        for (k, r) in records.iter().enumerate() {
            groups.entry(r.aircraft_id).or_default().push(k);
        }
        let mut work: Vec<(AircraftId, Option<TrackState>, Vec<usize>)> = groups
            .into_iter()
            .map(|(a, mut idx)| {
                idx.sort_by(|&x, &y| {
                    records[x]
                        .server_time_us
                        .total_cmp(&records[y].server_time_us)
                        .then(records[x].record_id.cmp(&records[y].record_id))
                });
                (a, self.cache.get(&a).copied(), idx)
            })
            .collect();
        let (sensors, cfg) = (self.sensors, self.cfg);
        let results = exec.map_mut(&mut work, |(_, state, idx)| {
            idx.iter()
                .map(|&k| {
                    let r = &records[k];
                    let out = localize_one(r, graph, sensors, &cfg, state.as_ref());
                    Self::remember(state, r, &out);
                    out
                })
                .collect::<Vec<_>>()
        });
        for (a, state, _) in work {
            if let Some(s) = state {
                self.cache.insert(a, s);
            }
        }
        let mut out: Vec<RecordOutcome> = results.into_iter().flatten().collect();
        out.sort_by_key(|o| o.record_id);
        out
    }
}

/// Sequential localization of a time-ordered stream against one graph.
pub fn localize_stream<'a, I>(
    records: I,
    graph: &'a PairGraph,
    sensors: &'a SensorCatalog,
    cfg: LocateConfig,
) -> impl Iterator<Item = RecordOutcome> + 'a
where
    I: IntoIterator<Item = TransmissionRecord>,
    I::IntoIter: 'a,
{
    let mut loc = Localizer::new(sensors, cfg);
    records.into_iter().map(move |r| loc.localize(&r, graph))
}
