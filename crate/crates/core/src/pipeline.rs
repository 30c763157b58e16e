//! Epoch-by-epoch processing of a time-ordered record stream.
//!
//! Each epoch covers a fixed span of server time. Its records are routed
//! first: records selected by the evaluation mask (and heard widely enough
//! to be worth localizing) lose their position to the answer key, and
//! together with records that never carried one they become targets. The
//! rest feed synchronisation. Trackers then absorb the epoch's training
//! records, a snapshot of them is written, and the targets are localized
//! against the updated pairing graph. Only one epoch of records is held in
//! memory.

use std::io::Write;

use thiserror::Error;

use crate::dataset::{
    AircraftCatalog, AnswerKey, AnswerKeyEntry, DatasetError, EvalMask, SensorCatalog,
    TransmissionRecord,
};
use crate::exec::Exec;
use crate::locate::{Localizer, LocateConfig, NoPrediction, PredictionRow};
use crate::sync::{PairOffsetTracker, SnapshotWriter, SyncConfig, SyncEngine, SyncStats};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid pipeline setting: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub epoch_s: f64,
    /// Share of records withheld for scoring; `None` keeps every position.
    pub eval_fraction: Option<f64>,
    pub mask_seed: u64,
    /// Records heard by fewer sensors are never withheld.
    pub target_min_receivers: usize,
    pub sync: SyncConfig,
    pub locate: LocateConfig,
    pub exec: Exec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            epoch_s: 60.0,
            eval_fraction: Some(0.2),
            mask_seed: 1,
            target_min_receivers: 3,
            sync: SyncConfig::default(),
            locate: LocateConfig::default(),
            exec: Exec::Parallel,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.epoch_s > 0.0 && self.epoch_s.is_finite()) {
            return Err(PipelineError::Config(format!(
                "epoch length {} s",
                self.epoch_s
            )));
        }
        if let Some(f) = self.eval_fraction {
            EvalMask::new(f, self.mask_seed)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineOutput {
    /// One row per target, sorted by record id.
    pub predictions: Vec<PredictionRow>,
    /// Withheld positions, sorted by record id.
    pub answer_key: AnswerKey,
    pub sync: SyncStats,
    /// Tracker states after the last epoch.
    pub trackers: Vec<PairOffsetTracker>,
    pub epochs: u64,
    pub records: u64,
    pub train_records: u64,
}

impl PipelineOutput {
    pub fn converged(&self) -> usize {
        self.predictions
            .iter()
            .filter(|p| p.position.is_some())
            .count()
    }

    pub fn count(&self, reason: NoPrediction) -> usize {
        self.predictions
            .iter()
            .filter(|p| p.reason == Some(reason))
            .count()
    }
}

/// Splits records into sync input and localization targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Router {
    mask: Option<EvalMask>,
    min_receivers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Routed {
    Train(TransmissionRecord),
    /// A record to localize, with its withheld position if it had one.
    Target(TransmissionRecord, Option<AnswerKeyEntry>),
}

impl Router {
    pub fn new(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        Ok(Self {
            mask: cfg
                .eval_fraction
                .map(|f| EvalMask::new(f, cfg.mask_seed))
                .transpose()?,
            min_receivers: cfg.target_min_receivers,
        })
    }

    pub fn route(&self, r: TransmissionRecord) -> Routed {
        let withhold = r.truth.is_some()
            && !r.flagged
            && r.measurements.len() >= self.min_receivers
            && self.mask.is_some_and(|m| m.is_eval(r.record_id));
        match self.mask {
            Some(m) if withhold => {
                let (_, sealed, entry) = m.route(r);
                Routed::Target(sealed, entry)
            }
            _ if r.truth.is_none() => Routed::Target(r, None),
            _ => Routed::Train(r),
        }
    }
}

/// Records of one span of server time.
#[derive(Debug, Clone, PartialEq)]
pub struct Epoch {
    pub index: u64,
    pub end_us: f64,
    pub records: Vec<TransmissionRecord>,
}

/// Groups a time-ordered stream into epochs. A record that arrives late
/// joins the epoch currently open; times before zero fall into epoch 0.
pub struct EpochChunks<I> {
    inner: I,
    epoch_us: f64,
    pending: Option<TransmissionRecord>,
    failed: bool,
}

impl<I> EpochChunks<I>
where
    I: Iterator<Item = Result<TransmissionRecord, DatasetError>>,
{
    pub fn new(records: impl IntoIterator<IntoIter = I>, epoch_s: f64) -> Self {
        Self {
            inner: records.into_iter(),
            epoch_us: epoch_s * 1e6,
            pending: None,
            failed: false,
        }
    }
}

fn epoch_index(r: &TransmissionRecord, epoch_us: f64) -> u64 {
    (r.server_time_us / epoch_us).floor().max(0.0) as u64
}

impl<I> Iterator for EpochChunks<I>
where
    I: Iterator<Item = Result<TransmissionRecord, DatasetError>>,
{
    type Item = Result<Epoch, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let first = match self.pending.take() {
            Some(r) => r,
            None => match self.inner.next()? {
                Ok(r) => r,
                Err(e) => {
                    self.failed = true;
                    return Some(Err(e));
                }
            },
        };
        let index = epoch_index(&first, self.epoch_us);
        let mut records = vec![first];
        for r in self.inner.by_ref() {
            match r {
                Ok(r) if epoch_index(&r, self.epoch_us) > index => {
                    self.pending = Some(r);
                    break;
                }
                Ok(r) => records.push(r),
                Err(e) => {
                    self.failed = true;
                    return Some(Err(e));
                }
            }
        }
        Some(Ok(Epoch {
            index,
            end_us: (index + 1) as f64 * self.epoch_us,
            records,
        }))
    }
}

/// Runs sync and locate over `records`, which should arrive in server-time
/// order.
///
/// When `snapshot` is given, tracker states are appended to it after every
/// epoch.
pub fn run_pipeline<I, W>(
    records: I,
    sensors: &SensorCatalog,
    aircraft: &AircraftCatalog,
    cfg: &PipelineConfig,
    mut snapshot: Option<&mut SnapshotWriter<W>>,
) -> Result<PipelineOutput, PipelineError>
where
    I: IntoIterator<Item = Result<TransmissionRecord, DatasetError>>,
    W: Write,
{
    let router = Router::new(cfg)?;
    let mut engine = SyncEngine::new(cfg.sync);
    let mut localizer = Localizer::new(sensors, cfg.locate);
    let mut out = PipelineOutput::default();

    for epoch in EpochChunks::new(records, cfg.epoch_s) {
        let epoch = epoch?;
        out.epochs += 1;
        out.records += epoch.records.len() as u64;
        let mut train = Vec::new();
        let mut targets = Vec::new();
        for r in epoch.records {
            match router.route(r) {
                Routed::Train(r) => train.push(r),
                Routed::Target(r, key) => {
                    targets.push(r);
                    out.answer_key.extend(key);
                }
            }
        }
        engine.ingest(&train, sensors, aircraft, cfg.exec);
        out.train_records += train.len() as u64;
        if let Some(w) = snapshot.as_deref_mut() {
            w.write_epoch(epoch.index, epoch.end_us, engine.trackers())?;
        }
        if !targets.is_empty() {
            let graph = engine.graph(sensors);
            let results = localizer.localize_batch(&targets, &graph, cfg.exec);
            out.predictions
                .extend(results.iter().map(PredictionRow::from));
        }
    }
    out.sync = *engine.stats();
    out.trackers = engine.into_trackers().into_values().collect();
    out.predictions.sort_by_key(|p| p.record_id);
    out.answer_key.sort_by_key(|k| k.record_id);
    Ok(out)
}
