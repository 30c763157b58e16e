use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use alp_core::dataset::{
    parse_answer_key, read_aircraft_file, read_sensors_file, write_answer_key, AircraftCatalog,
    ColumnMap, DatasetPaths, IngestStats, SensorCatalog, TransmissionReader,
};
use alp_core::eval::{emit_report, score};
use alp_core::locate::{read_predictions, write_predictions, Localizer, PredictionRow};
use alp_core::pipeline::{EpochChunks, Routed, Router};
use alp_core::sync::{PairGraph, SnapshotReader, SnapshotWriter, SyncEngine};
use alp_core::synth::{generate, reference_scenario, write_world, Scenario, SynthError};
use alp_core::Exec;
use anyhow::{anyhow, Context as _};

use crate::config::{parse_pairs, RunConfig};

pub const SNAPSHOT_FILE: &str = "sync_snapshot.csv";
pub const ANSWER_KEY_FILE: &str = "answer_key.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

/// Settings that must match between `sync` and `locate`, or the targets
/// and the snapshot would describe different runs.
const SHARED_KEYS: [&str; 4] = ["epoch_s", "mask.fraction", "seed", "target_min_receivers"];

/// An error with the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Usage or configuration: exit 1.
    Config(anyhow::Error),
    /// Unreadable or inconsistent data: exit 2.
    Data(anyhow::Error),
    /// Scored fine but below the coverage floor: exit 3.
    Coverage,
}

impl Failure {
    pub fn config(e: impl Into<anyhow::Error>) -> Self {
        Failure::Config(e.into())
    }

    pub fn data(e: impl Into<anyhow::Error>) -> Self {
        Failure::Data(e.into())
    }

    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Data(_) => 2,
            Failure::Coverage => 3,
        }
    }

    pub fn error(&self) -> Option<&anyhow::Error> {
        match self {
            Failure::Config(e) | Failure::Data(e) => Some(e),
            Failure::Coverage => None,
        }
    }
}

trait OrData<T> {
    fn or_data(self, what: impl FnOnce() -> String) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrData<T> for Result<T, E> {
    fn or_data(self, what: impl FnOnce() -> String) -> Result<T, Failure> {
        self.map_err(|e| Failure::Data(e.into().context(what())))
    }
}

pub struct Context {
    cfg: RunConfig,
    out_dir: PathBuf,
    exec: Exec,
    echo: Vec<(String, String)>,
}

impl Context {
    pub fn new(cfg: RunConfig, out_dir: PathBuf) -> Result<Self, Failure> {
        let exec = match cfg.workers {
            1 => Exec::Sequential,
            0 => Exec::Parallel,
            n => {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .map_err(Failure::config)?;
                Exec::Parallel
            }
        };
        std::fs::create_dir_all(&out_dir).or_data(|| format!("creating {}", out_dir.display()))?;
        let mut pipeline = cfg.pipeline;
        pipeline.exec = exec;
        let cfg = RunConfig { pipeline, ..cfg };
        let echo = cfg.echo();
        Ok(Self {
            cfg,
            out_dir,
            exec,
            echo,
        })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn create(&self, path: &Path) -> Result<BufWriter<File>, Failure> {
        File::create(path)
            .map(BufWriter::new)
            .or_data(|| format!("creating {}", path.display()))
    }

    fn echo_text(&self) -> String {
        self.echo
            .iter()
            .map(|(k, v)| format!("# {k} = {v}\n"))
            .collect()
    }

    /// Writes a plain-text report behind the config echo and prints it.
    fn report(&self, name: &str, body: &str) -> Result<(), Failure> {
        let path = self.out(name);
        std::fs::write(&path, self.echo_text() + body)
            .or_data(|| format!("writing {}", path.display()))?;
        print!("{body}");
        Ok(())
    }

    fn with_echo<W: Write>(&self, mut w: W) -> std::io::Result<W> {
        w.write_all(self.echo_text().as_bytes())?;
        Ok(w)
    }
}

struct Input {
    paths: DatasetPaths,
    columns: ColumnMap,
    sensors: SensorCatalog,
    aircraft: AircraftCatalog,
}

impl Input {
    fn open(cfg: &RunConfig) -> Result<Self, Failure> {
        let prefix = cfg.input.as_ref().ok_or_else(|| {
            Failure::config(anyhow!("no input: pass --input PREFIX or set `input`"))
        })?;
        let columns = match &cfg.columns {
            Some(p) => ColumnMap::load(p).or_data(|| format!("column map {}", p.display()))?,
            None => ColumnMap::default(),
        };
        let paths = DatasetPaths::from_prefix(prefix);
        let sensors = read_sensors_file(&paths.sensors, &columns)
            .or_data(|| paths.sensors.display().to_string())?;
        let aircraft = read_aircraft_file(&paths.aircraft, &columns)
            .or_data(|| paths.aircraft.display().to_string())?;
        Ok(Self {
            paths,
            columns,
            sensors,
            aircraft,
        })
    }

    fn records(&self) -> Result<TransmissionReader<File>, Failure> {
        let path = &self.paths.transmissions;
        let file = File::open(path).or_data(|| path.display().to_string())?;
        TransmissionReader::new(file, &self.columns).or_data(|| path.display().to_string())
    }
}

/// The `# key = value` lines at the top of an output file.
fn read_echo(path: &Path) -> Result<Vec<(String, String)>, Failure> {
    let file = File::open(path).or_data(|| format!("opening {}", path.display()))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.or_data(|| path.display().to_string())?;
        match line.strip_prefix('#') {
            Some(rest) if rest.contains('=') => {
                text.push_str(rest);
                text.push('\n');
            }
            Some(_) => {}
            None => break,
        }
    }
    parse_pairs(&text).or_data(|| format!("config echo in {}", path.display()))
}

pub fn ingest(ctx: &Context) -> Result<(), Failure> {
    let input = Input::open(&ctx.cfg)?;
    let mut stats = IngestStats::with_sensors(&input.sensors);
    for r in input.records()? {
        let r = r.or_data(|| input.paths.transmissions.display().to_string())?;
        stats.observe(&r);
    }
    ctx.report("ingest_report.txt", &stats.to_string())
}

fn load_scenario(cfg: &RunConfig) -> Result<Scenario, Failure> {
    let mut sc = match (&cfg.scenario, &cfg.scenario_file) {
        (Some(name), None) => reference_scenario(name).map_err(Failure::config)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).or_data(|| path.display().to_string())?;
            Scenario::from_json(&text).map_err(|e| match e {
                SynthError::Invalid(_) | SynthError::Json(_) => Failure::config(e),
                e => Failure::data(e),
            })?
        }
        (Some(_), Some(_)) => {
            return Err(Failure::config(anyhow!(
                "set synth.scenario or synth.scenario_file, not both"
            )))
        }
        (None, None) => {
            return Err(Failure::config(anyhow!(
                "no scenario: pass --scenario NAME or --scenario-file FILE"
            )))
        }
    };
    if let Some(seed) = cfg.synth_seed {
        sc.rng_seed = seed;
    }
    Ok(sc)
}

pub fn synth(ctx: &Context) -> Result<(), Failure> {
    let sc = load_scenario(&ctx.cfg)?;
    let world = generate(&sc, ctx.exec).map_err(Failure::config)?;
    let prefix = ctx.out(&ctx.cfg.synth_prefix);
    let files = write_world(&world, &sc, &prefix, &ctx.echo)
        .or_data(|| format!("writing {}", prefix.display()))?;
    println!("scenario      {}", sc.name);
    println!("seed          {}", sc.rng_seed);
    println!("sensors       {}", world.sensors.len());
    println!("aircraft      {}", world.aircraft.len());
    println!("records       {}", world.records.len());
    println!("transmissions {}", files.dataset.transmissions.display());
    println!("truth log     {}", files.truth_log.display());
    println!("clock log     {}", files.clock_log.display());
    Ok(())
}

pub fn sync(ctx: &Context) -> Result<(), Failure> {
    let input = Input::open(&ctx.cfg)?;
    let pcfg = ctx.cfg.pipeline;
    let router = Router::new(&pcfg).map_err(Failure::config)?;
    let mut engine = SyncEngine::new(pcfg.sync);
    let snapshot_path = ctx.out(SNAPSHOT_FILE);
    let mut snapshot = SnapshotWriter::new(ctx.create(&snapshot_path)?, &ctx.echo)
        .or_data(|| snapshot_path.display().to_string())?;
    let mut key = Vec::new();
    let (mut epochs, mut train_total, mut targets) = (0u64, 0u64, 0u64);
    for epoch in EpochChunks::new(input.records()?, pcfg.epoch_s) {
        let epoch = epoch.or_data(|| input.paths.transmissions.display().to_string())?;
        epochs += 1;
        let mut train = Vec::new();
        for r in epoch.records {
            match router.route(r) {
                Routed::Train(r) => train.push(r),
                Routed::Target(_, entry) => {
                    targets += 1;
                    key.extend(entry);
                }
            }
        }
        train_total += train.len() as u64;
        engine.ingest(&train, &input.sensors, &input.aircraft, ctx.exec);
        snapshot
            .write_epoch(epoch.index, epoch.end_us, engine.trackers())
            .or_data(|| snapshot_path.display().to_string())?;
    }
    snapshot
        .finish()
        .and_then(|w| w.into_inner().map_err(|e| e.into_error().into()))
        .or_data(|| snapshot_path.display().to_string())?;

    key.sort_by_key(|k| k.record_id);
    let key_path = ctx.out(ANSWER_KEY_FILE);
    let w = ctx
        .with_echo(ctx.create(&key_path)?)
        .or_data(|| key_path.display().to_string())?;
    write_answer_key(w, &key).or_data(|| key_path.display().to_string())?;

    let stats = engine.stats();
    let tracking = engine.trackers().filter(|t| t.is_tracking()).count();
    let mut body = String::new();
    let _ = writeln!(body, "epochs          {epochs}");
    let _ = writeln!(body, "train records   {train_total}");
    let _ = writeln!(body, "targets         {targets}");
    let _ = writeln!(body, "withheld        {}", key.len());
    let _ = writeln!(body, "pairs           {}", engine.trackers().count());
    let _ = writeln!(body, "tracked pairs   {tracking}");
    let _ = writeln!(body, "samples         {}", stats.samples);
    let _ = writeln!(body, "accepted        {}", stats.accepted);
    let _ = writeln!(body, "rejected        {}", stats.rejected);
    let _ = writeln!(body, "rejection rate  {:.6}", stats.rejection_rate());
    let _ = writeln!(body, "reinits         {}", stats.reinits);
    ctx.report("sync_report.txt", &body)
}

fn check_shared(
    snapshot: &Path,
    echo: &[(String, String)],
    ours: &[(String, String)],
) -> Result<(), Failure> {
    let theirs: BTreeMap<&str, &str> = echo.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    let mut diffs = Vec::new();
    for (k, v) in ours {
        if SHARED_KEYS.contains(&k.as_str()) || k.starts_with("sync.") {
            match theirs.get(k.as_str()) {
                Some(t) if t == v => {}
                Some(t) => diffs.push(format!("{k}: snapshot {t}, now {v}")),
                None => diffs.push(format!("{k}: not recorded in snapshot")),
            }
        }
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Failure::config(anyhow!(
            "{} was written with different settings: {}",
            snapshot.display(),
            diffs.join("; ")
        )))
    }
}

pub fn locate(ctx: &Context, snapshot: Option<PathBuf>) -> Result<(), Failure> {
    let snapshot_path = snapshot.unwrap_or_else(|| ctx.out(SNAPSHOT_FILE));
    if !snapshot_path.is_file() {
        return Err(Failure::data(anyhow!(
            "no sync snapshot at {}; run `alp sync` first",
            snapshot_path.display()
        )));
    }
    check_shared(&snapshot_path, &read_echo(&snapshot_path)?, &ctx.echo)?;
    let input = Input::open(&ctx.cfg)?;
    let pcfg = ctx.cfg.pipeline;
    let router = Router::new(&pcfg).map_err(Failure::config)?;
    let file = File::open(&snapshot_path).or_data(|| snapshot_path.display().to_string())?;
    let mut states = SnapshotReader::new(file)
        .or_data(|| snapshot_path.display().to_string())?
        .peekable();
    let mut localizer = Localizer::new(&input.sensors, pcfg.locate);
    // Trackers are never dropped, so an epoch missing from the snapshot
    // means none existed yet; carrying the last one forward is equivalent.
    let mut trackers = Vec::new();
    let mut rows: Vec<PredictionRow> = Vec::new();

    for epoch in EpochChunks::new(input.records()?, pcfg.epoch_s) {
        let epoch = epoch.or_data(|| input.paths.transmissions.display().to_string())?;
        let targets: Vec<_> = epoch
            .records
            .into_iter()
            .filter_map(|r| match router.route(r) {
                Routed::Target(r, _) => Some(r),
                Routed::Train(_) => None,
            })
            .collect();
        while let Some(Ok(s)) = states.peek() {
            if s.epoch > epoch.index {
                break;
            }
            if let Some(Ok(s)) = states.next() {
                trackers = s.trackers;
            }
        }
        if let Some(Err(_)) = states.peek() {
            let e = states
                .next()
                .and_then(Result::err)
                .expect("peeked an error");
            return Err(Failure::data(e).context_data(&snapshot_path));
        }
        if targets.is_empty() {
            continue;
        }
        let graph = PairGraph::new(pcfg.sync, trackers.iter().cloned(), &input.sensors);
        let results = localizer.localize_batch(&targets, &graph, ctx.exec);
        rows.extend(results.iter().map(PredictionRow::from));
    }
    rows.sort_by_key(|p| p.record_id);

    let path = ctx.out(PREDICTIONS_FILE);
    let w = write_predictions(ctx.create(&path)?, &ctx.echo, &rows)
        .or_data(|| path.display().to_string())?;
    w.into_inner()
        .map_err(|e| e.into_error())
        .or_data(|| path.display().to_string())?;

    let converged = rows.iter().filter(|p| p.position.is_some()).count();
    let mut reasons: BTreeMap<&str, usize> = BTreeMap::new();
    for p in &rows {
        *reasons.entry(p.status()).or_default() += 1;
    }
    let mut body = String::new();
    let _ = writeln!(body, "targets         {}", rows.len());
    let _ = writeln!(body, "predicted       {converged}");
    let coverage = if rows.is_empty() {
        0.0
    } else {
        converged as f64 / rows.len() as f64
    };
    let _ = writeln!(body, "coverage        {coverage:.4}");
    for (reason, n) in reasons {
        let _ = writeln!(body, "status          {reason}: {n}");
    }
    ctx.report("locate_report.txt", &body)
}

impl Failure {
    fn context_data(self, path: &Path) -> Self {
        match self {
            Failure::Data(e) => Failure::Data(e.context(path.display().to_string())),
            other => other,
        }
    }
}

pub fn evaluate(
    ctx: &Context,
    predictions: Option<PathBuf>,
    answer_key: Option<PathBuf>,
) -> Result<(), Failure> {
    let penalty = ctx.cfg.penalty_m.ok_or_else(|| {
        Failure::config(anyhow!("eval.penalty_m has no default; pass --penalty-m"))
    })?;
    let eval_cfg = ctx.cfg.eval(penalty).map_err(Failure::config)?;
    let pred_path = predictions.unwrap_or_else(|| ctx.out(PREDICTIONS_FILE));
    let key_path = answer_key.unwrap_or_else(|| ctx.out(ANSWER_KEY_FILE));
    let open = |p: &Path| File::open(p).or_data(|| format!("opening {}", p.display()));
    let rows = read_predictions(open(&pred_path)?).or_data(|| pred_path.display().to_string())?;
    let key = parse_answer_key(open(&key_path)?).or_data(|| key_path.display().to_string())?;

    // Truthless targets get predictions too; they cannot be scored.
    let ids: BTreeSet<_> = key.iter().map(|k| k.record_id).collect();
    let (scored, unscored): (Vec<_>, Vec<_>) =
        rows.into_iter().partition(|p| ids.contains(&p.record_id));
    let report = score(&scored, &key, &eval_cfg)
        .context("scoring")
        .map_err(Failure::Data)?
        .with_echo(ctx.echo.clone());
    let stem = ctx.out("eval_report");
    emit_report(&report, &stem).or_data(|| stem.display().to_string())?;
    print!(
        "{}",
        report
            .to_text()
            .lines()
            .filter(|l| !l.starts_with('#'))
            .fold(String::new(), |s, l| s + l + "\n")
    );
    println!("unscored        {}", unscored.len());
    if report.pass_coverage_floor {
        Ok(())
    } else {
        eprintln!(
            "coverage {:.4} is below the floor {}",
            report.coverage, eval_cfg.min_coverage
        );
        Err(Failure::Coverage)
    }
}
