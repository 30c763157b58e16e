use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{ClockRow, Scenario, SynthError, TruthRow, World};
use crate::dataset::{write_aircraft, write_sensors, write_transmissions, DatasetPaths};

pub const TRUTH_LOG_COLUMNS: [&str; 7] = [
    "id",
    "aircraft",
    "emissionNs",
    "latitude",
    "longitude",
    "geoAltitude",
    "ecef",
];
pub const CLOCK_LOG_COLUMNS: [&str; 7] = [
    "id",
    "sensor",
    "trueArrivalNs",
    "clockErrorNs",
    "jitterNs",
    "outlierNs",
    "toaNs",
];

/// Everything [`write_world`] produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorldFiles {
    pub dataset: DatasetPaths,
    pub truth_log: PathBuf,
    pub clock_log: PathBuf,
    pub scenario: PathBuf,
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create(path: &Path, echo: &[(String, String)]) -> Result<BufWriter<File>, SynthError> {
    let mut w = BufWriter::new(File::create(path)?);
    for (k, v) in echo {
        writeln!(w, "# {k} = {v}")?;
    }
    Ok(w)
}

fn write_truth<W: Write>(out: W, rows: &[TruthRow]) -> Result<(), SynthError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRUTH_LOG_COLUMNS).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.record_id.to_string(),
            r.aircraft_id.to_string(),
            r.emission_ns.to_string(),
            r.position.latitude_deg.to_string(),
            r.position.longitude_deg.to_string(),
            r.position.altitude_m.to_string(),
            format!("[{},{},{}]", r.ecef.x_m, r.ecef.y_m, r.ecef.z_m),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_clocks<W: Write>(out: W, rows: &[ClockRow]) -> Result<(), SynthError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CLOCK_LOG_COLUMNS).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.record_id.to_string(),
            r.sensor_id.to_string(),
            r.true_arrival_ns.to_string(),
            r.clock_error_ns.to_string(),
            r.jitter_ns.to_string(),
            r.outlier_ns.to_string(),
            r.toa_ns.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> SynthError {
    SynthError::Io(std::io::Error::other(e.to_string()))
}

/// Writes the three dataset files under `prefix` plus `_truthlog.csv`,
/// `_clocklog.csv` and the scenario itself as `_scenario.json`. Every CSV
/// starts with the `echo` lines as `#` comments.
pub fn write_world(
    world: &World,
    scenario: &Scenario,
    prefix: &Path,
    echo: &[(String, String)],
) -> Result<WorldFiles, SynthError> {
    let files = WorldFiles {
        dataset: DatasetPaths::from_prefix(prefix),
        truth_log: with_suffix(prefix, "_truthlog.csv"),
        clock_log: with_suffix(prefix, "_clocklog.csv"),
        scenario: with_suffix(prefix, "_scenario.json"),
    };
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_transmissions(create(&files.dataset.transmissions, echo)?, &world.records)?;
    write_sensors(create(&files.dataset.sensors, echo)?, &world.sensors)?;
    write_aircraft(create(&files.dataset.aircraft, echo)?, &world.aircraft)?;
    write_truth(create(&files.truth_log, echo)?, &world.truth_log)?;
    write_clocks(create(&files.clock_log, echo)?, &world.clock_log)?;
    let mut js = BufWriter::new(File::create(&files.scenario)?);
    js.write_all(scenario.to_json()?.as_bytes())?;
    js.write_all(b"\n")?;
    js.flush()?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{parse_transmissions, read_aircraft_file, read_sensors_file, ColumnMap};
    use crate::exec::Exec;
    use crate::synth::{generate, reference_scenario};
    use std::io::BufReader;

    #[test]
    fn files_read_back() {
        let sc = reference_scenario("fig5").unwrap();
        let w = generate(&sc, Exec::Parallel).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let echo = vec![("scenario".to_string(), "fig5".to_string())];
        let files = write_world(&w, &sc, &dir.path().join("out/set_9"), &echo).unwrap();
        let cols = ColumnMap::default();
        assert_eq!(
            read_sensors_file(&files.dataset.sensors, &cols)
                .unwrap()
                .len(),
            8
        );
        assert_eq!(
            read_aircraft_file(&files.dataset.aircraft, &cols)
                .unwrap()
                .len(),
            3
        );
        let back: Vec<_> = parse_transmissions(
            BufReader::new(File::open(&files.dataset.transmissions).unwrap()),
            &cols,
        )
        .unwrap()
        .collect::<Result<_, _>>()
        .unwrap();
        assert_eq!(back, w.records);
        let text = std::fs::read_to_string(&files.clock_log).unwrap();
        assert!(text.starts_with("# scenario = fig5\n"));
        let js = std::fs::read_to_string(&files.scenario).unwrap();
        assert_eq!(Scenario::from_json(&js).unwrap(), sc);
    }
}
