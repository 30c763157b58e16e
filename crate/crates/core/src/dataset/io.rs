use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use csv::{ReaderBuilder, StringRecord, Writer};

use super::{
    AircraftCatalog, AircraftFix, AircraftId, AircraftInfo, AnswerKeyEntry, DatasetError,
    Indicator, Measurement, RecordId, SensorCatalog, SensorId, SensorInfo, TransmissionRecord,
};
use crate::geo::GeoPosition;

pub const TRANSMISSION_COLUMNS: [&str; 9] = [
    "id",
    "timeAtServer",
    "aircraft",
    "latitude",
    "longitude",
    "baroAltitude",
    "geoAltitude",
    "numMeasurements",
    "measurements",
];
pub const SENSOR_COLUMNS: [&str; 5] = ["serial", "latitude", "longitude", "height", "good"];
pub const AIRCRAFT_COLUMNS: [&str; 2] = ["aircraft", "good"];
pub const ANSWER_KEY_COLUMNS: [&str; 4] = ["id", "latitude", "longitude", "geoAltitude"];

/// Unit of the server timestamp column in a source file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimeUnit {
    Seconds,
    Milliseconds,
    #[default]
    Microseconds,
}

impl TimeUnit {
    fn to_micros(self) -> f64 {
        match self {
            TimeUnit::Seconds => 1e6,
            TimeUnit::Milliseconds => 1e3,
            TimeUnit::Microseconds => 1.0,
        }
    }
}

/// Maps canonical column names onto the headers of a particular release.
///
/// The text form is one `canonical = actual` pair per line; `#` starts a
/// comment. The special key `timeAtServer.unit` takes `s`, `ms` or `us`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ColumnMap {
    renames: BTreeMap<String, String>,
    pub server_time_unit: TimeUnit,
}

impl ColumnMap {
    pub fn parse(text: &str) -> Result<Self, DatasetError> {
        let mut map = ColumnMap::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                DatasetError::parse(
                    idx as u64 + 1,
                    format!("expected `canonical = actual`, got {line:?}"),
                )
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key == "timeAtServer.unit" {
                map.server_time_unit = match value {
                    "s" => TimeUnit::Seconds,
                    "ms" => TimeUnit::Milliseconds,
                    "us" => TimeUnit::Microseconds,
                    other => {
                        return Err(DatasetError::parse(
                            idx as u64 + 1,
                            format!("unknown time unit {other:?}"),
                        ))
                    }
                };
            } else {
                map.renames.insert(key.to_string(), value.to_string());
            }
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn with_rename(mut self, canonical: &str, actual: &str) -> Self {
        self.renames
            .insert(canonical.to_string(), actual.to_string());
        self
    }

    fn actual<'a>(&'a self, canonical: &'a str) -> &'a str {
        self.renames
            .get(canonical)
            .map(String::as_str)
            .unwrap_or(canonical)
    }

    /// Resolves each canonical column to its index in `headers`.
    fn resolve<const N: usize>(
        &self,
        headers: &StringRecord,
        canonical: &[&str; N],
        optional: &[&str],
    ) -> Result<[Option<usize>; N], DatasetError> {
        let found: Vec<String> = headers.iter().map(|h| h.trim().to_string()).collect();
        let mut out = [None; N];
        let mut missing = Vec::new();
        for (slot, name) in out.iter_mut().zip(canonical) {
            let actual = self.actual(name);
            *slot = found.iter().position(|h| h == actual);
            if slot.is_none() && !optional.contains(name) {
                missing.push(actual.to_string());
            }
        }
        if missing.is_empty() {
            Ok(out)
        } else {
            Err(DatasetError::Schema { missing, found })
        }
    }
}

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(r)
}

fn line_of(rec: &StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

fn field(rec: &StringRecord, idx: Option<usize>) -> &str {
    idx.and_then(|i| rec.get(i)).unwrap_or("")
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str, line: u64) -> Result<T, DatasetError> {
    s.parse::<T>()
        .map_err(|_| DatasetError::parse(line, format!("invalid {what} {s:?}")))
}

fn parse_opt_f64(s: &str, what: &str, line: u64) -> Result<Option<f64>, DatasetError> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_num(s, what, line).map(Some)
    }
}

/// Reads a sensors file. Empty `good` fields read as unknown.
pub fn parse_sensors<R: Read>(
    stream: R,
    columns: &ColumnMap,
) -> Result<Vec<SensorInfo>, DatasetError> {
    let mut rdr = csv_reader(stream);
    let idx = columns.resolve(rdr.headers()?, &SENSOR_COLUMNS, &["good"])?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let sensor_id = SensorId(parse_num(field(&rec, idx[0]), "sensor id", line)?);
        let position = GeoPosition::new(
            parse_num(field(&rec, idx[1]), "latitude", line)?,
            parse_num(field(&rec, idx[2]), "longitude", line)?,
            parse_num(field(&rec, idx[3]), "height", line)?,
        );
        position
            .validate()
            .map_err(|e| DatasetError::parse(line, e.to_string()))?;
        let good_field = field(&rec, idx[4]);
        let good = Indicator::parse(good_field).ok_or_else(|| {
            DatasetError::parse(line, format!("invalid indicator {good_field:?}"))
        })?;
        if !seen.insert(sensor_id) {
            return Err(DatasetError::integrity(
                Some(line),
                format!("duplicate sensor id {sensor_id}"),
            ));
        }
        out.push(SensorInfo {
            sensor_id,
            position,
            good,
        });
    }
    Ok(out)
}

pub fn parse_aircraft<R: Read>(
    stream: R,
    columns: &ColumnMap,
) -> Result<Vec<AircraftInfo>, DatasetError> {
    let mut rdr = csv_reader(stream);
    let idx = columns.resolve(rdr.headers()?, &AIRCRAFT_COLUMNS, &["good"])?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let aircraft_id = AircraftId(parse_num(field(&rec, idx[0]), "aircraft id", line)?);
        let good_field = field(&rec, idx[1]);
        let position_quality = Indicator::parse(good_field).ok_or_else(|| {
            DatasetError::parse(line, format!("invalid indicator {good_field:?}"))
        })?;
        if !seen.insert(aircraft_id) {
            return Err(DatasetError::integrity(
                Some(line),
                format!("duplicate aircraft id {aircraft_id}"),
            ));
        }
        out.push(AircraftInfo {
            aircraft_id,
            position_quality,
        });
    }
    Ok(out)
}

pub fn read_sensors_file(path: &Path, columns: &ColumnMap) -> Result<SensorCatalog, DatasetError> {
    SensorCatalog::new(parse_sensors(BufReader::new(File::open(path)?), columns)?)
}

pub fn read_aircraft_file(
    path: &Path,
    columns: &ColumnMap,
) -> Result<AircraftCatalog, DatasetError> {
    AircraftCatalog::new(parse_aircraft(BufReader::new(File::open(path)?), columns)?)
}

/// The three files of one subset: `P.csv`, `P_sensors.csv`, `P_aircraft.csv`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPaths {
    pub transmissions: PathBuf,
    pub sensors: PathBuf,
    pub aircraft: PathBuf,
}

impl DatasetPaths {
    /// `prefix` may carry a directory, e.g. `data/set_1`.
    pub fn from_prefix(prefix: &Path) -> Self {
        let with = |suffix: &str| {
            let mut s = prefix.as_os_str().to_owned();
            s.push(suffix);
            PathBuf::from(s)
        };
        Self {
            transmissions: with(".csv"),
            sensors: with("_sensors.csv"),
            aircraft: with("_aircraft.csv"),
        }
    }
}

/// Streaming reader over a transmissions file; holds one row at a time.
pub struct TransmissionReader<R: Read> {
    rdr: csv::Reader<R>,
    idx: [Option<usize>; 9],
    time_scale: f64,
    row: StringRecord,
}

impl<R: Read> TransmissionReader<R> {
    pub fn new(stream: R, columns: &ColumnMap) -> Result<Self, DatasetError> {
        let mut rdr = csv_reader(stream);
        let idx = columns.resolve(
            rdr.headers()?,
            &TRANSMISSION_COLUMNS,
            &["baroAltitude", "numMeasurements"],
        )?;
        Ok(Self {
            rdr,
            idx,
            time_scale: columns.server_time_unit.to_micros(),
            row: StringRecord::new(),
        })
    }

    fn decode(&self) -> Result<TransmissionRecord, DatasetError> {
        let rec = &self.row;
        let idx = &self.idx;
        let line = line_of(rec);
        let record_id = RecordId(parse_num(field(rec, idx[0]), "id", line)?);
        let server_time_us =
            parse_num::<f64>(field(rec, idx[1]), "timeAtServer", line)? * self.time_scale;
        let aircraft_id = AircraftId(parse_num(field(rec, idx[2]), "aircraft", line)?);
        let lat = parse_opt_f64(field(rec, idx[3]), "latitude", line)?;
        let lon = parse_opt_f64(field(rec, idx[4]), "longitude", line)?;
        let baro_altitude_m = parse_opt_f64(field(rec, idx[5]), "baroAltitude", line)?;
        let geo = parse_opt_f64(field(rec, idx[6]), "geoAltitude", line)?;
        let truth = match (lat, lon, geo) {
            (Some(latitude_deg), Some(longitude_deg), Some(geo_altitude_m)) => Some(AircraftFix {
                latitude_deg,
                longitude_deg,
                baro_altitude_m,
                geo_altitude_m,
            }),
            (None, None, None) => None,
            _ => {
                return Err(DatasetError::parse(
                    line,
                    "latitude, longitude and geoAltitude must be all present or all empty",
                ))
            }
        };
        let raw: Vec<(u64, f64, Option<f64>)> = serde_json::from_str(field(rec, idx[8]))
            .map_err(|e| DatasetError::parse(line, format!("measurements column: {e}")))?;
        if let Some(i) = idx[7] {
            let declared: usize = parse_num(field(rec, Some(i)), "numMeasurements", line)?;
            if declared != raw.len() {
                return Err(DatasetError::integrity(
                    Some(line),
                    format!("numMeasurements is {declared} but {} listed", raw.len()),
                ));
            }
        }
        if raw.len() < 2 {
            return Err(DatasetError::integrity(
                Some(line),
                format!(
                    "record {record_id} has {} measurement(s), need at least 2",
                    raw.len()
                ),
            ));
        }
        let mut seen = HashSet::with_capacity(raw.len());
        let mut measurements = Vec::with_capacity(raw.len());
        for (sensor, toa_ns, rssi) in raw {
            if !seen.insert(sensor) {
                return Err(DatasetError::integrity(
                    Some(line),
                    format!("record {record_id} lists sensor {sensor} twice"),
                ));
            }
            measurements.push(Measurement {
                sensor_id: SensorId(sensor),
                toa_ns,
                rssi_db: rssi.unwrap_or(f64::NAN),
            });
        }
        let mut record = TransmissionRecord {
            record_id,
            server_time_us,
            aircraft_id,
            truth,
            baro_altitude_m,
            measurements,
            flagged: false,
        };
        record.refresh_flags();
        Ok(record)
    }
}

impl<R: Read> Iterator for TransmissionReader<R> {
    type Item = Result<TransmissionRecord, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.rdr.read_record(&mut self.row) {
            Ok(true) => Some(self.decode()),
            Ok(false) => None,
            Err(e) => Some(Err(e.into())),
        }
    }
}

/// Opens a streaming iterator over a transmissions file.
pub fn parse_transmissions<R: Read>(
    stream: R,
    columns: &ColumnMap,
) -> Result<TransmissionReader<R>, DatasetError> {
    TransmissionReader::new(stream, columns)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn measurements_json(ms: &[Measurement]) -> String {
    let mut s = String::with_capacity(ms.len() * 32);
    s.push('[');
    for (i, m) in ms.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let rssi = if m.rssi_db.is_finite() {
            m.rssi_db.to_string()
        } else {
            "null".to_string()
        };
        s.push_str(&format!("[{},{},{}]", m.sensor_id, m.toa_ns, rssi));
    }
    s.push(']');
    s
}

/// Writes a header plus every record.
pub fn write_transmissions<'a, W: Write>(
    out: W,
    records: impl IntoIterator<Item = &'a TransmissionRecord>,
) -> Result<(), DatasetError> {
    let mut w = Writer::from_writer(out);
    w.write_record(TRANSMISSION_COLUMNS)?;
    for r in records {
        let (lat, lon, geo) = match &r.truth {
            Some(t) => (
                t.latitude_deg.to_string(),
                t.longitude_deg.to_string(),
                t.geo_altitude_m.to_string(),
            ),
            None => Default::default(),
        };
        let baro = r
            .truth
            .and_then(|t| t.baro_altitude_m)
            .or(r.baro_altitude_m);
        w.write_record([
            r.record_id.to_string(),
            r.server_time_us.to_string(),
            r.aircraft_id.to_string(),
            lat,
            lon,
            fmt_opt(baro),
            geo,
            r.measurements.len().to_string(),
            measurements_json(&r.measurements),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sensors<'a, W: Write>(
    out: W,
    sensors: impl IntoIterator<Item = &'a SensorInfo>,
) -> Result<(), DatasetError> {
    let mut w = Writer::from_writer(out);
    w.write_record(SENSOR_COLUMNS)?;
    for s in sensors {
        w.write_record([
            s.sensor_id.to_string(),
            s.position.latitude_deg.to_string(),
            s.position.longitude_deg.to_string(),
            s.position.altitude_m.to_string(),
            s.good.as_field().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_aircraft<'a, W: Write>(
    out: W,
    aircraft: impl IntoIterator<Item = &'a AircraftInfo>,
) -> Result<(), DatasetError> {
    let mut w = Writer::from_writer(out);
    w.write_record(AIRCRAFT_COLUMNS)?;
    for a in aircraft {
        w.write_record([
            a.aircraft_id.to_string(),
            a.position_quality.as_field().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_answer_key<'a, W: Write>(
    out: W,
    entries: impl IntoIterator<Item = &'a AnswerKeyEntry>,
) -> Result<(), DatasetError> {
    let mut w = Writer::from_writer(out);
    w.write_record(ANSWER_KEY_COLUMNS)?;
    for e in entries {
        w.write_record([
            e.record_id.to_string(),
            e.position.latitude_deg.to_string(),
            e.position.longitude_deg.to_string(),
            e.position.altitude_m.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_answer_key<R: Read>(stream: R) -> Result<Vec<AnswerKeyEntry>, DatasetError> {
    let mut rdr = csv_reader(stream);
    let idx = ColumnMap::default().resolve(rdr.headers()?, &ANSWER_KEY_COLUMNS, &[])?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        out.push(AnswerKeyEntry {
            record_id: RecordId(parse_num(field(&rec, idx[0]), "id", line)?),
            position: GeoPosition::new(
                parse_num(field(&rec, idx[1]), "latitude", line)?,
                parse_num(field(&rec, idx[2]), "longitude", line)?,
                parse_num(field(&rec, idx[3]), "geoAltitude", line)?,
            ),
        });
    }
    Ok(out)
}
