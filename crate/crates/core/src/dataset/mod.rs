//! Three-file subset schema (transmissions, sensors, aircraft), streaming
//! readers and writers, and the preparation steps that turn raw receptions
//! into grouped transmission records.

mod io;
mod mask;
mod prepare;
mod stats;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{EcefPosition, GeoError, GeoPosition};

pub use io::{
    parse_aircraft, parse_answer_key, parse_sensors, parse_transmissions, read_aircraft_file,
    read_sensors_file, write_aircraft, write_answer_key, write_sensors, write_transmissions,
    ColumnMap, DatasetPaths, TimeUnit, TransmissionReader, AIRCRAFT_COLUMNS, ANSWER_KEY_COLUMNS,
    SENSOR_COLUMNS, TRANSMISSION_COLUMNS,
};
pub use mask::{mask_for_eval, AnswerKey, AnswerKeyEntry, EvalMask, MaskedSplit};
pub use prepare::{
    deduplicate, unwrap_counter, verify_consistency, Deduplicator, RawSample, Reception,
    UnwrapError, UnwrapOptions, Verification, DEFAULT_DEDUP_WINDOW_NS, DEFAULT_VERIFY_THRESHOLD_S,
};
pub use stats::{fit_geometric_success, IngestStats};

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }
    };
}

id_newtype!(
    /// Pseudonymous receiver identifier.
    SensorId
);
id_newtype!(
    /// Pseudonymous transponder identifier.
    AircraftId
);
id_newtype!(
    /// Identifier of one grouped transmission.
    RecordId
);

/// Quality flag that distinguishes "checked and false" from "never checked".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Indicator {
    True,
    False,
    #[default]
    Unknown,
}

impl Indicator {
    pub fn parse(field: &str) -> Option<Indicator> {
        match field.trim().to_ascii_lowercase().as_str() {
            "" => Some(Indicator::Unknown),
            "true" | "1" => Some(Indicator::True),
            "false" | "0" => Some(Indicator::False),
            _ => None,
        }
    }

    pub fn as_field(&self) -> &'static str {
        match self {
            Indicator::True => "true",
            Indicator::False => "false",
            Indicator::Unknown => "",
        }
    }

    pub fn is_true(&self) -> bool {
        matches!(self, Indicator::True)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorInfo {
    pub sensor_id: SensorId,
    pub position: GeoPosition,
    /// GPS-synchronised and location-verified.
    pub good: Indicator,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AircraftInfo {
    pub aircraft_id: AircraftId,
    pub position_quality: Indicator,
}

/// One sensor's reception of a transmission.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub sensor_id: SensorId,
    /// Nanoseconds since the start of the recording, on the sensor's own clock.
    pub toa_ns: f64,
    /// Signal strength in dB against an unknown, receiver-specific reference.
    pub rssi_db: f64,
}

/// Position reported by the transponder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AircraftFix {
    pub latitude_deg: f64,
    pub longitude_deg: f64,
    /// Carried for reference, never used in geometry.
    pub baro_altitude_m: Option<f64>,
    pub geo_altitude_m: f64,
}

impl AircraftFix {
    pub fn geodetic(&self) -> GeoPosition {
        GeoPosition::new(self.latitude_deg, self.longitude_deg, self.geo_altitude_m)
    }
}

/// A deduplicated transmission: every reception of one message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionRecord {
    pub record_id: RecordId,
    /// Microseconds since the start of the recording, as seen by the server.
    pub server_time_us: f64,
    pub aircraft_id: AircraftId,
    pub truth: Option<AircraftFix>,
    /// Barometric altitude kept even when the fix is masked.
    pub baro_altitude_m: Option<f64>,
    pub measurements: Vec<Measurement>,
    /// Set when a measurement carries a negative timestamp.
    pub flagged: bool,
}

impl TransmissionRecord {
    pub fn measurement(&self, sensor: SensorId) -> Option<&Measurement> {
        self.measurements.iter().find(|m| m.sensor_id == sensor)
    }

    /// Recomputes `flagged` from the measurements.
    pub fn refresh_flags(&mut self) {
        self.flagged = self.measurements.iter().any(|m| m.toa_ns < 0.0);
    }
}

/// Sensors keyed by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SensorCatalog {
    sensors: BTreeMap<SensorId, SensorInfo>,
    ecef: BTreeMap<SensorId, EcefPosition>,
}

impl SensorCatalog {
    /// Fails on duplicate ids.
    pub fn new(list: Vec<SensorInfo>) -> Result<Self, DatasetError> {
        let mut sensors = BTreeMap::new();
        let mut ecef = BTreeMap::new();
        for s in list {
            if sensors.insert(s.sensor_id, s).is_some() {
                return Err(DatasetError::Integrity {
                    line: None,
                    message: format!("duplicate sensor id {}", s.sensor_id),
                });
            }
            if let Ok(e) = s.position.to_ecef() {
                ecef.insert(s.sensor_id, e);
            }
        }
        Ok(Self { sensors, ecef })
    }

    /// Cartesian position; `None` for unknown ids or unusable coordinates.
    pub fn ecef(&self, id: SensorId) -> Option<EcefPosition> {
        self.ecef.get(&id).copied()
    }

    pub fn get(&self, id: SensorId) -> Option<&SensorInfo> {
        self.sensors.get(&id)
    }

    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SensorInfo> {
        self.sensors.values()
    }

    pub fn good_count(&self) -> usize {
        self.sensors.values().filter(|s| s.good.is_true()).count()
    }
}

/// Aircraft quality flags keyed by id. Missing aircraft read as unknown.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AircraftCatalog {
    aircraft: BTreeMap<AircraftId, AircraftInfo>,
}

impl AircraftCatalog {
    pub fn new(list: Vec<AircraftInfo>) -> Result<Self, DatasetError> {
        let mut aircraft = BTreeMap::new();
        for a in list {
            if aircraft.insert(a.aircraft_id, a).is_some() {
                return Err(DatasetError::Integrity {
                    line: None,
                    message: format!("duplicate aircraft id {}", a.aircraft_id),
                });
            }
        }
        Ok(Self { aircraft })
    }

    pub fn quality(&self, id: AircraftId) -> Indicator {
        self.aircraft
            .get(&id)
            .map(|a| a.position_quality)
            .unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.aircraft.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aircraft.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &AircraftInfo> {
        self.aircraft.values()
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("{}{message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Integrity { line: Option<u64>, message: String },
    #[error("schema mismatch: missing columns {missing:?} (found {found:?})")]
    Schema {
        missing: Vec<String>,
        found: Vec<String>,
    },
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DatasetError {
    pub(crate) fn parse(line: u64, message: impl Into<String>) -> Self {
        DatasetError::Parse {
            line,
            message: message.into(),
        }
    }

    pub(crate) fn integrity(line: Option<u64>, message: impl Into<String>) -> Self {
        DatasetError::Integrity {
            line,
            message: message.into(),
        }
    }
}
