use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{NoPrediction, RecordOutcome};
use crate::dataset::{DatasetError, RecordId};
use crate::geo::GeoPosition;

pub const PREDICTION_COLUMNS: [&str; 8] = [
    "id",
    "latitude",
    "longitude",
    "geoAltitude",
    "nEquations",
    "rank",
    "residualRmsNs",
    "status",
];

/// One line of the prediction file. Records without a position keep their
/// row with empty coordinates and the reason as status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub record_id: RecordId,
    pub position: Option<GeoPosition>,
    pub n_equations: usize,
    pub rank: Option<usize>,
    pub residual_rms_ns: Option<f64>,
    /// `None` for an emitted position.
    pub reason: Option<NoPrediction>,
}

impl PredictionRow {
    pub fn status(&self) -> &'static str {
        self.reason.map_or("converged", |r| r.as_str())
    }
}

impl From<&RecordOutcome> for PredictionRow {
    fn from(o: &RecordOutcome) -> Self {
        let position = o.prediction().and_then(|p| p.geodetic);
        PredictionRow {
            record_id: o.record_id,
            position,
            n_equations: o.n_equations,
            rank: o.solve.as_ref().map(|s| s.rank),
            residual_rms_ns: o.solve.as_ref().map(|s| s.final_residual_rms_s * 1e9),
            reason: if position.is_some() {
                None
            } else {
                Some(o.reason.unwrap_or(NoPrediction::Infeasible))
            },
        }
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `# key = value` echo lines, the header, then the rows.
pub fn write_predictions<'a, W: Write>(
    mut out: W,
    echo: &[(String, String)],
    rows: impl IntoIterator<Item = &'a PredictionRow>,
) -> Result<W, DatasetError> {
    for (k, v) in echo {
        writeln!(out, "# {k} = {v}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PREDICTION_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.record_id.to_string(),
            opt(r.position.map(|p| p.latitude_deg)),
            opt(r.position.map(|p| p.longitude_deg)),
            opt(r.position.map(|p| p.altitude_m)),
            r.n_equations.to_string(),
            opt(r.rank),
            opt(r.residual_rms_ns),
            r.status().to_string(),
        ])?;
    }
    w.flush()?;
    w.into_inner()
        .map_err(|e| DatasetError::Io(std::io::Error::other(e.to_string())))
}

pub fn read_predictions<R: Read>(stream: R) -> Result<Vec<PredictionRow>, DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(stream);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let idx: Vec<Option<usize>> = PREDICTION_COLUMNS
        .iter()
        .map(|c| header.iter().position(|h| h == c))
        .collect();
    // Only the id and coordinates are required; the diagnostics are optional.
    let missing: Vec<String> = PREDICTION_COLUMNS[..4]
        .iter()
        .zip(&idx)
        .filter(|(_, i)| i.is_none())
        .map(|(c, _)| c.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(DatasetError::Schema {
            missing,
            found: header,
        });
    }
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let get = |k: usize| idx[k].and_then(|i| rec.get(i)).unwrap_or("");
        let num = |k: usize| -> Result<Option<f64>, DatasetError> {
            let s = get(k);
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>().map(Some).map_err(|_| {
                DatasetError::parse(line, format!("{}: bad number {s:?}", PREDICTION_COLUMNS[k]))
            })
        };
        let record_id = get(0)
            .parse::<u64>()
            .map(RecordId)
            .map_err(|_| DatasetError::parse(line, format!("id: bad integer {:?}", get(0))))?;
        let position = match (num(1)?, num(2)?, num(3)?) {
            (Some(lat), Some(lon), Some(alt)) => Some(GeoPosition::new(lat, lon, alt)),
            (None, None, None) => None,
            _ => return Err(DatasetError::parse(line, "partial position")),
        };
        let status = get(7);
        let reason = match status {
            "" | "converged" => None,
            s => Some(
                NoPrediction::parse(s)
                    .ok_or_else(|| DatasetError::parse(line, format!("unknown status {s:?}")))?,
            ),
        };
        if position.is_none() && reason.is_none() && !status.is_empty() {
            return Err(DatasetError::parse(
                line,
                "converged row without a position",
            ));
        }
        let int = |k: usize| -> Result<Option<usize>, DatasetError> {
            let s = get(k);
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<usize>().map(Some).map_err(|_| {
                DatasetError::parse(
                    line,
                    format!("{}: bad integer {s:?}", PREDICTION_COLUMNS[k]),
                )
            })
        };
        out.push(PredictionRow {
            record_id,
            position,
            n_equations: int(4)?.unwrap_or(0),
            rank: int(5)?,
            residual_rms_ns: num(6)?,
            reason: if position.is_none() {
                Some(reason.unwrap_or(NoPrediction::TooFewEquations))
            } else {
                reason
            },
        });
    }
    Ok(out)
}
