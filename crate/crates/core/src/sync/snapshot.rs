//! Tracker-state checkpoints, one block of rows per epoch.

use std::io::{Read, Write};

use super::{PairOffsetTracker, SensorPair, TrackerStatus};
use crate::dataset::{DatasetError, SensorId};

pub const SNAPSHOT_COLUMNS: [&str; 17] = [
    "epoch",
    "epochEndUs",
    "sensorA",
    "sensorB",
    "status",
    "lastUpdateNs",
    "offsetNs",
    "driftNsPerS",
    "varOffset",
    "covOffsetDrift",
    "varDrift",
    "measurementVar",
    "innovationVar",
    "consecutiveRejects",
    "accepted",
    "rejected",
    "reinits",
];

/// Every tracker as it stood at the end of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotEpoch {
    pub epoch: u64,
    pub end_us: f64,
    pub trackers: Vec<PairOffsetTracker>,
}

pub struct SnapshotWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> SnapshotWriter<W> {
    /// Writes `# key = value` lines ahead of the header.
    pub fn new(mut out: W, echo: &[(String, String)]) -> Result<Self, DatasetError> {
        for (k, v) in echo {
            writeln!(out, "# {k} = {v}")?;
        }
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(SNAPSHOT_COLUMNS)?;
        Ok(Self { inner })
    }

    pub fn write_epoch<'a>(
        &mut self,
        epoch: u64,
        end_us: f64,
        trackers: impl IntoIterator<Item = &'a PairOffsetTracker>,
    ) -> Result<(), DatasetError> {
        for t in trackers {
            let [[p00, p01], [_, p11]] = t.covariance;
            self.inner.write_record([
                epoch.to_string(),
                end_us.to_string(),
                t.pair.a.to_string(),
                t.pair.b.to_string(),
                t.status.as_str().to_string(),
                t.last_update_ns.to_string(),
                t.offset_ns.to_string(),
                t.drift_ns_per_s.to_string(),
                p00.to_string(),
                p01.to_string(),
                p11.to_string(),
                t.measurement_var_ns2.to_string(),
                t.innovation_var_ns2.to_string(),
                t.consecutive_rejects.to_string(),
                t.accepted.to_string(),
                t.rejected.to_string(),
                t.reinits.to_string(),
            ])?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, DatasetError> {
        self.inner.flush()?;
        self.inner
            .into_inner()
            .map_err(|e| DatasetError::Io(std::io::Error::other(e.to_string())))
    }
}

/// Streams epochs back one at a time.
pub struct SnapshotReader<R: Read> {
    rows: csv::StringRecordsIntoIter<R>,
    pending: Option<(u64, f64, PairOffsetTracker)>,
    line: u64,
    done: bool,
}

impl<R: Read> SnapshotReader<R> {
    pub fn new(stream: R) -> Result<Self, DatasetError> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(stream);
        let header = reader.headers()?.clone();
        let found: Vec<String> = header.iter().map(str::to_string).collect();
        if found.iter().map(String::as_str).ne(SNAPSHOT_COLUMNS) {
            let missing = SNAPSHOT_COLUMNS
                .iter()
                .filter(|c| !found.iter().any(|f| f == *c))
                .map(|c| c.to_string())
                .collect();
            return Err(DatasetError::Schema { missing, found });
        }
        Ok(Self {
            rows: reader.into_records(),
            pending: None,
            line: 1,
            done: false,
        })
    }

    fn next_row(&mut self) -> Option<Result<(u64, f64, PairOffsetTracker), DatasetError>> {
        let rec = match self.rows.next()? {
            Ok(r) => r,
            Err(e) => return Some(Err(e.into())),
        };
        self.line = rec.position().map_or(self.line + 1, |p| p.line());
        Some(parse_row(&rec, self.line))
    }
}

fn parse_row(
    rec: &csv::StringRecord,
    line: u64,
) -> Result<(u64, f64, PairOffsetTracker), DatasetError> {
    let field = |i: usize| rec.get(i).unwrap_or("");
    let f = |i: usize| {
        field(i).parse::<f64>().map_err(|_| {
            DatasetError::parse(
                line,
                format!("{}: bad number {:?}", SNAPSHOT_COLUMNS[i], field(i)),
            )
        })
    };
    let u = |i: usize| {
        field(i).parse::<u64>().map_err(|_| {
            DatasetError::parse(
                line,
                format!("{}: bad integer {:?}", SNAPSHOT_COLUMNS[i], field(i)),
            )
        })
    };
    let (a, b) = (SensorId(u(2)?), SensorId(u(3)?));
    if a >= b {
        return Err(DatasetError::integrity(
            Some(line),
            format!("pair {a}-{b} not ordered"),
        ));
    }
    let status = TrackerStatus::parse(field(4))
        .ok_or_else(|| DatasetError::parse(line, format!("unknown status {:?}", field(4))))?;
    let rejects =
        u32::try_from(u(13)?).map_err(|_| DatasetError::parse(line, "reject counter overflow"))?;
    let tracker = PairOffsetTracker {
        pair: SensorPair { a, b },
        status,
        last_update_ns: f(5)?,
        offset_ns: f(6)?,
        drift_ns_per_s: f(7)?,
        covariance: [[f(8)?, f(9)?], [f(9)?, f(10)?]],
        measurement_var_ns2: f(11)?,
        innovation_var_ns2: f(12)?,
        consecutive_rejects: rejects,
        accepted: u(14)?,
        rejected: u(15)?,
        reinits: u(16)?,
    };
    Ok((u(0)?, f(1)?, tracker))
}

impl<R: Read> Iterator for SnapshotReader<R> {
    type Item = Result<SnapshotEpoch, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let (epoch, end_us, first) = match self.pending.take() {
            Some(p) => p,
            None => match self.next_row()? {
                Ok(p) => p,
                Err(e) => {
                    self.done = true;
                    return Some(Err(e));
                }
            },
        };
        let mut out = SnapshotEpoch {
            epoch,
            end_us,
            trackers: vec![first],
        };
        loop {
            match self.next_row() {
                None => {
                    self.done = true;
                    break;
                }
                Some(Err(e)) => {
                    self.done = true;
                    return Some(Err(e));
                }
                Some(Ok((e, end, t))) if e == epoch => {
                    if end != end_us {
                        self.done = true;
                        return Some(Err(DatasetError::integrity(
                            Some(self.line),
                            format!("epoch {e} has inconsistent end time"),
                        )));
                    }
                    out.trackers.push(t);
                }
                Some(Ok(row)) => {
                    if row.0 < epoch {
                        self.done = true;
                        return Some(Err(DatasetError::integrity(
                            Some(self.line),
                            format!("epoch {} follows epoch {epoch}", row.0),
                        )));
                    }
                    self.pending = Some(row);
                    break;
                }
            }
        }
        Some(Ok(out))
    }
}

/// Reads a whole snapshot file.
pub fn read_snapshot<R: Read>(stream: R) -> Result<Vec<SnapshotEpoch>, DatasetError> {
    SnapshotReader::new(stream)?.collect()
}
