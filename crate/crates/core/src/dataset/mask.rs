use serde::{Deserialize, Serialize};

use super::{DatasetError, RecordId, TransmissionRecord};
use crate::geo::GeoPosition;

/// Hidden reference position of one evaluation record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnswerKeyEntry {
    pub record_id: RecordId,
    pub position: GeoPosition,
}

pub type AnswerKey = Vec<AnswerKeyEntry>;

/// Deterministic record selector keyed on a seeded hash of the record id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMask {
    fraction: f64,
    seed: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl EvalMask {
    pub fn new(fraction: f64, seed: u64) -> Result<Self, DatasetError> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(DatasetError::integrity(
                None,
                format!("mask fraction {fraction} outside (0, 1)"),
            ));
        }
        Ok(Self { fraction, seed })
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_eval(&self, id: RecordId) -> bool {
        let h = splitmix64(id.0 ^ splitmix64(self.seed));
        // Top 53 bits as a uniform draw in [0, 1).
        ((h >> 11) as f64) * (1.0 / (1u64 << 53) as f64) < self.fraction
    }
}

/// Training records keep their truth; evaluation records lose it to the key.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaskedSplit {
    pub train: Vec<TransmissionRecord>,
    pub eval: Vec<TransmissionRecord>,
    pub answer_key: AnswerKey,
}

/// Strips the reported position from a record, keeping barometric altitude.
pub(crate) fn seal(mut r: TransmissionRecord) -> (TransmissionRecord, Option<AnswerKeyEntry>) {
    let entry = r.truth.take().map(|t| {
        r.baro_altitude_m = t.baro_altitude_m.or(r.baro_altitude_m);
        AnswerKeyEntry {
            record_id: r.record_id,
            position: t.geodetic(),
        }
    });
    (r, entry)
}

impl EvalMask {
    /// Routes one record, returning it (sealed if selected) and any key entry.
    pub fn route(
        &self,
        r: TransmissionRecord,
    ) -> (bool, TransmissionRecord, Option<AnswerKeyEntry>) {
        if self.is_eval(r.record_id) {
            let (sealed, entry) = seal(r);
            (true, sealed, entry)
        } else {
            (false, r, None)
        }
    }
}

pub fn mask_for_eval<I>(records: I, fraction: f64, seed: u64) -> Result<MaskedSplit, DatasetError>
where
    I: IntoIterator<Item = TransmissionRecord>,
{
    let mask = EvalMask::new(fraction, seed)?;
    let mut split = MaskedSplit::default();
    for r in records {
        let (is_eval, r, entry) = mask.route(r);
        if is_eval {
            split.eval.push(r);
            split.answer_key.extend(entry);
        } else {
            split.train.push(r);
        }
    }
    split.answer_key.sort_by_key(|e| e.record_id);
    Ok(split)
}
