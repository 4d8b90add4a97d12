//! Row-keyed co-occurrence tables.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::findings::FindingKey;

#[derive(Debug, Error)]
pub enum MatrixError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed matrix csv: {0}")]
    Malformed(String),
}

/// `fractions[r][c]` = share of the rows' scans that also carry column `c`.
/// Rows with a zero count hold NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooccurrenceMatrix {
    pub row_keys: Vec<FindingKey>,
    pub col_keys: Vec<FindingKey>,
    pub fractions: Vec<Vec<f64>>,
    pub row_counts: Vec<usize>,
    /// Free-form provenance, e.g. the unsure policy in effect.
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl CooccurrenceMatrix {
    pub fn row(&self, key: &str) -> Option<&[f64]> {
        let i = self.row_keys.iter().position(|k| k.as_str() == key)?;
        Some(&self.fractions[i])
    }

    pub fn get(&self, row: &str, col: &str) -> Option<f64> {
        let r = self.row_keys.iter().position(|k| k.as_str() == row)?;
        let c = self.col_keys.iter().position(|k| k.as_str() == col)?;
        Some(self.fractions[r][c])
    }

    /// True when every key in `keys` is both a row and a column.
    pub fn covers(&self, keys: &[FindingKey]) -> bool {
        keys.iter()
            .all(|k| self.row_keys.contains(k) && self.col_keys.contains(k))
    }

    /// CSV layout: `prompted,count,<col keys...>`; undefined cells are empty.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), MatrixError> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["row".to_string(), "count".to_string()];
        header.extend(self.col_keys.iter().map(|k| k.to_string()));
        out.write_record(&header)?;
        for (i, key) in self.row_keys.iter().enumerate() {
            let mut rec = vec![key.to_string(), self.row_counts[i].to_string()];
            rec.extend(self.fractions[i].iter().map(|v| fmt_cell(*v)));
            out.write_record(&rec)?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, MatrixError> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        if header.len() < 2 {
            return Err(MatrixError::Malformed("header too short".into()));
        }
        let col_keys: Vec<FindingKey> = header.iter().skip(2).map(FindingKey::new).collect();
        let mut m = CooccurrenceMatrix {
            row_keys: vec![],
            col_keys,
            fractions: vec![],
            row_counts: vec![],
            meta: BTreeMap::new(),
        };
        for rec in rd.records() {
            let rec = rec?;
            m.row_keys.push(FindingKey::new(&rec[0]));
            m.row_counts.push(
                rec[1]
                    .parse()
                    .map_err(|_| MatrixError::Malformed(format!("bad count {:?}", &rec[1])))?,
            );
            let mut row = Vec::with_capacity(m.col_keys.len());
            for cell in rec.iter().skip(2) {
                row.push(if cell.is_empty() {
                    f64::NAN
                } else {
                    cell.parse()
                        .map_err(|_| MatrixError::Malformed(format!("bad cell {cell:?}")))?
                });
            }
            if row.len() != m.col_keys.len() {
                return Err(MatrixError::Malformed("ragged row".into()));
            }
            m.fractions.push(row);
        }
        Ok(m)
    }
}

pub(crate) fn fmt_cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}
