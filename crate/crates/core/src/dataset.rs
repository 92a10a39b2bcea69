//! The structured table of per-segment metric vectors.
//!
//! CSV layout: `frame_id,segment_id,source,<features...>,iou,is_fp`. Floats
//! are written with nine significant digits; absent targets are empty cells.

use std::fmt;
use std::io;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::format_sig;

const KEY_COLUMNS: [&str; 3] = ["frame_id", "segment_id", "source"];
const TARGET_COLUMNS: [&str; 2] = ["iou", "is_fp"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("row has {actual} features, schema has {expected}")]
    RowLength { expected: usize, actual: usize },
    #[error("feature {feature} of row {row} is not finite")]
    NonfiniteFeature { row: usize, feature: String },
    #[error("csv line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

/// Where a row came from. Only real rows may enter validation or test sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Augmented,
    Pseudo,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Real => "real",
            Source::Augmented => "augmented",
            Source::Pseudo => "pseudo",
        })
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "real" => Ok(Source::Real),
            "augmented" => Ok(Source::Augmented),
            "pseudo" => Ok(Source::Pseudo),
            other => Err(format!("unknown source {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub frame_id: String,
    pub segment_id: u32,
    pub source: Source,
    pub features: Vec<f64>,
    pub iou: Option<f64>,
    pub is_fp: Option<bool>,
}

impl Row {
    pub fn has_targets(&self) -> bool {
        self.iou.is_some() && self.is_fp.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsDataset {
    schema: Vec<String>,
    rows: Vec<Row>,
}

impl MetricsDataset {
    pub fn new(schema: Vec<String>) -> Self {
        Self {
            schema,
            rows: Vec::new(),
        }
    }

    pub fn from_rows(schema: Vec<String>, rows: Vec<Row>) -> Result<Self, DatasetError> {
        let mut d = Self::new(schema);
        for row in rows {
            d.push(row)?;
        }
        Ok(d)
    }

    pub fn push(&mut self, row: Row) -> Result<(), DatasetError> {
        if row.features.len() != self.schema.len() {
            return Err(DatasetError::RowLength {
                expected: self.schema.len(),
                actual: row.features.len(),
            });
        }
        if let Some(i) = row.features.iter().position(|v| !v.is_finite()) {
            return Err(DatasetError::NonfiniteFeature {
                row: self.rows.len(),
                feature: self.schema[i].clone(),
            });
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn schema(&self) -> &[String] {
        &self.schema
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn rows_mut(&mut self) -> &mut [Row] {
        &mut self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|s| s == name)
    }

    pub fn column(&self, index: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.features[index]).collect()
    }

    /// Number of time-series lags (0 for single-frame tables), counted from
    /// the presence-flag columns.
    pub fn depth(&self) -> usize {
        self.schema
            .iter()
            .filter(|s| s.starts_with(crate::tracking::PRESENT_COLUMN))
            .count()
            .saturating_sub(1)
    }

    /// Keeps only the named feature columns, in the given order.
    pub fn select(&self, names: &[&str]) -> Result<MetricsDataset, DatasetError> {
        let idx = names
            .iter()
            .map(|n| {
                self.column_index(n)
                    .ok_or_else(|| DatasetError::SchemaMismatch(format!("no column {n:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(MetricsDataset {
            schema: names.iter().map(|s| s.to_string()).collect(),
            rows: self
                .rows
                .iter()
                .map(|r| Row {
                    features: idx.iter().map(|&i| r.features[i]).collect(),
                    ..r.clone()
                })
                .collect(),
        })
    }

    pub fn subset(&self, indices: &[usize]) -> MetricsDataset {
        MetricsDataset {
            schema: self.schema.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    pub fn filter(&self, keep: impl Fn(&Row) -> bool) -> MetricsDataset {
        MetricsDataset {
            schema: self.schema.clone(),
            rows: self.rows.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    pub fn extend(&mut self, other: &MetricsDataset) -> Result<(), DatasetError> {
        if other.schema != self.schema {
            return Err(DatasetError::SchemaMismatch(format!(
                "cannot append {} columns to {} columns",
                other.schema.len(),
                self.schema.len()
            )));
        }
        self.rows.extend(other.rows.iter().cloned());
        Ok(())
    }

    /// Rows carrying both targets.
    pub fn labeled(&self) -> MetricsDataset {
        self.filter(Row::has_targets)
    }

    pub fn iou_targets(&self) -> Option<Vec<f64>> {
        self.rows.iter().map(|r| r.iou).collect()
    }

    pub fn fp_targets(&self) -> Option<Vec<bool>> {
        self.rows.iter().map(|r| r.is_fp).collect()
    }

    pub fn header(&self) -> Vec<String> {
        KEY_COLUMNS
            .iter()
            .map(|s| s.to_string())
            .chain(self.schema.iter().cloned())
            .chain(TARGET_COLUMNS.iter().map(|s| s.to_string()))
            .collect()
    }

    pub fn write_csv_to<W: io::Write>(&self, writer: W) -> Result<(), DatasetError> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(self.header())?;
        for row in &self.rows {
            let mut record = vec![
                row.frame_id.clone(),
                row.segment_id.to_string(),
                row.source.to_string(),
            ];
            record.extend(row.features.iter().map(|&v| format_sig(v)));
            record.push(row.iou.map(format_sig).unwrap_or_default());
            record.push(
                row.is_fp
                    .map(|b| if b { "1" } else { "0" }.to_string())
                    .unwrap_or_default(),
            );
            out.write_record(&record)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        crate::io::atomic_write(path.as_ref(), self.to_csv_string().as_bytes())?;
        Ok(())
    }

    pub fn read_csv_from<R: io::Read>(reader: R) -> Result<Self, DatasetError> {
        let mut input = csv::Reader::from_reader(reader);
        let header: Vec<String> = input.headers()?.iter().map(String::from).collect();
        let n = header.len();
        if n < 5
            || header[..3] != KEY_COLUMNS
            || header[n - 2..] != TARGET_COLUMNS
        {
            return Err(DatasetError::SchemaMismatch(
                "header must start with frame_id,segment_id,source and end with iou,is_fp".into(),
            ));
        }
        let mut data = MetricsDataset::new(header[3..n - 2].to_vec());
        for (i, record) in input.records().enumerate() {
            let line = i + 2;
            let record = record?;
            let bad = |reason: String| DatasetError::Parse { line, reason };
            if record.len() != n {
                return Err(bad(format!("expected {n} fields, found {}", record.len())));
            }
            let number = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| bad(format!("bad number {s:?}")))
            };
            let features = (3..n - 2)
                .map(|j| number(&record[j]))
                .collect::<Result<Vec<_>, _>>()?;
            let iou = match &record[n - 2] {
                "" => None,
                s => Some(number(s)?),
            };
            let is_fp = match &record[n - 1] {
                "" => None,
                "0" => Some(false),
                "1" => Some(true),
                s => return Err(bad(format!("is_fp must be 0 or 1, got {s:?}"))),
            };
            data.push(Row {
                frame_id: record[0].to_string(),
                segment_id: record[1]
                    .parse()
                    .map_err(|_| bad(format!("bad segment id {:?}", &record[1])))?,
                source: record[2].parse().map_err(bad)?,
                features,
                iou,
                is_fp,
            })?;
        }
        Ok(data)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        Self::read_csv_from(std::fs::File::open(path)?)
    }
}
