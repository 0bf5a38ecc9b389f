use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows of features with optional integer class labels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(rows: Vec<Vec<f64>>, labels: Option<Vec<usize>>) -> Dataset {
        let width = rows.first().map(Vec::len).unwrap_or(0);
        Dataset {
            columns: (0..width).map(|i| format!("f{i}")).collect(),
            rows,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map(|m| m + 1)
            .unwrap_or(0)
    }

    /// Subset by row indices, preserving order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            columns: self.columns.clone(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Dataset> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let has_label = header.last().is_some_and(|h| h == "label");
        let width = header.len() - usize::from(has_label);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let record = record?;
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|_| {
                    Error::Argument(format!("row {}: `{s}` is not a number", i + 1))
                })
            };
            let row = record
                .iter()
                .take(width)
                .map(parse)
                .collect::<Result<Vec<_>>>()?;
            if row.len() != width {
                return Err(Error::Argument(format!("row {} has {} columns", i + 1, row.len())));
            }
            if has_label {
                let raw = record.get(width).unwrap_or_default();
                let label = raw.parse::<usize>().map_err(|_| {
                    Error::Argument(format!("row {}: label `{raw}` is not a class index", i + 1))
                })?;
                labels.push(label);
            }
            rows.push(row);
        }
        Ok(Dataset {
            columns: header[..width].to_vec(),
            rows,
            labels: has_label.then_some(labels),
        })
    }

    pub fn to_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = self.columns.clone();
        if self.labels.is_some() {
            header.push("label".into());
        }
        w.write_record(&header)?;
        for (i, row) in self.rows.iter().enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            if let Some(l) = &self.labels {
                rec.push(l[i].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn load_dataset_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::from_reader(std::fs::File::open(path)?)
}

pub fn write_dataset_csv(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    data.to_writer(std::fs::File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip_with_labels() {
        let d = Dataset::new(vec![vec![1.5, -2.0], vec![0.25, 3.0]], Some(vec![1, 0]));
        let mut buf = Vec::new();
        d.to_writer(&mut buf).unwrap();
        let back = Dataset::from_reader(buf.as_slice()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn csv_without_label_column() {
        let back = Dataset::from_reader("a,b\n1,2\n3,4\n".as_bytes()).unwrap();
        assert_eq!(back.rows, vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert!(back.labels.is_none());
    }

    #[test]
    fn bad_number_is_reported() {
        let err = Dataset::from_reader("a,label\nx,1\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("row 1"));
    }
}
