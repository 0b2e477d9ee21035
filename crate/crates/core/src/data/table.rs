use std::path::Path;

use super::{ColumnKind, DataError, DatasetSchema, MissingPolicy, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Num(f64),
    Cat(String),
}

/// Typed rows of a CSV file, restricted to the schema's columns.
#[derive(Clone, Debug, Default)]
pub struct RawTable {
    /// Feature cells per row, in `schema.features` order.
    pub features: Vec<Vec<Cell>>,
    pub labels: Vec<u8>,
    pub attributes: Vec<u8>,
    /// Rows skipped under the drop policy.
    pub dropped: usize,
}

impl RawTable {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Reads a headed, comma-delimited file. Row indices in errors are 1-based
/// data rows (the header is row 0).
pub fn load_csv(path: &Path, schema: &DatasetSchema) -> Result<RawTable> {
    let file = std::fs::File::open(path).map_err(|e| DataError::Io(path.display().to_string(), e))?;
    read_csv(file, schema)
}

pub(crate) fn read_csv<R: std::io::Read>(reader: R, schema: &DatasetSchema) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| DataError::Csv(e.to_string()))?.clone();
    let find = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let feat_idx = schema.features.iter().map(|c| find(&c.name)).collect::<Result<Vec<_>>>()?;
    let label_idx = find(&schema.label.column)?;
    let sens_idx = find(&schema.sensitive.column)?;

    let is_missing = |v: &str| v.is_empty() || schema.missing_token.as_deref() == Some(v);
    let mut table = RawTable::default();
    'rows: for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| DataError::Malformed { row, msg: e.to_string() })?;
        let mut used: Vec<(usize, &str)> = feat_idx.iter().map(|&j| (j, header.get(j).unwrap_or(""))).collect();
        used.push((label_idx, schema.label.column.as_str()));
        used.push((sens_idx, schema.sensitive.column.as_str()));
        for &(j, name) in &used {
            let v = rec.get(j).ok_or_else(|| DataError::Malformed { row, msg: format!("too few fields for `{name}`") })?;
            if is_missing(v) {
                match schema.missing_policy {
                    MissingPolicy::Drop => {
                        table.dropped += 1;
                        continue 'rows;
                    }
                    MissingPolicy::Error => return Err(DataError::Missing { row, column: name.to_string() }),
                }
            }
        }
        let mut cells = Vec::with_capacity(feat_idx.len());
        for (spec, &j) in schema.features.iter().zip(&feat_idx) {
            let v = &rec[j];
            cells.push(match spec.kind {
                ColumnKind::Numeric => Cell::Num(v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| {
                    DataError::Numeric { row, column: spec.name.clone(), value: v.to_string() }
                })?),
                ColumnKind::Categorical => Cell::Cat(v.to_string()),
            });
        }
        let binary = |col: &super::BinaryColumn, j: usize| {
            col.map(&rec[j]).ok_or_else(|| DataError::UnknownCategory {
                row,
                column: col.column.clone(),
                value: rec[j].to_string(),
            })
        };
        let y = binary(&schema.label, label_idx)?;
        let a = binary(&schema.sensitive, sens_idx)?;
        table.features.push(cells);
        table.labels.push(y);
        table.attributes.push(a);
    }
    Ok(table)
}
