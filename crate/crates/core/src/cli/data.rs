//! CSV input and output: header row, UTF-8, `.` decimal separator.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{GumError, Result};
use crate::model::Dataset;

/// Numeric table read from a CSV file.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl Table {
    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
            .ok_or_else(|| GumError::MissingVariable(name.to_string()))
    }
}

pub fn read_csv(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<Table> {
    if text.trim().is_empty() {
        return Ok(Table {
            names: Vec::new(),
            columns: Vec::new(),
        });
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let names: Vec<String> = reader
        .headers()
        .map_err(|e| GumError::InvalidInput(format!("CSV header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut columns = vec![Vec::new(); names.len()];
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| GumError::InvalidInput(format!("CSV row {row}: {e}")))?;
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                GumError::InvalidInput(format!("column `{}` row {row}: `{field}` is not a number", names[j]))
            })?;
            columns[j].push(v);
        }
    }
    Ok(Table { names, columns })
}

/// Dataset with every column except the response and group as a regressor.
/// Rows sharing a group value form one observation, numbered by first appearance;
/// the response must then be constant within each group.
pub fn to_dataset(table: &Table, response: &str, group: Option<&str>) -> Result<Dataset> {
    let y_rows = table.column(response)?;
    let mut names = Vec::new();
    let mut columns = Vec::new();
    for (n, c) in table.names.iter().zip(&table.columns) {
        if n != response && Some(n.as_str()) != group {
            names.push(n.clone());
            columns.push(c.clone());
        }
    }
    let Some(g) = group else {
        return Dataset::with_groups(names, columns, response.to_string(), y_rows.to_vec(), None);
    };
    let keys = table.column(g)?;
    let mut index: HashMap<u64, usize> = HashMap::new();
    let mut groups = Vec::with_capacity(keys.len());
    let mut y = Vec::new();
    for (row, (&k, &v)) in keys.iter().zip(y_rows).enumerate() {
        let next = index.len();
        let o = *index.entry(k.to_bits()).or_insert(next);
        if o == y.len() {
            y.push(v);
        } else if y[o] != v {
            return Err(GumError::InvalidInput(format!(
                "row {row}: response {v} differs from {} earlier in group {k}",
                y[o]
            )));
        }
        groups.push(o);
    }
    Dataset::with_groups(names, columns, response.to_string(), y, Some(groups))
}

pub fn csv_string(header: &[String], rows: &[Vec<f64>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string())).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 output")
}

/// Rows of a dataset as CSV: an optional `group` column, the regressors, then the
/// response repeated on every row of its observation.
pub fn dataset_csv(data: &Dataset) -> String {
    let row_obs = data.row_obs();
    let mut header = Vec::new();
    if data.groups.is_some() {
        header.push("group".to_string());
    }
    header.extend(data.names.iter().cloned());
    header.push(data.response_name.clone());
    let rows: Vec<Vec<f64>> = (0..data.n_rows())
        .map(|r| {
            let mut row = Vec::with_capacity(header.len());
            if data.groups.is_some() {
                row.push(row_obs[r] as f64);
            }
            row.extend(data.columns.iter().map(|c| c[r]));
            row.push(data.response[row_obs[r]]);
            row
        })
        .collect();
    csv_string(&header, &rows)
}
