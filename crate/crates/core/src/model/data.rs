use sha2::{Digest, Sha256};

use crate::error::{GumError, Result};

/// Named regressor columns, one response per observation, and an optional
/// row-to-observation grouping (several rows may feed one observation).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub names: Vec<String>,
    /// Column-major regressor values; every column has `n_rows` entries.
    pub columns: Vec<Vec<f64>>,
    pub response_name: String,
    pub response: Vec<f64>,
    /// `groups[row]` is the observation a row belongs to. `None` means one row per observation.
    pub groups: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(names: Vec<String>, columns: Vec<Vec<f64>>, response: Vec<f64>) -> Result<Self> {
        Self::with_groups(names, columns, "y".to_string(), response, None)
    }

    pub fn with_groups(
        names: Vec<String>,
        columns: Vec<Vec<f64>>,
        response_name: String,
        response: Vec<f64>,
        groups: Option<Vec<usize>>,
    ) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(GumError::InvalidInput("column name count does not match column count".into()));
        }
        let n_rows = columns.first().map_or(response.len(), Vec::len);
        if columns.iter().any(|c| c.len() != n_rows) {
            return Err(GumError::InvalidInput("columns have different lengths".into()));
        }
        match &groups {
            None if n_rows != response.len() => {
                return Err(GumError::InvalidInput(format!(
                    "{n_rows} rows but {} responses",
                    response.len()
                )))
            }
            Some(g) if g.len() != n_rows || g.iter().any(|&o| o >= response.len()) => {
                return Err(GumError::InvalidInput("group index out of range".into()))
            }
            _ => {}
        }
        for (row, v) in response.iter().enumerate() {
            if !v.is_finite() {
                return Err(GumError::NonFiniteValue {
                    column: response_name,
                    row,
                });
            }
        }
        Ok(Dataset {
            names,
            columns,
            response_name,
            response,
            groups,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.groups
            .as_ref()
            .map_or(self.response.len(), Vec::len)
    }

    pub fn n_obs(&self) -> usize {
        self.response.len()
    }

    pub fn row_obs(&self) -> Vec<usize> {
        match &self.groups {
            Some(g) => g.clone(),
            None => (0..self.response.len()).collect(),
        }
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
            .ok_or_else(|| GumError::MissingVariable(name.to_string()))
    }

    /// Column values, failing on the first non-finite entry.
    pub fn finite_column(&self, name: &str) -> Result<&[f64]> {
        let col = self.column(name)?;
        if let Some(row) = col.iter().position(|v| !v.is_finite()) {
            return Err(GumError::NonFiniteValue {
                column: name.to_string(),
                row,
            });
        }
        Ok(col)
    }

    /// Observations listed in `obs`, renumbered in the given order.
    pub fn subset(&self, obs: &[usize]) -> Dataset {
        let mut new_index = vec![usize::MAX; self.n_obs()];
        for (i, &o) in obs.iter().enumerate() {
            new_index[o] = i;
        }
        let row_obs = self.row_obs();
        let mut rows: Vec<usize> = (0..self.n_rows()).filter(|&r| new_index[row_obs[r]] != usize::MAX).collect();
        rows.sort_by_key(|&r| (new_index[row_obs[r]], r));
        let columns = self
            .columns
            .iter()
            .map(|c| rows.iter().map(|&r| c[r]).collect())
            .collect();
        Dataset {
            names: self.names.clone(),
            columns,
            response_name: self.response_name.clone(),
            response: obs.iter().map(|&o| self.response[o]).collect(),
            groups: self
                .groups
                .as_ref()
                .map(|_| rows.iter().map(|&r| new_index[row_obs[r]]).collect()),
        }
    }

    /// Content hash over names, values, responses and grouping.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, col) in self.names.iter().zip(&self.columns) {
            h.update(name.as_bytes());
            h.update([0u8]);
            for v in col {
                h.update(v.to_le_bytes());
            }
        }
        h.update(self.response_name.as_bytes());
        h.update([1u8]);
        for v in &self.response {
            h.update(v.to_le_bytes());
        }
        if let Some(g) = &self.groups {
            h.update([2u8]);
            for o in g {
                h.update((*o as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
