//! Tabular datasets: schema-tagged numeric tables, CSV round-trip, sliding
//! windows, train/test splits, synthetic benchmarks, z-score normalization.

mod csvio;
mod split;
mod synthetic;
mod window;

pub use split::{split_leave_half_out, split_mach_blocks};
pub use synthetic::{gen_synthetic, SyntheticConfig, SyntheticKind};
pub use window::WindowPlan;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    State,
    Response,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::State => "state",
            Role::Response => "response",
        }
    }

    pub fn parse(s: &str) -> Result<Role> {
        match s {
            "state" => Ok(Role::State),
            "response" => Ok(Role::Response),
            other => Err(CoreError::CsvSchema {
                message: format!("unknown role '{other}' (expected state|response)"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub role: Role,
}

impl Column {
    pub fn state(name: &str) -> Self {
        Column {
            name: name.into(),
            role: Role::State,
        }
    }

    pub fn response(name: &str) -> Self {
        Column {
            name: name.into(),
            role: Role::Response,
        }
    }
}

/// A dense numeric table with named, role-tagged columns. Row order is
/// meaningful (sequences are windowed in row order) and preserved by every
/// operation here.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    columns: Vec<Column>,
    data: Vec<f64>,
    n_rows: usize,
}

impl DataSet {
    pub fn new(columns: Vec<Column>, data: Vec<f64>) -> Result<Self> {
        if columns.is_empty() {
            return Err(CoreError::Dataset {
                message: "a table needs at least one column".into(),
            });
        }
        let mut names: Vec<&str> = columns.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(CoreError::Dataset {
                message: "duplicate column names".into(),
            });
        }
        if columns.iter().any(|c| c.name.contains(',') || c.name.is_empty()) {
            return Err(CoreError::Dataset {
                message: "column names must be non-empty and comma-free".into(),
            });
        }
        if data.len() % columns.len() != 0 {
            return Err(CoreError::Dataset {
                message: format!(
                    "{} values do not fill rows of {} columns",
                    data.len(),
                    columns.len()
                ),
            });
        }
        let n_rows = data.len() / columns.len();
        Ok(DataSet {
            columns,
            data,
            n_rows,
        })
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols()..(i + 1) * self.n_cols()]
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n_cols() + col]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn state_indices(&self) -> Vec<usize> {
        self.indices_with_role(Role::State)
    }

    pub fn response_indices(&self) -> Vec<usize> {
        self.indices_with_role(Role::Response)
    }

    fn indices_with_role(&self, role: Role) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.role == role)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.n_rows).map(|r| self.value(r, col)).collect()
    }

    /// Row-major copy of the selected columns.
    pub fn matrix(&self, cols: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_rows * cols.len());
        for r in 0..self.n_rows {
            let row = self.row(r);
            for &c in cols {
                out.push(row[c]);
            }
        }
        out
    }

    /// New table with the given rows, in the given order.
    pub fn take_rows(&self, rows: &[usize]) -> DataSet {
        let nc = self.n_cols();
        let mut data = Vec::with_capacity(rows.len() * nc);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        DataSet {
            columns: self.columns.clone(),
            data,
            n_rows: rows.len(),
        }
    }
}

/// Per-column z-score statistics. `std` entries for constant columns are
/// clamped to 1 and recorded in `constant_columns`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub constant_columns: Vec<usize>,
}

impl NormStats {
    /// Population statistics over the rows of `data`.
    pub fn fit(data: &DataSet) -> NormStats {
        let nc = data.n_cols();
        let nr = data.n_rows() as f64;
        let mut mean = vec![0.0; nc];
        for r in 0..data.n_rows() {
            for (m, v) in mean.iter_mut().zip(data.row(r)) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= nr;
        }
        let mut var = vec![0.0; nc];
        for r in 0..data.n_rows() {
            for (c, v) in data.row(r).iter().enumerate() {
                let d = v - mean[c];
                var[c] += d * d;
            }
        }
        let mut std = Vec::with_capacity(nc);
        let mut constant = Vec::new();
        for (c, v) in var.iter().enumerate() {
            let s = (v / nr).sqrt();
            if s == 0.0 {
                constant.push(c);
                std.push(1.0);
            } else {
                std.push(s);
            }
        }
        NormStats {
            mean,
            std,
            constant_columns: constant,
        }
    }

    pub fn apply(&self, data: &DataSet) -> Result<DataSet> {
        self.transform(data, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, data: &DataSet) -> Result<DataSet> {
        self.transform(data, |v, m, s| v * s + m)
    }

    /// Normalizes a single column value back to physical units.
    pub fn invert_value(&self, col: usize, v: f64) -> f64 {
        v * self.std[col] + self.mean[col]
    }

    pub fn apply_value(&self, col: usize, v: f64) -> f64 {
        (v - self.mean[col]) / self.std[col]
    }

    fn transform(&self, data: &DataSet, f: impl Fn(f64, f64, f64) -> f64) -> Result<DataSet> {
        if self.mean.len() != data.n_cols() {
            return Err(CoreError::ShapeMismatch {
                op: "normalize",
                got: vec![data.n_cols()],
                expected: format!("{} columns", self.mean.len()),
            });
        }
        let mut out = Vec::with_capacity(data.data().len());
        for r in 0..data.n_rows() {
            for (c, v) in data.row(r).iter().enumerate() {
                out.push(f(*v, self.mean[c], self.std[c]));
            }
        }
        DataSet::new(data.columns().to_vec(), out)
    }
}

/// Fits stats on `data` (or reuses `stats`) and returns the normalized table.
pub fn normalize(data: &DataSet, stats: Option<&NormStats>) -> Result<(DataSet, NormStats)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => NormStats::fit(data),
    };
    let out = stats.apply(data)?;
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy() -> DataSet {
        DataSet::new(
            vec![Column::state("x"), Column::response("y")],
            vec![0.0, 1.0, 0.5, 3.0, 1.0, 5.0],
        )
        .unwrap()
    }

    #[test]
    fn roles_partition_columns() {
        let d = toy();
        assert_eq!(d.state_indices(), vec![0]);
        assert_eq!(d.response_indices(), vec![1]);
        assert_eq!(d.n_rows(), 3);
    }

    #[test]
    fn duplicate_names_rejected() {
        let err = DataSet::new(
            vec![Column::state("x"), Column::state("x")],
            vec![0.0, 1.0],
        )
        .unwrap_err();
        assert!(matches!(err, CoreError::Dataset { .. }));
    }

    #[test]
    fn constant_column_gets_unit_std_and_flag() {
        let d = DataSet::new(
            vec![Column::state("a"), Column::response("b")],
            vec![2.0, 1.0, 2.0, 3.0, 2.0, 5.0],
        )
        .unwrap();
        let stats = NormStats::fit(&d);
        assert_eq!(stats.constant_columns, vec![0]);
        assert_eq!(stats.std[0], 1.0);
        let (n, _) = normalize(&d, None).unwrap();
        assert_eq!(n.value(0, 0), 0.0);
        assert_eq!(n.value(2, 0), 0.0);
    }

    #[test]
    fn normalized_columns_have_zero_mean_unit_var() {
        let d = toy();
        let (n, _) = normalize(&d, None).unwrap();
        for c in 0..2 {
            let col = n.column(c);
            let mean: f64 = col.iter().sum::<f64>() / col.len() as f64;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / col.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn normalize_round_trips(values in proptest::collection::vec(-1e3f64..1e3, 4..60)) {
            let n = values.len() / 2 * 2;
            let d = DataSet::new(
                vec![Column::state("x"), Column::response("y")],
                values[..n].to_vec(),
            ).unwrap();
            let (normed, stats) = normalize(&d, None).unwrap();
            let back = stats.invert(&normed).unwrap();
            for (a, b) in back.data().iter().zip(d.data()) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}
