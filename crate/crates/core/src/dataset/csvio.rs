//! CSV persistence with a schema sidecar.
//!
//! Values are written with 17 significant digits so that save -> load is
//! bit-identical. Each table `foo.csv` travels with `foo.schema.csv` mapping
//! every column to its role (`state` or `response`).

use std::fs;
use std::path::{Path, PathBuf};

use super::{Column, DataSet, Role};
use crate::error::{CoreError, Result};

/// `foo.csv` -> `foo.schema.csv`; extensionless paths just gain the suffix.
pub fn sidecar_path(path: &Path) -> PathBuf {
    match path.file_stem() {
        Some(stem) => path.with_file_name(format!("{}.schema.csv", stem.to_string_lossy())),
        None => path.with_extension("schema.csv"),
    }
}

/// Full-precision decimal form that parses back to the same bits.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

impl DataSet {
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let names: Vec<&str> = self.columns().iter().map(|c| c.name.as_str()).collect();
        out.push_str(&names.join(","));
        out.push('\n');
        for r in 0..self.n_rows() {
            let row: Vec<String> = self.row(r).iter().map(|v| format_value(*v)).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        fs::write(path, out)?;

        let mut schema = String::from("column,role\n");
        for c in self.columns() {
            schema.push_str(&format!("{},{}\n", c.name, c.role.as_str()));
        }
        fs::write(sidecar_path(path), schema)?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<DataSet> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::Dataset {
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        let schema = load_schema(&sidecar_path(path))?;

        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| CoreError::CsvSchema {
            message: format!("{} is empty", path.display()),
        })?;
        let names: Vec<&str> = header.split(',').map(str::trim).collect();
        if names.len() != schema.len() {
            return Err(CoreError::CsvSchema {
                message: format!(
                    "{} has {} columns but its sidecar declares {}",
                    path.display(),
                    names.len(),
                    schema.len()
                ),
            });
        }
        for (i, (name, col)) in names.iter().zip(&schema).enumerate() {
            if *name != col.name {
                return Err(CoreError::CsvSchema {
                    message: format!(
                        "column {} is '{}' in {} but '{}' in the sidecar",
                        i + 1,
                        name,
                        path.display(),
                        col.name
                    ),
                });
            }
        }

        let n_cols = names.len();
        let mut data = Vec::new();
        let mut n_rows = 0usize;
        for (lineno, line) in lines {
            if line.is_empty() {
                continue;
            }
            let mut count = 0;
            for (ci, cell) in line.split(',').enumerate() {
                count += 1;
                if count > n_cols {
                    break;
                }
                let v: f64 = cell.trim().parse().map_err(|_| CoreError::CsvParse {
                    row: lineno + 1,
                    col: ci + 1,
                    message: format!("'{}' is not a number", cell.trim()),
                })?;
                if !v.is_finite() {
                    return Err(CoreError::CsvParse {
                        row: lineno + 1,
                        col: ci + 1,
                        message: "non-finite value".into(),
                    });
                }
                data.push(v);
            }
            if count != n_cols {
                return Err(CoreError::CsvParse {
                    row: lineno + 1,
                    col: count.min(n_cols) + 1,
                    message: format!("expected {n_cols} cells, found {count}"),
                });
            }
            n_rows += 1;
        }
        if n_rows == 0 {
            return Err(CoreError::CsvSchema {
                message: format!("{} has no data rows", path.display()),
            });
        }
        DataSet::new(schema, data)
    }
}

fn load_schema(path: &Path) -> Result<Vec<Column>> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::CsvSchema {
        message: format!("cannot read schema sidecar {}: {e}", path.display()),
    })?;
    let mut lines = text.lines();
    match lines.next() {
        Some("column,role") => {}
        other => {
            return Err(CoreError::CsvSchema {
                message: format!(
                    "sidecar {} must start with 'column,role', found {:?}",
                    path.display(),
                    other.unwrap_or("")
                ),
            })
        }
    }
    let mut cols = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let (name, role) = line.split_once(',').ok_or_else(|| CoreError::CsvSchema {
            message: format!("malformed sidecar line '{line}'"),
        })?;
        cols.push(Column {
            name: name.trim().to_string(),
            role: Role::parse(role.trim())?,
        });
    }
    if cols.is_empty() {
        return Err(CoreError::CsvSchema {
            message: format!("sidecar {} declares no columns", path.display()),
        });
    }
    Ok(cols)
}

#[cfg(test)]
mod tests {
    use super::super::{Column, DataSet};
    use super::*;

    fn tmpdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("aerofuse-csv-{tag}-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tmpdir("roundtrip");
        let path = dir.join("t.csv");
        // Values chosen to stress the formatter: subnormal-ish, negative, huge.
        let d = DataSet::new(
            vec![Column::state("x"), Column::response("y")],
            vec![0.1, -1.0 / 3.0, 2.5e-17, 1.23456789012345e16, f64::MIN_POSITIVE, -0.0],
        )
        .unwrap();
        d.save_csv(&path).unwrap();
        let back = DataSet::load_csv(&path).unwrap();
        assert_eq!(back.n_rows(), 3);
        for (a, b) in back.data().iter().zip(d.data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "{a} vs {b}");
        }
        assert_eq!(back.columns(), d.columns());
    }

    #[test]
    fn parse_error_reports_row_and_column() {
        let dir = tmpdir("parse");
        let path = dir.join("bad.csv");
        fs::write(&path, "x,y\n1.0,2.0\n3.0,oops\n").unwrap();
        fs::write(sidecar_path(&path), "column,role\nx,state\ny,response\n").unwrap();
        match DataSet::load_csv(&path) {
            Err(CoreError::CsvParse { row, col, .. }) => {
                assert_eq!((row, col), (3, 2));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ragged_row_is_rejected() {
        let dir = tmpdir("ragged");
        let path = dir.join("ragged.csv");
        fs::write(&path, "x,y\n1.0\n").unwrap();
        fs::write(sidecar_path(&path), "column,role\nx,state\ny,response\n").unwrap();
        assert!(matches!(
            DataSet::load_csv(&path),
            Err(CoreError::CsvParse { row: 2, .. })
        ));
    }

    #[test]
    fn missing_sidecar_is_a_schema_error() {
        let dir = tmpdir("nosidecar");
        let path = dir.join("lonely.csv");
        fs::write(&path, "x\n1.0\n").unwrap();
        assert!(matches!(
            DataSet::load_csv(&path),
            Err(CoreError::CsvSchema { .. })
        ));
    }

    #[test]
    fn header_sidecar_mismatch_is_rejected() {
        let dir = tmpdir("mismatch");
        let path = dir.join("m.csv");
        fs::write(&path, "x,z\n1.0,2.0\n").unwrap();
        fs::write(sidecar_path(&path), "column,role\nx,state\ny,response\n").unwrap();
        assert!(matches!(
            DataSet::load_csv(&path),
            Err(CoreError::CsvSchema { .. })
        ));
    }

    #[test]
    fn empty_table_is_rejected() {
        let dir = tmpdir("empty");
        let path = dir.join("e.csv");
        fs::write(&path, "x\n").unwrap();
        fs::write(sidecar_path(&path), "column,role\nx,state\n").unwrap();
        assert!(matches!(
            DataSet::load_csv(&path),
            Err(CoreError::CsvSchema { .. })
        ));
    }
}
