//! CSV and JSON artifact writers.

use std::path::Path;

use serde_json::Value;
use stackelberg::{Mat, MatrixPath};

/// Seventeen significant digits, enough to round-trip an `f64`.
pub fn float(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn matrix_rows(m: &Mat) -> Value {
    let rows: Vec<Vec<f64>> = (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect();
    Value::from(rows)
}

pub fn write_json(path: &Path, v: &Value) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(v).expect("serializable");
    text.push('\n');
    std::fs::write(path, text)
}

pub fn write_table(
    path: &Path,
    header: &[&str],
    rows: impl Iterator<Item = Vec<String>>,
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()
}

/// One row per node with columns `t, name_i_j, ...`. All paths must share a
/// grid.
pub fn write_path_csv(path: &Path, series: &[(&str, &MatrixPath)]) -> std::io::Result<()> {
    let grid = series[0].1.grid();
    let mut header = vec!["t".to_string()];
    for (name, p) in series {
        let (r, c) = p.shape();
        for i in 0..r {
            for j in 0..c {
                header.push(if r * c == 1 {
                    name.to_string()
                } else {
                    format!("{name}_{i}_{j}")
                });
            }
        }
    }
    let rows = (0..grid.len()).map(|k| {
        let mut row = vec![float(grid.time(k))];
        for (_, p) in series {
            let m = p.node(k);
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    row.push(float(m[(i, j)]));
                }
            }
        }
        row
    });
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_table(path, &header, rows)
}
