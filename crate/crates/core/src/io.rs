//! Complex-matrix CSV fixtures.
//!
//! One CSV row per matrix row, each complex entry written as two columns
//! (real, imaginary) with 17 significant digits so values round-trip exactly.

use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

fn csv_err(path: &Path, source: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_complex_matrix(path: &Path, m: &DMatrix<Complex64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols())
            .flat_map(|j| [format!("{:.16e}", m[(i, j)].re), format!("{:.16e}", m[(i, j)].im)])
            .collect();
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_complex_matrix(path: &Path) -> Result<DMatrix<Complex64>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut rows: Vec<Vec<Complex64>> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let vals = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if vals.len() % 2 != 0 {
            return Err(Error::Config(format!("{}: odd number of columns", path.display())));
        }
        rows.push(vals.chunks(2).map(|c| Complex64::new(c[0], c[1])).collect());
    }
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!("{}: ragged rows", path.display())));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}
