//! Deterministic text formatting for CSV exports.

use std::io::Write;

use crate::Result;

/// 17 significant digits, scientific notation.
pub fn f64_field(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_row<W: Write>(w: &mut W, fields: &[String]) -> Result<()> {
    writeln!(w, "{}", fields.join(","))?;
    Ok(())
}

/// Column labels `prefix_ij` in row-major block order.
pub fn block_labels(prefix: &str, rows: usize, cols: usize) -> Vec<String> {
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(format!("{prefix}_{i}{j}"));
        }
    }
    out
}

/// Row-major entries of a matrix as formatted fields.
pub fn block_fields(m: &nalgebra::DMatrix<f64>) -> Vec<String> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(f64_field(m[(i, j)]));
        }
    }
    out
}
