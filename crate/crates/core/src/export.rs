//! Shared CSV schema for estimates and predictions, and their comparison.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{CMat, MatField};

pub const HEADER: [&str; 7] = ["index", "block", "row", "col", "real", "imag", "stderr"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    /// Grid point or offset index.
    pub index: usize,
    /// `"00"`, `"01"`, `"10"`, `"11"` for covariance blocks, `"w"` for Wigner entries.
    pub block: String,
    pub row: usize,
    pub col: usize,
    pub real: f64,
    pub imag: f64,
    pub stderr: f64,
}

impl EstimateRow {
    fn key(&self) -> (usize, &str, usize, usize) {
        (self.index, self.block.as_str(), self.row, self.col)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EstimateTable {
    pub rows: Vec<EstimateRow>,
}

impl EstimateTable {
    pub fn push(&mut self, index: usize, block: &str, row: usize, col: usize, value: Complex64, stderr: f64) {
        self.rows.push(EstimateRow {
            index,
            block: block.to_string(),
            row,
            col,
            real: value.re,
            imag: value.im,
            stderr,
        });
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.index.to_string(),
                r.block.clone(),
                r.row.to_string(),
                r.col.to_string(),
                format!("{:e}", r.real),
                format!("{:e}", r.imag),
                format!("{:e}", r.stderr),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header: Vec<String> = r.headers()?.iter().map(|s| s.trim().to_string()).collect();
        if header != HEADER {
            return Err(Error::Schema(format!(
                "expected header {}, found {}",
                HEADER.join(","),
                header.join(",")
            )));
        }
        let mut rows = Vec::new();
        for rec in r.deserialize() {
            rows.push(rec?);
        }
        Ok(Self { rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Block label of entry `(r, c)` in a `width × width` matrix split into `n × n` blocks.
pub(crate) fn block_label(width: usize, r: usize, c: usize) -> (String, usize, usize) {
    let n = width / 2;
    if n > 0 && width % 2 == 0 {
        (format!("{}{}", r / n, c / n), r % n, c % n)
    } else {
        ("aa".to_string(), r, c)
    }
}

/// Exact covariance values at the given offsets, in the same layout as the empirical estimates.
pub fn covariance_table(offsets: &[Vec<i64>], corr: impl Fn(&[i64]) -> CMat) -> EstimateTable {
    let mut table = EstimateTable::default();
    for (o, off) in offsets.iter().enumerate() {
        let m = corr(off);
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                let (block, row, col) = block_label(m.nrows(), r, c);
                table.push(o, &block, row, col, m[(r, c)], 0.0);
            }
        }
    }
    table
}

/// Exact Wigner matrices on the grid, block label `"w"`.
pub fn wigner_table(field: &MatField) -> EstimateTable {
    let mut table = EstimateTable::default();
    for k in 0..field.points() {
        let m = field.get(k);
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                table.push(k, "w", r, c, m[(r, c)], 0.0);
            }
        }
    }
    table
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffEntry {
    pub index: usize,
    pub block: String,
    pub row: usize,
    pub col: usize,
    pub z: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiffReport {
    pub sigma: f64,
    pub entries: usize,
    pub beyond: Vec<DiffEntry>,
    pub max_z: f64,
    pub fraction_beyond: f64,
    /// Two-sided Gaussian tail probability at `sigma`.
    pub expected_rate: f64,
    pub pass: bool,
}

/// z-scores `|emp − th| / stderr` per matching entry; the empirical file supplies the
/// errors (the theory's are added in quadrature when present). Passes iff the
/// fraction of entries beyond `sigma` is below twice the Gaussian tail rate.
pub fn diff_tables(empirical: &EstimateTable, theory: &EstimateTable, sigma: f64) -> Result<DiffReport> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
    }
    if empirical.rows.len() != theory.rows.len() {
        return Err(Error::Schema(format!(
            "row counts differ: {} vs {}",
            empirical.rows.len(),
            theory.rows.len()
        )));
    }
    let mut lookup = std::collections::HashMap::new();
    for t in &theory.rows {
        lookup.insert(t.key(), t);
    }
    let mut beyond = Vec::new();
    let mut max_z: f64 = 0.0;
    let mut all = Vec::with_capacity(empirical.rows.len());
    for e in &empirical.rows {
        let t = lookup
            .get(&e.key())
            .ok_or_else(|| Error::Schema(format!("no theory entry for {:?}", e.key())))?;
        let se = e.stderr.hypot(t.stderr);
        let diff = Complex64::new(e.real - t.real, e.imag - t.imag).norm();
        let z = crate::statistics::z_value(diff, se);
        max_z = max_z.max(z);
        all.push(z);
        if z > sigma {
            beyond.push(DiffEntry {
                index: e.index,
                block: e.block.clone(),
                row: e.row,
                col: e.col,
                z,
            });
        }
    }
    let entries = all.len();
    let fraction_beyond = beyond.len() as f64 / entries.max(1) as f64;
    let expected_rate = statrs::function::erf::erfc(sigma / std::f64::consts::SQRT_2);
    Ok(DiffReport {
        sigma,
        entries,
        max_z,
        fraction_beyond,
        expected_rate,
        pass: fraction_beyond < 2.0 * expected_rate,
        beyond,
    })
}
