//! Data records: the observed sample, the assembled instrument block and
//! the two-way sample split.

use std::collections::HashSet;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One sample of the linear IV model: outcome `y`, endogenous treatment `d`,
/// exogenous controls `x` and excluded instruments `z1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DVector<f64>,
    d: DVector<f64>,
    x: DMatrix<f64>,
    z1: DMatrix<f64>,
}

impl Dataset {
    pub fn new(y: DVector<f64>, d: DVector<f64>, x: DMatrix<f64>, z1: DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        if n < 2 {
            return Err(Error::Data(format!("need at least 2 observations, got {n}")));
        }
        for (name, rows) in [("d", d.len()), ("X", x.nrows()), ("Z1", z1.nrows())] {
            if rows != n {
                return Err(Error::Dimension(format!("{name} has {rows} rows, y has {n}")));
            }
        }
        for (name, finite) in [
            ("y", y.iter().all(|v| v.is_finite())),
            ("d", d.iter().all(|v| v.is_finite())),
            ("X", x.iter().all(|v| v.is_finite())),
            ("Z1", z1.iter().all(|v| v.is_finite())),
        ] {
            if !finite {
                return Err(Error::Data(format!("{name} contains non-finite entries")));
            }
        }
        Ok(Dataset { y, d, x, z1 })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p_x(&self) -> usize {
        self.x.ncols()
    }

    pub fn p_z1(&self) -> usize {
        self.z1.ncols()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn d(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z1(&self) -> &DMatrix<f64> {
        &self.z1
    }

    /// Rows `idx` of every block, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            y: select_entries(&self.y, idx),
            d: select_entries(&self.d, idx),
            x: self.x.select_rows(idx),
            z1: self.z1.select_rows(idx),
        }
    }

    /// Returns a copy with the outcome replaced.
    pub fn with_y(&self, y: DVector<f64>) -> Result<Dataset> {
        Dataset::new(y, self.d.clone(), self.x.clone(), self.z1.clone())
    }

    /// Writes the dataset as CSV with columns `y,d,x1..,z1..`.
    pub fn write_csv(&self, path: &Path) -> Result<CsvSchema> {
        let schema = CsvSchema::positional(self.p_x(), self.p_z1());
        let mut out = Vec::new();
        let header: Vec<&str> = std::iter::once(schema.y.as_str())
            .chain(std::iter::once(schema.d.as_str()))
            .chain(schema.x.iter().map(String::as_str))
            .chain(schema.z1.iter().map(String::as_str))
            .collect();
        writeln!(out, "{}", header.join(",")).expect("write to Vec");
        for i in 0..self.n() {
            let mut fields = vec![self.y[i].to_string(), self.d[i].to_string()];
            fields.extend((0..self.p_x()).map(|j| self.x[(i, j)].to_string()));
            fields.extend((0..self.p_z1()).map(|j| self.z1[(i, j)].to_string()));
            writeln!(out, "{}", fields.join(",")).expect("write to Vec");
        }
        crate::io::write_atomic(path, &out)?;
        Ok(schema)
    }
}

pub(crate) fn select_entries(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

/// Column-name mapping used to pull a [`Dataset`] out of a CSV file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub y: String,
    pub d: String,
    pub x: Vec<String>,
    pub z1: Vec<String>,
}

impl CsvSchema {
    /// `y, d, x1..x{p_x}, z1..z{p_z1}`.
    pub fn positional(p_x: usize, p_z1: usize) -> Self {
        CsvSchema {
            y: "y".into(),
            d: "d".into(),
            x: (1..=p_x).map(|j| format!("x{j}")).collect(),
            z1: (1..=p_z1).map(|j| format!("z{j}")).collect(),
        }
    }

    fn columns(&self) -> impl Iterator<Item = &str> {
        [self.y.as_str(), self.d.as_str()]
            .into_iter()
            .chain(self.x.iter().map(String::as_str))
            .chain(self.z1.iter().map(String::as_str))
    }
}

/// Loads a comma-separated file with a header row. Row numbers in errors are
/// 1-based data rows (the header is not counted).
pub fn load_dataset_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();

    let mut seen = HashSet::new();
    for h in &header {
        if !seen.insert(h.as_str()) {
            return Err(Error::Schema(format!("duplicate column {h:?} in header")));
        }
    }
    let mut requested = HashSet::new();
    let mut positions = Vec::new();
    for col in schema.columns() {
        if !requested.insert(col) {
            return Err(Error::Schema(format!("column {col:?} is mapped more than once")));
        }
        let pos = header
            .iter()
            .position(|h| h == col)
            .ok_or_else(|| Error::Schema(format!("column {col:?} not found in header")))?;
        positions.push((col, pos));
    }

    let width = positions.len();
    let mut values: Vec<f64> = Vec::new();
    let mut n = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        for &(col, pos) in &positions {
            let raw = record.get(pos).unwrap_or("").trim();
            let v: f64 = raw.parse().map_err(|_| Error::Cell {
                row,
                column: col.to_string(),
                value: raw.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::Cell {
                    row,
                    column: col.to_string(),
                    value: raw.to_string(),
                });
            }
            values.push(v);
        }
        n += 1;
    }

    // values is row-major with `width` columns
    let col = |k: usize| DVector::from_iterator(n, (0..n).map(|i| values[i * width + k]));
    let block = |offset: usize, p: usize| DMatrix::from_fn(n, p, |i, j| values[i * width + offset + j]);
    let p_x = schema.x.len();
    let p_z1 = schema.z1.len();
    Dataset::new(col(0), col(1), block(2, p_x), block(2 + p_x, p_z1))
}

/// The full instrument block `Z = [Z1 | X]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentBlock {
    z: DMatrix<f64>,
    p_z1: usize,
}

impl InstrumentBlock {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn p_z(&self) -> usize {
        self.z.ncols()
    }

    pub fn p_z1(&self) -> usize {
        self.p_z1
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.z
    }
}

pub fn build_instrument_block(dataset: &Dataset) -> InstrumentBlock {
    let (n, p_z1, p_x) = (dataset.n(), dataset.p_z1(), dataset.p_x());
    let mut z = DMatrix::zeros(n, p_z1 + p_x);
    z.columns_mut(0, p_z1).copy_from(dataset.z1());
    z.columns_mut(p_z1, p_x).copy_from(dataset.x());
    InstrumentBlock { z, p_z1 }
}

/// A partition of `0..n` into a first-stage part and an inference part.
/// Both parts are sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndex {
    pub part1: Vec<usize>,
    pub part2: Vec<usize>,
    pub seed: u64,
}

impl SplitIndex {
    pub fn n1(&self) -> usize {
        self.part1.len()
    }

    pub fn n2(&self) -> usize {
        self.part2.len()
    }

    pub fn n(&self) -> usize {
        self.n1() + self.n2()
    }
}

/// Seeded Fisher–Yates shuffle of `0..n`, cut after `round(fraction * n)`.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<SplitIndex> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    if n < 3 {
        return Err(Error::InvalidArgument(format!("cannot split {n} observations")));
    }
    let n1 = (fraction * n as f64).round() as usize;
    if n1 < 1 || n1 + 2 > n {
        return Err(Error::InvalidArgument(format!(
            "split of {n} at fraction {fraction} gives parts of size {n1} and {}",
            n - n1.min(n)
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);
    let mut part1 = perm[..n1].to_vec();
    let mut part2 = perm[n1..].to_vec();
    part1.sort_unstable();
    part2.sort_unstable();
    Ok(SplitIndex { part1, part2, seed })
}
