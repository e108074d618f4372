//! Datasets and their on-disk formats.
//!
//! Two input formats are supported: the SARCOS inverse-dynamics layout (28
//! numeric columns, 21 joint positions/velocities/accelerations followed by 7
//! torques, comma- or whitespace-delimited, no header) and a generic CSV with a
//! header row naming the target, source-feature and input columns.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

pub const SARCOS_INPUTS: usize = 21;
pub const SARCOS_TORQUES: usize = 7;

/// Row-aligned inputs `x`, source features `fs` and targets `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub fs: DMatrix<f64>,
    pub y: DVector<f64>,
    pub x_names: Vec<String>,
    pub fs_names: Vec<String>,
    pub y_name: String,
}

impl Dataset {
    /// Builds a dataset with generated column names `x0.., fs0.., y`.
    pub fn new(x: DMatrix<f64>, fs: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let x_names = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        let fs_names = (0..fs.ncols()).map(|j| format!("fs{j}")).collect();
        Self::with_names(x, fs, y, x_names, fs_names, "y".into())
    }

    pub fn with_names(
        x: DMatrix<f64>,
        fs: DMatrix<f64>,
        y: DVector<f64>,
        x_names: Vec<String>,
        fs_names: Vec<String>,
        y_name: String,
    ) -> Result<Self> {
        if x.nrows() != y.len() || fs.nrows() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "dataset: x has {} rows, fs {}, y {}",
                x.nrows(),
                fs.nrows(),
                y.len()
            )));
        }
        if x_names.len() != x.ncols() || fs_names.len() != fs.ncols() {
            return Err(Error::DimensionMismatch("dataset: column names do not match columns".into()));
        }
        let finite = x.iter().chain(fs.iter()).chain(y.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidArgument("dataset contains non-finite values".into()));
        }
        Ok(Dataset {
            x,
            fs,
            y,
            x_names,
            fs_names,
            y_name,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(indices),
            fs: self.fs.select_rows(indices),
            y: self.y.select_rows(indices),
            x_names: self.x_names.clone(),
            fs_names: self.fs_names.clone(),
            y_name: self.y_name.clone(),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let header: Vec<&str> = self
            .x_names
            .iter()
            .chain(&self.fs_names)
            .map(String::as_str)
            .chain(std::iter::once(self.y_name.as_str()))
            .collect();
        w.write_record(&header)?;
        for i in 0..self.len() {
            let row: Vec<String> = self
                .x
                .row(i)
                .iter()
                .chain(self.fs.row(i).iter())
                .chain(std::iter::once(&self.y[i]))
                .map(|v| v.to_string())
                .collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(File::create(path)?)
    }
}

/// Which header columns play which role in a generic CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CsvColumns {
    /// Target column; `"y"` when unset.
    pub y: Option<String>,
    /// Source-feature columns; every column whose name starts with `fs` when empty.
    pub fs: Vec<String>,
    /// Input columns; every remaining column when empty.
    pub x: Vec<String>,
}

/// Reads a header-row CSV into a dataset.
pub fn read_csv<R: Read>(reader: R, columns: &CsvColumns) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidArgument(format!("column {name:?} not in header")))
    };
    let y_name = columns.y.clone().unwrap_or_else(|| "y".into());
    let y_idx = find(&y_name)?;
    let fs_idx: Vec<usize> = if columns.fs.is_empty() {
        (0..header.len()).filter(|&j| j != y_idx && header[j].starts_with("fs")).collect()
    } else {
        columns.fs.iter().map(|c| find(c)).collect::<Result<_>>()?
    };
    let x_idx: Vec<usize> = if columns.x.is_empty() {
        (0..header.len()).filter(|j| *j != y_idx && !fs_idx.contains(j)).collect()
    } else {
        columns.x.iter().map(|c| find(c)).collect::<Result<_>>()?
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let line = i + 2;
        if record.len() != header.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let row = record
            .iter()
            .map(|f| parse_field(f, line))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Empty("csv: no data rows"));
    }
    let n = rows.len();
    let pick = |idx: &[usize]| DMatrix::from_fn(n, idx.len(), |i, j| rows[i][idx[j]]);
    Dataset::with_names(
        pick(&x_idx),
        pick(&fs_idx),
        DVector::from_fn(n, |i, _| rows[i][y_idx]),
        x_idx.iter().map(|&j| header[j].clone()).collect(),
        fs_idx.iter().map(|&j| header[j].clone()).collect(),
        y_name,
    )
}

pub fn load_csv(path: &Path, columns: &CsvColumns) -> Result<Dataset> {
    read_csv(File::open(path)?, columns)
}

fn parse_field(field: &str, line: usize) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("not a number: {field:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            msg: format!("non-finite value {field:?}"),
        });
    }
    Ok(v)
}

/// Parses SARCOS-format text.
///
/// `x` is the 21 input columns, `y` the torque of `target_joint` (1..=7) and
/// `fs` the other six torques in joint order. Blank lines and `#` comments are
/// skipped.
pub fn read_sarcos<R: Read>(reader: R, target_joint: usize) -> Result<Dataset> {
    if !(1..=SARCOS_TORQUES).contains(&target_joint) {
        return Err(Error::InvalidArgument(format!(
            "target joint must be in 1..={SARCOS_TORQUES}, got {target_joint}"
        )));
    }
    let width = SARCOS_INPUTS + SARCOS_TORQUES;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        if fields.len() != width {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected {width} columns, found {}", fields.len()),
            });
        }
        rows.push(fields.iter().map(|f| parse_field(f, i + 1)).collect::<Result<_>>()?);
    }
    if rows.is_empty() {
        return Err(Error::Empty("sarcos: no data rows"));
    }
    let n = rows.len();
    let target_col = SARCOS_INPUTS + target_joint - 1;
    let source_cols: Vec<usize> = (SARCOS_INPUTS..width).filter(|&c| c != target_col).collect();
    Dataset::with_names(
        DMatrix::from_fn(n, SARCOS_INPUTS, |i, j| rows[i][j]),
        DMatrix::from_fn(n, source_cols.len(), |i, j| rows[i][source_cols[j]]),
        DVector::from_fn(n, |i, _| rows[i][target_col]),
        (1..=SARCOS_INPUTS).map(|j| format!("input{j}")).collect(),
        source_cols.iter().map(|c| format!("torque{}", c - SARCOS_INPUTS + 1)).collect(),
        format!("torque{target_joint}"),
    )
}

pub fn load_sarcos(path: &Path, target_joint: usize) -> Result<Dataset> {
    read_sarcos(File::open(path)?, target_joint)
}

/// Writes a dataset loaded with [`read_sarcos`] back in SARCOS column order,
/// 17 significant digits per value.
pub fn write_sarcos<W: Write>(data: &Dataset, target_joint: usize, mut writer: W) -> Result<()> {
    if data.x.ncols() != SARCOS_INPUTS || data.fs.ncols() != SARCOS_TORQUES - 1 {
        return Err(Error::DimensionMismatch("write_sarcos: not a SARCOS-shaped dataset".into()));
    }
    if !(1..=SARCOS_TORQUES).contains(&target_joint) {
        return Err(Error::InvalidArgument(format!("target joint {target_joint} out of range")));
    }
    for i in 0..data.len() {
        let mut fields: Vec<String> = data.x.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        let source_row = data.fs.row(i);
        let mut source = source_row.iter();
        for joint in 1..=SARCOS_TORQUES {
            let v = if joint == target_joint {
                data.y[i]
            } else {
                *source.next().expect("six source torques")
            };
            fields.push(format!("{v:.16e}"));
        }
        writeln!(writer, "{}", fields.join(","))?;
    }
    Ok(())
}
