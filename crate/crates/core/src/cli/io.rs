//! CSV datasets and result tables. Every write goes to a temporary file in
//! the target directory and is renamed into place.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::CalibrationDataset;

pub const FIELD_FILE: &str = "field.csv";
pub const SIM_FILE: &str = "sim.csv";
pub const TRUTH_FILE: &str = "truth.csv";

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn numbered(prefix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|i| format!("{prefix}_{i}")).collect()
}

/// Header plus one row per matrix row, joined column-wise from `blocks`.
pub fn write_table(path: &Path, header: &[String], blocks: &[&DMatrix<f64>]) -> Result<()> {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::Format(e.to_string()))?;
    for r in 0..rows {
        let rec: Vec<String> = blocks
            .iter()
            .flat_map(|b| b.row(r).iter().map(|v| v.to_string()).collect::<Vec<_>>())
            .collect();
        w.write_record(&rec).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Strict numeric table: mandatory header, equal-length rows, finite values.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub data: DMatrix<f64>,
}

pub fn read_table(path: &Path) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Format(format!("{}: {other:?}", path.display())),
        })?;
    let parse_err = |row: usize, column: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        column,
        message,
    };
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_err(1, 0, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(parse_err(1, 0, "missing header row".into()));
    }
    let width = header.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        // Row numbers are 1-based file lines; the header is line 1.
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(line, 0, e.to_string()))?;
        if rec.len() != width {
            return Err(parse_err(
                line,
                rec.len().min(width) + 1,
                format!("expected {width} columns, found {}", rec.len()),
            ));
        }
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, c + 1, format!("`{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(line, c + 1, format!("`{field}` is not finite")));
            }
            values.push(v);
        }
        rows += 1;
    }
    Ok(Table {
        header,
        data: DMatrix::from_row_slice(rows, width, &values),
    })
}

/// Length of the `prefix_1, prefix_2, ...` run starting at `start`.
fn run_len(header: &[String], start: usize, prefix: &str) -> usize {
    header[start..]
        .iter()
        .enumerate()
        .take_while(|(i, h)| **h == format!("{prefix}_{}", i + 1))
        .count()
}

fn check_header(path: &Path, header: &[String], expected: &[String]) -> Result<()> {
    if header.len() != expected.len() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            row: 1,
            column: 0,
            message: format!(
                "expected {} columns ({}), found {}",
                expected.len(),
                expected.join(","),
                header.len()
            ),
        });
    }
    if let Some(c) = header.iter().zip(expected).position(|(a, b)| a != b) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            row: 1,
            column: c + 1,
            message: format!("expected column `{}`, found `{}`", expected[c], header[c]),
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub d1: usize,
    pub d2: usize,
    pub d_out: usize,
}

fn field_header(d: Dims) -> Vec<String> {
    let mut h = numbered("x", d.d1);
    h.extend(numbered("y", d.d_out));
    h
}

fn sim_header(d: Dims) -> Vec<String> {
    let mut h = numbered("x", d.d1);
    h.extend(numbered("t", d.d2));
    h.extend(numbered("z", d.d_out));
    h
}

/// Reads `field.csv` and `sim.csv` from `dir`. Dimensions come from
/// `expected` when given, otherwise from the simulator header.
pub fn load_dataset(dir: &Path, expected: Option<Dims>) -> Result<CalibrationDataset> {
    let field_path = dir.join(FIELD_FILE);
    let sim_path = dir.join(SIM_FILE);
    let sim = read_table(&sim_path)?;
    let field = read_table(&field_path)?;
    let dims = match expected {
        Some(d) => d,
        None => {
            let h = &sim.header;
            let d1 = run_len(h, 0, "x");
            let d2 = run_len(h, d1, "t");
            let d_out = run_len(h, d1 + d2, "z");
            Dims { d1, d2, d_out }
        }
    };
    check_header(&sim_path, &sim.header, &sim_header(dims))?;
    check_header(&field_path, &field.header, &field_header(dims))?;
    let Dims { d1, d2, d_out } = dims;
    CalibrationDataset::new(
        field.data.columns(0, d1).into_owned(),
        field.data.columns(d1, d_out).into_owned(),
        sim.data.columns(0, d1).into_owned(),
        sim.data.columns(d1, d2).into_owned(),
        sim.data.columns(d1 + d2, d_out).into_owned(),
    )
}

pub fn save_dataset(dir: &Path, data: &CalibrationDataset) -> Result<()> {
    let dims = Dims {
        d1: data.d1(),
        d2: data.d2(),
        d_out: data.d_out(),
    };
    write_table(&dir.join(FIELD_FILE), &field_header(dims), &[&data.x, &data.y])?;
    write_table(&dir.join(SIM_FILE), &sim_header(dims), &[&data.x_sim, &data.t, &data.z])
}

pub fn write_theta_table(path: &Path, theta: &DMatrix<f64>) -> Result<()> {
    write_table(path, &numbered("theta", theta.ncols()), &[theta])
}

/// A `theta_1..theta_d` table, e.g. posterior draws or the true value.
pub fn read_theta_table(path: &Path) -> Result<DMatrix<f64>> {
    let table = read_table(path)?;
    let d = table.header.len();
    check_header(path, &table.header, &numbered("theta", d))?;
    if table.data.nrows() == 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            row: 2,
            column: 0,
            message: "no rows".into(),
        });
    }
    Ok(table.data)
}
