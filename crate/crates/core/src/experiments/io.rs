//! CSV and JSON files produced by runs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::solvers::Integration;

fn create(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(f)))
}

fn coord_header(d: usize) -> impl Iterator<Item = String> {
    (0..d).map(|k| format!("x_{k}"))
}

pub fn write_samples_csv(path: &Path, samples: ArrayView2<f64>) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(coord_header(samples.ncols()))?;
    for row in samples.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// One row per kept record of the first `max_trajectories` samples.
pub fn write_trajectories_csv(path: &Path, integ: &Integration, max_trajectories: usize) -> Result<()> {
    let mut w = create(path)?;
    let d = integ.records[0].x.ncols();
    let mut header: Vec<String> = ["traj_id", "step", "t", "nfe_so_far"].map(String::from).to_vec();
    header.extend(coord_header(d));
    header.extend(["max_abs_x", "max_abs_v", "delta_phi"].map(String::from));
    w.write_record(&header)?;
    let count = integ.n_samples().min(max_trajectories);
    for i in 0..count {
        for r in &integ.records {
            let mut row = vec![i.to_string(), r.step.to_string(), r.t.to_string(), r.nfe_so_far.to_string()];
            row.extend(r.x.row(i).iter().map(|v| v.to_string()));
            row.push(r.max_abs_x[i].to_string());
            row.push(r.max_abs_v[i].to_string());
            row.push(r.delta_phi.to_string());
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads the `x_0, x_1, ...` columns of a CSV file. For trajectory files only
/// the rows of the largest `step` are kept.
pub fn read_samples_csv(path: &Path) -> Result<Array2<f64>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(f);
    let headers = r.headers()?.clone();
    let mut cols = Vec::new();
    while let Some(i) = headers.iter().position(|h| h == format!("x_{}", cols.len())) {
        cols.push(i);
    }
    if cols.is_empty() {
        return Err(Error::config(path.display().to_string(), "no x_0 column"));
    }
    let step_col = headers.iter().position(|h| h == "step");
    let mut rows: Vec<(u64, Vec<f64>)> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::config(format!("{}:{}", path.display(), line + 2), "unparseable number"))
        };
        let step = match step_col {
            Some(i) => parse(i)? as u64,
            None => 0,
        };
        rows.push((step, cols.iter().map(|&i| parse(i)).collect::<Result<_>>()?));
    }
    let last = rows.iter().map(|r| r.0).max().unwrap_or(0);
    let kept: Vec<f64> = rows.into_iter().filter(|r| r.0 == last).flat_map(|r| r.1).collect();
    let n = kept.len() / cols.len();
    Ok(Array2::from_shape_vec((n, cols.len()), kept).expect("rows have equal width"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
