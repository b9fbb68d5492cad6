//! Text and JSON file formats.
//!
//! Floats are written with Rust's shortest round-trip formatting, so every
//! writer/reader pair here reproduces values bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fvm::FvmOperator;
use crate::linalg::CscMatrix;
use crate::measure::{Measure, MeasureFile, SampleCloud};
use crate::pfo::{MeshFile, UlamMatrix, UnstructuredMesh};
use crate::systems::Trajectory;

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(open(path)?)?)
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Parse(format!("line {line}: `{s}` is not a number")))
}

fn join(values: impl Iterator<Item = f64>) -> String {
    values.map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Reads a header line and numeric rows with the header's width.
fn read_table(r: impl BufRead) -> Result<(Vec<String>, Vec<f64>)> {
    let mut lines = r.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Parse("empty CSV file".into()))??
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut data = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(Error::Parse(format!("line {}: {} fields, header has {}", k + 2, fields.len(), header.len())));
        }
        for f in fields {
            data.push(parse_f64(f, k + 2)?);
        }
    }
    Ok((header, data))
}

/// Header `t,x1,...,xd`; row `k` has `t = k dt`.
pub fn write_trajectory_csv(traj: &Trajectory, mut w: impl Write) -> Result<()> {
    let names: Vec<String> = (1..=traj.dim()).map(|i| format!("x{i}")).collect();
    writeln!(w, "t,{}", names.join(","))?;
    for (k, x) in traj.states().enumerate() {
        writeln!(w, "{},{}", k as f64 * traj.dt, join(x.iter().copied()))?;
    }
    Ok(())
}

/// Inverse of [`write_trajectory_csv`]; `dt` is read from the first two rows.
pub fn read_trajectory_csv(r: impl BufRead) -> Result<Trajectory> {
    let (header, data) = read_table(r)?;
    if header.first().map(String::as_str) != Some("t") || header.len() < 2 {
        return Err(Error::Parse("trajectory CSV must start with a `t` column and at least one state column".into()));
    }
    let width = header.len();
    let rows = data.len() / width;
    let dt = if rows > 1 { data[width] - data[0] } else { 0.0 };
    let states: Vec<f64> = data.chunks_exact(width).flat_map(|row| row[1..].iter().copied()).collect();
    Trajectory::from_flat(width - 1, states, dt, 0)
}

/// Header `x1,...,xd` plus a trailing `w` column for weighted clouds.
pub fn write_cloud_csv(cloud: &SampleCloud, mut w: impl Write) -> Result<()> {
    let mut names: Vec<String> = (1..=cloud.dim()).map(|i| format!("x{i}")).collect();
    if cloud.weights().is_some() {
        names.push("w".into());
    }
    writeln!(w, "{}", names.join(","))?;
    for (k, x) in cloud.points().enumerate() {
        match cloud.weights() {
            Some(ws) => writeln!(w, "{},{}", join(x.iter().copied()), ws[k])?,
            None => writeln!(w, "{}", join(x.iter().copied()))?,
        }
    }
    Ok(())
}

pub fn read_cloud_csv(r: impl BufRead) -> Result<SampleCloud> {
    let (header, data) = read_table(r)?;
    let width = header.len();
    if header.last().map(String::as_str) == Some("w") {
        let dim = width - 1;
        let points = data.chunks_exact(width).flat_map(|row| row[..dim].iter().copied()).collect();
        let weights = data.chunks_exact(width).map(|row| row[dim]).collect();
        SampleCloud::weighted(dim, points, weights)
    } else {
        SampleCloud::new(width, data)
    }
}

pub fn write_measure_json(m: &Measure, path: &Path) -> Result<()> {
    write_json(path, &MeasureFile::from(m))
}

pub fn read_measure_json(path: &Path) -> Result<Measure> {
    Measure::try_from(read_json::<MeasureFile>(path)?)
}

pub fn write_mesh_json(mesh: &UnstructuredMesh, path: &Path) -> Result<()> {
    write_json(path, &mesh.to_file())
}

pub fn read_mesh_json(path: &Path) -> Result<UnstructuredMesh> {
    UnstructuredMesh::try_from(read_json::<MeshFile>(path)?)
}

pub fn write_ulam(m: &UlamMatrix, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    m.write_coo(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_ulam(path: &Path) -> Result<UlamMatrix> {
    UlamMatrix::read_coo(open(path)?)
}

/// Writes `K` as `row col value` lines to `<stem>.coo` and its grid to `<stem>.grid.json`.
pub fn write_operator(op: &FvmOperator, dir: &Path, stem: &str) -> Result<()> {
    let mut w = create(&dir.join(format!("{stem}.coo")))?;
    writeln!(w, "# n {} dt {} diffusion {}", op.n_cells(), op.dt(), op.diffusion())?;
    for (r, c, v) in op.k().triplets() {
        writeln!(w, "{r} {c} {v}")?;
    }
    w.flush()?;
    write_json(&dir.join(format!("{stem}.grid.json")), op.grid())
}

/// Reads the `K` matrix written by [`write_operator`].
pub fn read_operator_matrix(path: &Path) -> Result<CscMatrix> {
    let mut lines = open(path)?.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty operator file".into()))??;
    let n: usize = match header.split_whitespace().collect::<Vec<_>>().as_slice() {
        ["#", "n", n, ..] => n.parse().map_err(|_| Error::Parse(format!("bad operator header `{header}`")))?,
        _ => return Err(Error::Parse(format!("bad operator header `{header}`"))),
    };
    let mut triplets = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(Error::Parse(format!("line {}: expected `row col value`", k + 2)));
        }
        let idx = |s: &str| s.parse::<usize>().map_err(|_| Error::Parse(format!("line {}: bad index `{s}`", k + 2)));
        let (r, c) = (idx(f[0])?, idx(f[1])?);
        if r >= n || c >= n {
            return Err(Error::Parse(format!("line {}: index out of range", k + 2)));
        }
        triplets.push((r, c, parse_f64(f[2], k + 2)?));
    }
    Ok(CscMatrix::from_triplets(n, n, &triplets))
}

/// One row per grid cell: center coordinates, weight and density.
pub fn write_density_csv(m: &Measure, mut w: impl Write) -> Result<()> {
    let grid = m.grid().ok_or_else(|| Error::SupportMismatch("density CSV needs a grid measure".into()))?;
    let names: Vec<String> = (1..=grid.dim()).map(|i| format!("x{i}")).collect();
    writeln!(w, "{},weight,density", names.join(","))?;
    for (j, (wj, dj)) in m.weights().iter().zip(m.density()).enumerate() {
        writeln!(w, "{},{wj},{dj}", join(grid.center(j).into_iter()))?;
    }
    Ok(())
}

/// Single-column series, e.g. a loss history.
pub fn write_series_csv(name: &str, values: &[f64], mut w: impl Write) -> Result<()> {
    writeln!(w, "step,{name}")?;
    for (k, v) in values.iter().enumerate() {
        writeln!(w, "{k},{v}")?;
    }
    Ok(())
}
