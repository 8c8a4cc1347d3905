//! File formats.
//!
//! FLD: one JSON header line (`{"format":"FLD1","grid":…,"times":[…],"masked":bool}`),
//! then `T·R·C` little-endian `f64` values in slice-major, row-major order
//! (row 0 is the southern edge), then one byte per value (`1` = masked) when
//! `masked` is set.
//!
//! OBS: CSV with header `t,lat,lon,value`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FieldStack, GridSpec, Observation, TrackObservations};

const FLD_MAGIC: &str = "FLD1";

#[derive(Serialize, Deserialize)]
struct FldHeader {
    format: String,
    grid: GridSpec,
    times: Vec<i64>,
    masked: bool,
}

pub fn write_fld_to<W: Write>(stack: &FieldStack, mut out: W) -> Result<()> {
    let header = FldHeader {
        format: FLD_MAGIC.into(),
        grid: *stack.grid(),
        times: stack.times().to_vec(),
        masked: stack.mask().is_some(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for v in stack.values() {
        out.write_all(&v.to_le_bytes())?;
    }
    if let Some(mask) = stack.mask() {
        let bytes: Vec<u8> = mask.iter().map(|&m| m as u8).collect();
        out.write_all(&bytes)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_fld_from<R: BufRead>(mut input: R) -> Result<FieldStack> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    let header: FldHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Format(format!("FLD header: {e}")))?;
    if header.format != FLD_MAGIC {
        return Err(Error::Format(format!(
            "unknown field format {:?}",
            header.format
        )));
    }
    let n = header.times.len() * header.grid.len();
    let mut raw = vec![0u8; n * 8];
    input
        .read_exact(&mut raw)
        .map_err(|_| Error::Format(format!("FLD body shorter than {n} values")))?;
    let values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mask = if header.masked {
        let mut m = vec![0u8; n];
        input
            .read_exact(&mut m)
            .map_err(|_| Error::Format("FLD mask truncated".into()))?;
        Some(m.into_iter().map(|b| b != 0).collect())
    } else {
        None
    };
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after FLD body",
            rest.len()
        )));
    }
    FieldStack::new(header.grid, header.times, values, mask)
}

pub fn write_fld(stack: &FieldStack, path: impl AsRef<Path>) -> Result<()> {
    write_fld_to(stack, BufWriter::new(File::create(path)?))
}

pub fn read_fld(path: impl AsRef<Path>) -> Result<FieldStack> {
    read_fld_from(BufReader::new(File::open(path)?))
}

pub fn write_obs_to<W: Write>(obs: &TrackObservations, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for o in obs.iter() {
        w.serialize(o)?;
    }
    if obs.is_empty() {
        w.write_record(["t", "lat", "lon", "value"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_obs_from<R: Read>(input: R) -> Result<TrackObservations> {
    let mut r = csv::Reader::from_reader(input);
    let records = r
        .deserialize::<Observation>()
        .collect::<std::result::Result<Vec<_>, _>>()?;
    TrackObservations::new(records)
}

pub fn write_obs(obs: &TrackObservations, path: impl AsRef<Path>) -> Result<()> {
    write_obs_to(obs, BufWriter::new(File::create(path)?))
}

pub fn read_obs(path: impl AsRef<Path>) -> Result<TrackObservations> {
    read_obs_from(BufReader::new(File::open(path)?))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Linear scaling used by a PGM render.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgmScale {
    pub min: f64,
    pub max: f64,
    pub rows: usize,
    pub cols: usize,
}

/// 8-bit binary PGM of one slice, north up, min–max scaled over unmasked
/// cells (masked cells are black).
pub fn render_pgm<W: Write>(stack: &FieldStack, ti: usize, mut out: W) -> Result<PgmScale> {
    let g = stack.grid();
    let (rows, cols) = (g.n_rows(), g.n_cols());
    let slice = stack.slice(ti);
    let live = |i: usize, j: usize| !stack.is_masked(ti, i, j);
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..rows {
        for j in 0..cols {
            if live(i, j) {
                min = min.min(slice[i * cols + j]);
                max = max.max(slice[i * cols + j]);
            }
        }
    }
    if min > max {
        (min, max) = (0.0, 0.0);
    }
    write!(out, "P5\n{cols} {rows}\n255\n")?;
    let span = max - min;
    let mut bytes = Vec::with_capacity(rows * cols);
    for i in (0..rows).rev() {
        for j in 0..cols {
            let b = if !live(i, j) || span <= 0.0 {
                0
            } else {
                ((slice[i * cols + j] - min) / span * 255.0)
                    .round()
                    .clamp(0.0, 255.0) as u8
            };
            bytes.push(b);
        }
    }
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(PgmScale {
        min,
        max,
        rows,
        cols,
    })
}

/// Writes `<path>` and a sidecar `<path>.json` holding the scaling.
pub fn write_pgm(stack: &FieldStack, ti: usize, path: impl AsRef<Path>) -> Result<PgmScale> {
    let path = path.as_ref();
    let scale = render_pgm(stack, ti, BufWriter::new(File::create(path)?))?;
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".json");
    write_json(&scale, sidecar)?;
    Ok(scale)
}
