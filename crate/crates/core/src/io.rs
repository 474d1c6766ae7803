//! CSV and binary writers.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, SlqError};
use crate::linalg::Mat;

/// 17 significant digits.
pub fn fmt_f(x: f64) -> String {
    format!("{x:.16e}")
}

pub struct CsvWriter {
    out: BufWriter<File>,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{}", header.join(","))?;
        Ok(CsvWriter { out })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        writeln!(self.out, "{}", fields.join(","))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Long format: t,row,col,value.
pub fn write_matrix_series(path: &Path, times: &[f64], mats: &[Mat]) -> Result<()> {
    let mut w = CsvWriter::create(path, &["t", "row", "col", "value"])?;
    for (t, m) in times.iter().zip(mats) {
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                w.row(&[fmt_f(*t), r.to_string(), c.to_string(), fmt_f(m[(r, c)])])?;
            }
        }
    }
    w.finish()
}

/// One named per-path, per-step field of a trajectory dump.
pub struct DumpField<'a> {
    pub name: &'a str,
    pub dim: usize,
    pub data: &'a [f64],
}

pub const MAGIC: &[u8; 4] = b"SLQ1";

/// Binary layout (little endian):
/// magic "SLQ1", u64 n_paths, u64 n_points, u64 n_fields, then per field
/// u64 name length, name bytes, u64 dim; then every field's data as f64 in
/// (path, point, component) order, fields in header order.
pub fn write_binary(path: &Path, n_paths: usize, n_points: usize, fields: &[DumpField]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    for v in [n_paths, n_points, fields.len()] {
        out.write_all(&(v as u64).to_le_bytes())?;
    }
    for f in fields {
        out.write_all(&(f.name.len() as u64).to_le_bytes())?;
        out.write_all(f.name.as_bytes())?;
        out.write_all(&(f.dim as u64).to_le_bytes())?;
    }
    for f in fields {
        if f.data.len() != n_paths * n_points * f.dim {
            return Err(SlqError::DimensionMismatch(format!("field {} has wrong length", f.name)));
        }
        for x in f.data {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub struct BinaryDump {
    pub n_paths: usize,
    pub n_points: usize,
    pub fields: Vec<(String, usize, Vec<f64>)>,
}

pub fn read_binary(path: &Path) -> Result<BinaryDump> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    let bad = || SlqError::Config("truncated or malformed binary dump".into());
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(bad());
    }
    let mut pos = 4;
    let u64_at = |pos: &mut usize| -> Result<u64> {
        let b = buf.get(*pos..*pos + 8).ok_or_else(bad)?;
        *pos += 8;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    };
    let n_paths = u64_at(&mut pos)? as usize;
    let n_points = u64_at(&mut pos)? as usize;
    let nf = u64_at(&mut pos)? as usize;
    let mut heads = Vec::with_capacity(nf);
    for _ in 0..nf {
        let len = u64_at(&mut pos)? as usize;
        let name = String::from_utf8(buf.get(pos..pos + len).ok_or_else(bad)?.to_vec()).map_err(|_| bad())?;
        pos += len;
        let dim = u64_at(&mut pos)? as usize;
        heads.push((name, dim));
    }
    let mut fields = Vec::with_capacity(nf);
    for (name, dim) in heads {
        let count = n_paths * n_points * dim;
        let bytes = buf.get(pos..pos + 8 * count).ok_or_else(bad)?;
        pos += 8 * count;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        fields.push((name, dim, data));
    }
    Ok(BinaryDump { n_paths, n_points, fields })
}
