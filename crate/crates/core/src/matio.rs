//! Dense matrix and vector I/O.
//!
//! Two matrix encodings are accepted:
//!
//! * CSV, one observation per row, no header.
//! * A binary container: a 16-byte little-endian header
//!   `b"VCMX" | n: u32 | p: u32 | width: u32` followed by `n·p` row-major
//!   IEEE-754 values of `width` bytes (4 or 8).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::spectral::GramSpectrum;

pub const BINARY_MAGIC: &[u8; 4] = b"VCMX";
pub const HEADER_LEN: usize = 16;

fn parse_field(s: &str, row: usize, col: usize) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("row {}, column {}: '{}' is not a number", row + 1, col + 1, s)))?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("row {}, column {}", row + 1, col + 1)));
    }
    Ok(v)
}

/// Read a headerless numeric CSV into an `n×p` matrix.
pub fn read_csv_matrix<R: Read>(reader: R) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        let row = rec.iter().enumerate().map(|(j, f)| parse_field(f, i, j)).collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse(format!(
                    "row {} has {} fields, expected {}",
                    i + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse("matrix CSV is empty".into()));
    }
    let p = rows[0].len();
    Ok(DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]))
}

pub fn write_csv_matrix<W: Write>(m: &DMatrix<f64>, writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| format!("{v:e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Read a vector stored as a single CSV column (or a single row).
pub fn read_csv_vector<R: Read>(reader: R) -> Result<Vec<f64>> {
    let m = read_csv_matrix(reader)?;
    if m.ncols() == 1 || m.nrows() == 1 {
        Ok(m.iter().copied().collect())
    } else {
        Err(Error::DimensionMismatch(format!(
            "expected a single column, got {}×{}",
            m.nrows(),
            m.ncols()
        )))
    }
}

pub fn write_csv_vector<W: Write>(v: &[f64], mut writer: W) -> Result<()> {
    for x in v {
        writeln!(writer, "{x:e}")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_binary_matrix<R: Read>(mut reader: R) -> Result<DMatrix<f64>> {
    let mut header = [0u8; HEADER_LEN];
    reader.read_exact(&mut header)?;
    if &header[0..4] != BINARY_MAGIC {
        return Err(Error::Parse("bad magic in binary matrix header".into()));
    }
    let word = |k: usize| u32::from_le_bytes(header[4 * k..4 * k + 4].try_into().unwrap()) as usize;
    let (n, p, width) = (word(1), word(2), word(3));
    if width != 4 && width != 8 {
        return Err(Error::Parse(format!("unsupported element width {width}")));
    }
    let mut buf = vec![0u8; n * p * width];
    reader.read_exact(&mut buf)?;
    let vals: Vec<f64> = if width == 8 {
        buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
    } else {
        buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
    };
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("binary matrix contains NaN or infinite entries".into()));
    }
    Ok(DMatrix::from_row_slice(n, p, &vals))
}

/// Write `m` as 8-byte little-endian doubles.
pub fn write_binary_matrix<W: Write>(m: &DMatrix<f64>, mut writer: W) -> Result<()> {
    let (n, p) = m.shape();
    let to_u32 = |v: usize| {
        u32::try_from(v).map_err(|_| Error::InvalidParameter(format!("dimension {v} exceeds u32")))
    };
    writer.write_all(BINARY_MAGIC)?;
    writer.write_all(&to_u32(n)?.to_le_bytes())?;
    writer.write_all(&to_u32(p)?.to_le_bytes())?;
    writer.write_all(&8u32.to_le_bytes())?;
    for i in 0..n {
        for j in 0..p {
            writer.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Load a matrix, picking the encoding from the file's leading bytes.
pub fn load_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut f = BufReader::new(File::open(path)?);
    let mut head = Vec::with_capacity(4);
    (&mut f).take(4).read_to_end(&mut head)?;
    let rest = head.as_slice().chain(f);
    if head == BINARY_MAGIC {
        read_binary_matrix(rest)
    } else {
        read_csv_matrix(rest)
    }
}

pub fn load_vector(path: &Path) -> Result<Vec<f64>> {
    read_csv_vector(BufReader::new(File::open(path)?))
}

pub fn save_matrix_csv(m: &DMatrix<f64>, path: &Path) -> Result<()> {
    write_csv_matrix(m, BufWriter::new(File::create(path)?))
}

pub fn save_vector_csv(v: &[f64], path: &Path) -> Result<()> {
    write_csv_vector(v, BufWriter::new(File::create(path)?))
}

/// Spectrum export: header `index,lambda`, 1-based index.
pub fn write_spectrum_csv<W: Write>(spec: &GramSpectrum, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["index", "lambda"])?;
    for (i, l) in spec.lambdas().iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{l:e}")])?;
    }
    w.flush()?;
    Ok(())
}
