//! On-disk formats.
//!
//! Matrix file (`.zmat`):
//! ```text
//! bytes 0..6   magic  b"ZSCMAT"
//! byte  6      dtype  1 = f64, 2 = i64
//! byte  7      reserved, 0
//! bytes 8..16  rows, u64 little-endian
//! bytes 16..24 cols, u64 little-endian
//! then         rows*cols values, row-major, little-endian
//! ```
//! A `.csv` path is accepted anywhere a matrix is read, for hand-editable
//! fixtures (plain comma-separated numbers, one row per line, no header).
//!
//! Model file:
//! ```text
//! bytes 0..8   magic  b"ZSCMODEL"
//! bytes 8..16  JSON header length, u64 little-endian
//! then         JSON header {"d":..,"a":..,"m":..,"tau":..}
//! then         f64 little-endian payload: W_X (d*a, row-major),
//!              b_X (a), W_A (a*m, row-major)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParameters;

const MATRIX_MAGIC: &[u8; 6] = b"ZSCMAT";
const MODEL_MAGIC: &[u8; 8] = b"ZSCMODEL";

const DTYPE_F64: u8 = 1;
const DTYPE_I64: u8 = 2;

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::BadFormat {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::io(path.display().to_string(), e)
}

fn is_csv(path: &Path) -> bool {
    path.extension().map_or(false, |e| e.eq_ignore_ascii_case("csv"))
}

fn write_header(w: &mut impl Write, dtype: u8, rows: usize, cols: usize) -> std::io::Result<()> {
    w.write_all(MATRIX_MAGIC)?;
    w.write_u8(dtype)?;
    w.write_u8(0)?;
    w.write_u64::<LittleEndian>(rows as u64)?;
    w.write_u64::<LittleEndian>(cols as u64)?;
    Ok(())
}

fn read_header(r: &mut impl Read, path: &Path, want_dtype: u8) -> Result<(usize, usize)> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MATRIX_MAGIC {
        return Err(bad(path, "bad magic bytes"));
    }
    let dtype = r.read_u8().map_err(|e| io_err(path, e))?;
    let _reserved = r.read_u8().map_err(|e| io_err(path, e))?;
    if dtype != want_dtype {
        return Err(bad(path, format!("dtype tag {dtype}, expected {want_dtype}")));
    }
    let rows = r.read_u64::<LittleEndian>().map_err(|e| io_err(path, e))? as usize;
    let cols = r.read_u64::<LittleEndian>().map_err(|e| io_err(path, e))? as usize;
    Ok((rows, cols))
}

pub fn write_f64_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut w = create(path)?;
    write_header(&mut w, DTYPE_F64, m.nrows(), m.ncols()).map_err(|e| io_err(path, e))?;
    for v in m.iter() {
        w.write_f64::<LittleEndian>(*v).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_f64_matrix(path: &Path) -> Result<Array2<f64>> {
    if is_csv(path) {
        return read_csv_matrix(path);
    }
    let mut r = open(path)?;
    let (rows, cols) = read_header(&mut r, path, DTYPE_F64)?;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(r.read_f64::<LittleEndian>().map_err(|e| io_err(path, e))?);
    }
    Array2::from_shape_vec((rows, cols), data).map_err(|e| bad(path, e.to_string()))
}

pub fn write_i64_matrix(path: &Path, m: &Array2<i64>) -> Result<()> {
    let mut w = create(path)?;
    write_header(&mut w, DTYPE_I64, m.nrows(), m.ncols()).map_err(|e| io_err(path, e))?;
    for v in m.iter() {
        w.write_i64::<LittleEndian>(*v).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_i64_matrix(path: &Path) -> Result<Array2<i64>> {
    if is_csv(path) {
        let floats = read_csv_matrix(path)?;
        let ints = floats.mapv(|v| v as i64);
        for (f, i) in floats.iter().zip(ints.iter()) {
            if *f != *i as f64 {
                return Err(bad(path, format!("non-integer value {f} in integer matrix")));
            }
        }
        return Ok(ints);
    }
    let mut r = open(path)?;
    let (rows, cols) = read_header(&mut r, path, DTYPE_I64)?;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(r.read_i64::<LittleEndian>().map_err(|e| io_err(path, e))?);
    }
    Array2::from_shape_vec((rows, cols), data).map_err(|e| bad(path, e.to_string()))
}

fn read_csv_matrix(path: &Path) -> Result<Array2<f64>> {
    let mut text = String::new();
    open(path)?
        .read_to_string(&mut text)
        .map_err(|e| io_err(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| bad(path, format!("line {}: {e}", lineno + 1)))?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(bad(path, format!("ragged row at line {}", lineno + 1)));
            }
        }
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((flat.len() / cols.max(1), cols), flat)
        .map_err(|e| bad(path, e.to_string()))
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    d: usize,
    a: usize,
    m: usize,
    tau: f64,
}

pub fn save_model(path: &Path, params: &ModelParameters<f64>) -> Result<()> {
    let header = ModelHeader {
        d: params.feature_dim(),
        a: params.attribute_dim(),
        m: params.metric_dim(),
        tau: params.tau,
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut w = create(path)?;
    w.write_all(MODEL_MAGIC).map_err(|e| io_err(path, e))?;
    w.write_u64::<LittleEndian>(header_bytes.len() as u64)
        .map_err(|e| io_err(path, e))?;
    w.write_all(&header_bytes).map_err(|e| io_err(path, e))?;
    for v in params
        .w_x
        .iter()
        .chain(params.b_x.iter())
        .chain(params.w_a.iter())
    {
        w.write_f64::<LittleEndian>(*v).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelParameters<f64>> {
    let mut r = open(path)?;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MODEL_MAGIC {
        return Err(bad(path, "bad model magic"));
    }
    let header_len = r.read_u64::<LittleEndian>().map_err(|e| io_err(path, e))? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(|e| io_err(path, e))?;
    let header: ModelHeader = serde_json::from_slice(&header_bytes).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut read_vec = |n: usize| -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(r.read_f64::<LittleEndian>().map_err(|e| io_err(path, e))?);
        }
        Ok(v)
    };
    let w_x = Array2::from_shape_vec((header.d, header.a), read_vec(header.d * header.a)?)
        .map_err(|e| bad(path, e.to_string()))?;
    let b_x = Array1::from_vec(read_vec(header.a)?);
    let w_a = Array2::from_shape_vec((header.a, header.m), read_vec(header.a * header.m)?)
        .map_err(|e| bad(path, e.to_string()))?;
    let params = ModelParameters {
        w_x,
        b_x,
        w_a,
        tau: header.tau,
    };
    if !params.is_finite() {
        return Err(bad(path, "non-finite parameter values"));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn f64_matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.zmat");
        let m = array![[1.5, -2.25], [0.0, 3.125], [f64::MIN_POSITIVE, 1e300]];
        write_f64_matrix(&path, &m).unwrap();
        assert_eq!(read_f64_matrix(&path).unwrap(), m);
    }

    #[test]
    fn i64_matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.zmat");
        let m = array![[1, -2], [i64::MAX, i64::MIN]];
        write_i64_matrix(&path, &m).unwrap();
        assert_eq!(read_i64_matrix(&path).unwrap(), m);
    }

    #[test]
    fn writes_are_canonical() {
        let dir = tempfile::tempdir().unwrap();
        let m = array![[1.5, -2.25], [0.0, 3.125]];
        write_f64_matrix(&dir.path().join("a.zmat"), &m).unwrap();
        write_f64_matrix(&dir.path().join("b.zmat"), &m).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join("a.zmat")).unwrap(),
            std::fs::read(dir.path().join("b.zmat")).unwrap()
        );
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.zmat");
        std::fs::write(&path, b"NOTMATRIX______________________").unwrap();
        assert!(matches!(read_f64_matrix(&path), Err(Error::BadFormat { .. })));
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.zmat");
        write_i64_matrix(&path, &array![[1, 2]]).unwrap();
        assert!(matches!(read_f64_matrix(&path), Err(Error::BadFormat { .. })));
    }

    #[test]
    fn csv_matrices_parse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "1.0, 2.0\n3.5,-4.5\n\n").unwrap();
        assert_eq!(read_f64_matrix(&path).unwrap(), array![[1.0, 2.0], [3.5, -4.5]]);
        std::fs::write(&path, "1,2\n3\n").unwrap();
        assert!(read_f64_matrix(&path).is_err(), "ragged rows rejected");
        std::fs::write(&path, "1,2\n3,4.5\n").unwrap();
        assert!(read_i64_matrix(&path).is_err(), "non-integer rejected");
    }

    #[test]
    fn model_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.zmodel");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = ModelParameters::<f64>::init(4, 3, 2, 0.01, &mut rng);
        save_model(&path, &params).unwrap();
        assert_eq!(load_model(&path).unwrap(), params);
    }

    #[test]
    fn model_save_is_canonical() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = ModelParameters::<f64>::init(3, 2, 2, 0.01, &mut rng);
        save_model(&dir.path().join("a.zmodel"), &params).unwrap();
        save_model(&dir.path().join("b.zmodel"), &params).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join("a.zmodel")).unwrap(),
            std::fs::read(dir.path().join("b.zmodel")).unwrap()
        );
    }

    #[test]
    fn non_finite_model_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.zmodel");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ModelParameters::<f64>::init(3, 2, 2, 0.01, &mut rng);
        params.w_a[[0, 0]] = f64::NAN;
        save_model(&path, &params).unwrap();
        assert!(matches!(load_model(&path), Err(Error::BadFormat { .. })));
    }
}
