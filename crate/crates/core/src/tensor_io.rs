//! Binary tensor containers.
//!
//! Two little-endian formats cover every persisted array. Single-tensor
//! files (magic `CWTB`) store fields, patches, label channels, and
//! embeddings. Named-tensor packs (magic `CWTP`) store model checkpoints.
//! Data is always 32-bit float, row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayBase, Data, Dimension};

use crate::error::{Error, Result};
use crate::num::Scalar;

const TENSOR_MAGIC: &[u8; 4] = b"CWTB";
const PACK_MAGIC: &[u8; 4] = b"CWTP";
const FORMAT_VERSION: u16 = 1;
const DTYPE_F32: u8 = 1;
const MAX_NDIM: usize = 8;
const MAX_ELEMENTS: u64 = 1 << 31;

fn write_header(w: &mut impl Write, magic: &[u8; 4]) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    Ok(())
}

fn check_header(r: &mut impl Read, magic: &[u8; 4], what: &str) -> Result<()> {
    let mut got = [0u8; 4];
    r.read_exact(&mut got)?;
    if &got != magic {
        return Err(Error::format(format!("{what}: bad magic {got:?}")));
    }
    let mut ver = [0u8; 2];
    r.read_exact(&mut ver)?;
    let version = u16::from_le_bytes(ver);
    if version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "{what}: unsupported version {version} (expected {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

fn write_tensor_body(w: &mut impl Write, shape: &[usize], data: &[f32]) -> Result<()> {
    if shape.len() > MAX_NDIM {
        return Err(Error::argument(format!("tensor rank {} exceeds {MAX_NDIM}", shape.len())));
    }
    let count: usize = shape.iter().product();
    if count != data.len() {
        return Err(Error::dimension(format!(
            "shape {shape:?} implies {count} elements, data has {}",
            data.len()
        )));
    }
    w.write_all(&[DTYPE_F32, shape.len() as u8])?;
    for &dim in shape {
        let dim = u32::try_from(dim)
            .map_err(|_| Error::argument(format!("dimension {dim} exceeds u32")))?;
        w.write_all(&dim.to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor_body(r: &mut impl Read, what: &str) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    if head[0] != DTYPE_F32 {
        return Err(Error::format(format!("{what}: unsupported dtype {}", head[0])));
    }
    let ndim = head[1] as usize;
    if ndim > MAX_NDIM {
        return Err(Error::format(format!("{what}: rank {ndim} exceeds {MAX_NDIM}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut count: u64 = 1;
    for _ in 0..ndim {
        let mut dim = [0u8; 4];
        r.read_exact(&mut dim)?;
        let dim = u32::from_le_bytes(dim) as usize;
        count = count.saturating_mul(dim as u64);
        shape.push(dim);
    }
    if count > MAX_ELEMENTS {
        return Err(Error::format(format!("{what}: element count {count} exceeds limit")));
    }
    let mut bytes = vec![0u8; count as usize * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((shape, data))
}

/// Writes one raw tensor to `path`.
pub fn write_tensor(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, TENSOR_MAGIC)?;
    write_tensor_body(&mut w, shape, data)?;
    w.flush()?;
    Ok(())
}

/// Reads one raw tensor from `path`.
pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut r = BufReader::new(File::open(path)?);
    check_header(&mut r, TENSOR_MAGIC, "tensor file")?;
    read_tensor_body(&mut r, "tensor file")
}

/// Writes a named collection of tensors (a checkpoint) to `path`.
pub fn write_tensor_pack(path: &Path, entries: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, PACK_MAGIC)?;
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::argument("too many tensors in pack".to_string()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, shape, data) in entries {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::argument(format!("tensor name too long: {name}")))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor_body(&mut w, shape, data)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a named tensor pack, preserving entry order.
pub fn read_tensor_pack(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
    let mut r = BufReader::new(File::open(path)?);
    check_header(&mut r, PACK_MAGIC, "tensor pack")?;
    let mut count = [0u8; 4];
    r.read_exact(&mut count)?;
    let count = u32::from_le_bytes(count);
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut name_len = [0u8; 2];
        r.read_exact(&mut name_len)?;
        let name_len = u16::from_le_bytes(name_len) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format("tensor pack: non-UTF-8 name".to_string()))?;
        let (shape, data) = read_tensor_body(&mut r, "tensor pack")?;
        entries.push((name, shape, data));
    }
    Ok(entries)
}

/// Writes any ndarray in logical (row-major) order, converting to f32.
pub fn write_array<S, A, D>(path: &Path, arr: &ArrayBase<A, D>) -> Result<()>
where
    S: Scalar,
    A: Data<Elem = S>,
    D: Dimension,
{
    let shape = arr.shape().to_vec();
    let data: Vec<f32> = arr.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
    write_tensor(path, &shape, &data)
}

fn convert<S: Scalar>(data: Vec<f32>) -> Vec<S> {
    data.into_iter().map(|v| S::from(v).expect("f32 fits in scalar")).collect()
}

/// Reads a rank-1 tensor into an `Array1`.
pub fn read_array1<S: Scalar>(path: &Path) -> Result<Array1<S>> {
    let (shape, data) = read_tensor(path)?;
    if shape.len() != 1 {
        return Err(Error::format(format!("expected rank-1 tensor, got rank {}", shape.len())));
    }
    Ok(Array1::from_vec(convert(data)))
}

/// Reads a rank-2 tensor into an `Array2`.
pub fn read_array2<S: Scalar>(path: &Path) -> Result<Array2<S>> {
    let (shape, data) = read_tensor(path)?;
    if shape.len() != 2 {
        return Err(Error::format(format!("expected rank-2 tensor, got rank {}", shape.len())));
    }
    Array2::from_shape_vec((shape[0], shape[1]), convert(data))
        .map_err(|e| Error::format(format!("tensor shape mismatch: {e}")))
}

/// Reads a rank-3 tensor into an `Array3`.
pub fn read_array3<S: Scalar>(path: &Path) -> Result<Array3<S>> {
    let (shape, data) = read_tensor(path)?;
    if shape.len() != 3 {
        return Err(Error::format(format!("expected rank-3 tensor, got rank {}", shape.len())));
    }
    Array3::from_shape_vec((shape[0], shape[1], shape[2]), convert(data))
        .map_err(|e| Error::format(format!("tensor shape mismatch: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn tensor_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cwt");
        let arr = array![[[1.0f32, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]]];
        write_array(&path, &arr).unwrap();
        let back = read_array3::<f32>(&path).unwrap();
        assert_eq!(arr, back);
    }

    #[test]
    fn f64_values_survive_f32_storage_when_representable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cwt");
        let arr = array![[0.5f64, -1.25], [3.0, 0.0]];
        write_array(&path, &arr).unwrap();
        let back = read_array2::<f64>(&path).unwrap();
        assert_eq!(arr, back);
    }

    #[test]
    fn pack_round_trip_preserves_order_and_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.cwt");
        let entries = vec![
            ("w1".to_string(), vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0]),
            ("b1".to_string(), vec![2], vec![0.5, -0.5]),
        ];
        write_tensor_pack(&path, &entries).unwrap();
        let back = read_tensor_pack(&path).unwrap();
        assert_eq!(entries, back);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cwt");
        std::fs::write(&path, b"NOPE\x01\x00").unwrap();
        let err = read_tensor(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "got {err:?}");
    }

    #[test]
    fn shape_data_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cwt");
        let err = write_tensor(&path, &[2, 3], &[0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)), "got {err:?}");
    }
}
