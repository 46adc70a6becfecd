//! Named-tensor checkpoint container.
//!
//! Layout (little-endian): magic "FFCK", u32 entry count, then per entry
//! u32 name length, name bytes, u32 rank, u32 dims, f64 payload.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::params::ParameterSet;
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FFCK";

pub fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

pub fn write_named_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> std::io::Result<()> {
    write_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    write_u32(w, 2)?;
    write_u32(w, t.rows() as u32)?;
    write_u32(w, t.cols() as u32)?;
    for &v in t.data() {
        write_f64(w, v)?;
    }
    Ok(())
}

pub fn read_named_tensor(r: &mut impl Read, path: &Path) -> Result<(String, Tensor)> {
    let name_len = read_u32(r).map_err(|e| Error::io(path, e))? as usize;
    let mut name_buf = vec![0u8; name_len];
    r.read_exact(&mut name_buf).map_err(|e| Error::io(path, e))?;
    let name = String::from_utf8(name_buf)
        .map_err(|_| Error::format(path, "tensor name is not utf-8"))?;
    let rank = read_u32(r).map_err(|e| Error::io(path, e))?;
    if rank != 2 {
        return Err(Error::format(path, format!("unsupported rank {rank}")));
    }
    let rows = read_u32(r).map_err(|e| Error::io(path, e))? as usize;
    let cols = read_u32(r).map_err(|e| Error::io(path, e))? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(read_f64(r).map_err(|e| Error::io(path, e))?);
    }
    let t = Tensor::new(rows, cols, data).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((name, t))
}

/// Write every parameter, in set order, to an FFCK file.
pub fn save_parameters(path: &Path, params: &ParameterSet) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC)
        .map_err(|e| Error::io(path, e))?;
    write_u32(&mut w, params.len() as u32).map_err(|e| Error::io(path, e))?;
    for p in params.iter() {
        write_named_tensor(&mut w, p.name(), &p.value()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read an FFCK file into a name -> tensor map.
pub fn load_tensors(path: &Path) -> Result<HashMap<String, Tensor>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad magic, expected FFCK"));
    }
    let count = read_u32(&mut r).map_err(|e| Error::io(path, e))? as usize;
    let mut out = HashMap::with_capacity(count);
    for _ in 0..count {
        let (name, t) = read_named_tensor(&mut r, path)?;
        out.insert(name, t);
    }
    Ok(out)
}

/// Load an FFCK file into an existing parameter set (names and shapes must
/// match exactly).
pub fn load_parameters(path: &Path, params: &ParameterSet) -> Result<()> {
    let tensors = load_tensors(path)?;
    params.load_values(&tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.ffck");
        let mut ps = ParameterSet::new();
        ps.create("alpha", Tensor::row(vec![1.0, -2.5, 3.25e-17]))
            .unwrap();
        ps.create("beta", Tensor::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap())
            .unwrap();
        save_parameters(&path, &ps).unwrap();

        let loaded = load_tensors(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded["alpha"].data(), ps.get("alpha").unwrap().value().data());
        assert_eq!(loaded["beta"].data(), ps.get("beta").unwrap().value().data());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ffck");
        std::fs::write(&path, b"NOPE\x00\x00\x00\x00").unwrap();
        assert!(load_tensors(&path).is_err());
    }

    #[test]
    fn missing_parameter_on_load_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.ffck");
        let mut ps = ParameterSet::new();
        ps.create("a", Tensor::scalar(1.0)).unwrap();
        save_parameters(&path, &ps).unwrap();

        let mut bigger = ParameterSet::new();
        bigger.create("a", Tensor::scalar(0.0)).unwrap();
        bigger.create("b", Tensor::scalar(0.0)).unwrap();
        assert!(load_parameters(&path, &bigger).is_err());
    }
}
