//! Binary checkpoint format.
//!
//! ```text
//! "HFF1"                          magic
//! u32 LE                          tensor count
//! per tensor (name order):
//!   u16 LE name length, UTF-8 name
//!   u8 rank, rank × u32 LE extents
//!   extent-product × f32 LE values
//! u32 LE length, UTF-8 JSON       config echo
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HFF1";

/// Serializes parameters and a JSON config echo.
pub fn write_checkpoint<W: Write>(mut out: W, params: &ParamStore<f32>, config_json: &str) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| invalid_data(format!("name too long: {name}")))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(bytes)?;
        out.write_all(&[t.rank() as u8])?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.write_all(&(config_json.len() as u32).to_le_bytes())?;
    out.write_all(config_json.as_bytes())?;
    Ok(())
}

fn invalid_data(msg: String) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, msg)
}

pub fn encode_checkpoint(params: &ParamStore<f32>, config_json: &str) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params, config_json).expect("writing to memory cannot fail");
    buf
}

/// Parses a checkpoint, returning the parameters and the config echo.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamStore<f32>, String)> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let count = read_u32(&mut r)?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let mut len = [0u8; 2];
        read_exact(&mut r, &mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact(&mut r, &mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(format!("tensor name: {e}")))?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank)?;
        let shape = (0..rank[0])
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        if numel.saturating_mul(4) > r.len() {
            return Err(Error::Format(format!("truncated data for `{name}`")));
        }
        let mut raw = vec![0u8; numel * 4];
        read_exact(&mut r, &mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        params
            .insert(name, tensor)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    let len = read_u32(&mut r)? as usize;
    let mut json = vec![0u8; len];
    read_exact(&mut r, &mut json)?;
    if !r.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", r.len())));
    }
    let json = String::from_utf8(json).map_err(|e| Error::Format(format!("config echo: {e}")))?;
    Ok((params, json))
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("unexpected end of checkpoint".to_owned()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn save_checkpoint(path: &Path, params: &ParamStore<f32>, config_json: &str) -> Result<()> {
    fs::write(path, encode_checkpoint(params, config_json)).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore<f32>, String)> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout() {
        let mut p = ParamStore::new();
        p.insert("ab", Tensor::new(&[2], vec![1.0f32, -2.0]).unwrap()).unwrap();
        let bytes = encode_checkpoint(&p, "{}");
        let mut expected = b"HFF1".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u16.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.push(1);
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(b"{}");
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[3], vec![1.0f32, 2.0, 3.0]).unwrap()).unwrap();
        let bytes = encode_checkpoint(&p, "{\"a\":1}");
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let (back, json) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(json, "{\"a\":1}");
    }
}
