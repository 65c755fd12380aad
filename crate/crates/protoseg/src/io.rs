//! On-disk formats: the binary tensor file and checkpoint directories.
//!
//! Tensor file layout (little-endian throughout):
//!   magic `PTNS` (4 bytes), version u8 = 1, dtype u8 = 1 (IEEE-754 f32),
//!   rank u32, rank x u32 extents, then the row-major f32 payload.
//!
//! A checkpoint is a directory of tensor files plus a `manifest.txt` with
//! one `name<TAB>file` line per tensor.

use crate::error::{Error, Result};
use crate::tensor::TensorData;
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PTNS";
const VERSION: u8 = 1;
const DTYPE_F32: u8 = 1;

pub fn write_tensor(path: &Path, t: &TensorData<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(10 + 4 * t.shape().len() + 4 * t.numel());
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(DTYPE_F32);
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<TensorData<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_tensor(&bytes)
}

pub fn parse_tensor(bytes: &[u8]) -> Result<TensorData<f32>> {
    let fail = |offset: usize, msg: &str| Error::Format {
        offset,
        msg: msg.to_string(),
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(fail(0, "bad magic, expected PTNS"));
    }
    if bytes.len() < 5 || bytes[4] != VERSION {
        return Err(fail(4, "unsupported version, expected 1"));
    }
    if bytes.len() < 6 || bytes[5] != DTYPE_F32 {
        return Err(fail(5, "unsupported dtype, expected 1 (f32)"));
    }
    if bytes.len() < 10 {
        return Err(fail(6, "truncated rank field"));
    }
    let rank = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let mut off = 10;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        if bytes.len() < off + 4 {
            return Err(fail(off, "truncated extent"));
        }
        shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
        off += 4;
    }
    let numel: usize = shape.iter().product();
    if bytes.len() != off + 4 * numel {
        return Err(fail(off, "payload length does not match shape"));
    }
    let data = bytes[off..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    TensorData::new(shape, data)
}

/// Writes a named tensor collection as a checkpoint directory.
pub fn write_checkpoint(dir: &Path, tensors: &BTreeMap<String, TensorData<f32>>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut manifest = String::new();
    for (name, t) in tensors {
        let file = format!("{name}.ptns");
        write_tensor(&dir.join(&file), t)?;
        manifest.push_str(&format!("{name}\t{file}\n"));
    }
    let mpath = dir.join("manifest.txt");
    fs::write(&mpath, manifest).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    Ok(())
}

pub fn read_checkpoint(dir: &Path) -> Result<BTreeMap<String, TensorData<f32>>> {
    let mpath = dir.join("manifest.txt");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, file) = line.split_once('\t').ok_or_else(|| {
            Error::dataset(format!("malformed checkpoint manifest line: {line:?}"))
        })?;
        out.insert(name.to_string(), read_tensor(&dir.join(file))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::PortableRng;

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!("protoseg-io-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&d);
        fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tmpdir("rt");
        let mut rng = PortableRng::new(9);
        let data: Vec<f32> = (0..24).map(|_| rng.uniform_in(-10.0, 10.0) as f32).collect();
        let t = TensorData::new(vec![2, 3, 4], data).unwrap();
        let p = dir.join("t.ptns");
        write_tensor(&p, &t).unwrap();
        let back = read_tensor(&p).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_size_for_3x64x64() {
        let t = TensorData::<f32>::zeros(vec![3, 64, 64]);
        let p = tmpdir("hdr").join("t.ptns");
        write_tensor(&p, &t).unwrap();
        let len = fs::metadata(&p).unwrap().len() as usize;
        // 4 magic + 1 version + 1 dtype + 4 rank + 3*4 extents = 22 header bytes
        assert_eq!(len, 22 + 4 * 3 * 64 * 64);
    }

    #[test]
    fn rank_zero_scalar_round_trips() {
        let p = tmpdir("rk0").join("s.ptns");
        let t = TensorData::<f32>::scalar(-2.5);
        write_tensor(&p, &t).unwrap();
        let back = read_tensor(&p).unwrap();
        assert_eq!(back.shape(), &[] as &[usize]);
        assert_eq!(back.item(), -2.5);
    }

    #[test]
    fn parse_errors_carry_byte_offsets() {
        let err = parse_tensor(b"XXXX").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
        let err = parse_tensor(&[b'P', b'T', b'N', b'S', 9]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 4, .. }), "{err}");
        // valid header for shape [2] but truncated payload
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"PTNS");
        bytes.push(1);
        bytes.push(1);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        let err = parse_tensor(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 14, .. }), "{err}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tmpdir("ckpt");
        let mut map = BTreeMap::new();
        map.insert("a.w".to_string(), TensorData::filled(vec![2, 2], 1.5));
        map.insert("b.bias".to_string(), TensorData::filled(vec![3], -0.5));
        write_checkpoint(&dir, &map).unwrap();
        let back = read_checkpoint(&dir).unwrap();
        assert_eq!(back, map);
    }
}
