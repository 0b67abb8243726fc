//! `S2TF` container: named 32-bit tensors in one little-endian file.
//!
//! Layout: magic `S2TF`, version `u16`, entry count `u32`; then per entry a
//! `u16` name length, the UTF-8 name, a `u8` rank, `u32` extents and the
//! `f32` payload.

use std::collections::HashSet;
use std::path::Path;

use super::DataError;
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"S2TF";
pub const VERSION: u16 = 1;

pub type NamedTensors = Vec<(String, Tensor<f32>)>;

pub fn encode(entries: &[(String, Tensor<f32>)]) -> Result<Vec<u8>, DataError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        if !seen.insert(name.as_str()) {
            return Err(DataError::Invalid(format!("duplicate tensor name `{name}`")));
        }
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| DataError::Invalid(format!("tensor name of {} bytes is too long", bytes.len())))?;
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| DataError::Invalid(format!("rank {} too large", t.shape().len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| DataError::Invalid(format!("extent {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        if self.buf.len() - self.pos < n {
            return Err(DataError::Format {
                offset: self.pos,
                reason: format!("truncated {what}: need {n} bytes, {} remain", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, DataError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<NamedTensors, DataError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(DataError::Format {
            offset: 0,
            reason: "bad magic, expected S2TF".into(),
        });
    }
    let at = r.pos;
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(DataError::Format {
            offset: at,
            reason: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("entry count")?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let at = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| DataError::Format {
                offset: at + 2,
                reason: "name is not UTF-8".into(),
            })?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(DataError::Format {
                offset: at,
                reason: format!("duplicate tensor name `{name}`"),
            });
        }
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let at = r.pos;
        let payload = r.take(numel * 4, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| DataError::Format {
            offset: at,
            reason: e.to_string(),
        })?;
        out.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(DataError::Format {
            offset: r.pos,
            reason: format!("{} trailing bytes", buf.len() - r.pos),
        });
    }
    Ok(out)
}

pub fn write(path: &Path, entries: &[(String, Tensor<f32>)]) -> Result<(), DataError> {
    if path.as_os_str().is_empty() {
        return Err(DataError::Invalid("empty output path".into()));
    }
    let bytes = encode(entries)?;
    std::fs::write(path, bytes).map_err(|e| DataError::io(path, e))
}

pub fn read(path: &Path) -> Result<NamedTensors, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        DataError::Format { offset, reason } => DataError::Format {
            offset,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    })
}

/// Looks up an entry by name.
pub fn take(entries: &mut NamedTensors, name: &str) -> Result<Tensor<f32>, DataError> {
    let i = entries
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| DataError::Invalid(format!("missing tensor `{name}`")))?;
    Ok(entries.swap_remove(i).1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let t = Tensor::from_fn(&[3, 4, 5], |i| (i as f32 * 0.37).sin() / 3.0);
        let s = Tensor::scalar(f32::MIN_POSITIVE);
        let entries = vec![("a".to_string(), t), ("scalar".to_string(), s)];
        let back = decode(&encode(&entries).unwrap()).unwrap();
        assert_eq!(back.len(), 2);
        for ((n1, t1), (n2, t2)) in entries.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn empty_container() {
        let bytes = encode(&[]).unwrap();
        assert_eq!(bytes.len(), 10);
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn truncated_payload_names_offset() {
        let t = Tensor::from_fn(&[2, 2], |i| i as f32);
        let bytes = encode(&[("x".to_string(), t)]).unwrap();
        // header 10 + name len 2 + name 1 + rank 1 + extents 8 = 22
        let err = decode(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            DataError::Format { offset, reason } => {
                assert_eq!(offset, 22);
                assert!(reason.contains("payload"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode(&[]).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(DataError::Format { offset: 4, .. })));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(DataError::Format { offset: 0, .. })));
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = Tensor::<f32>::zeros(&[1]);
        assert!(encode(&[("a".into(), t.clone()), ("a".into(), t)]).is_err());
    }
}
