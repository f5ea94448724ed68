//! The `LMN1` tensor container.
//!
//! Layout: the four magic bytes `LMN1`, a little-endian `u64` header length,
//! that many bytes of UTF-8 JSON, then the raw little-endian `f32` payload of
//! every tensor in header order. The header records the format version,
//! byte order, element type, tensor names and shapes, and free-form metadata.
//! Volumes, masks, datasets and weights all use this one format.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LMN1";
pub const FORMAT_VERSION: u32 = 1;

/// Largest header accepted when reading (guards against corrupt lengths).
const MAX_HEADER: u64 = 64 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    byte_order: String,
    dtype: String,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    metadata: BTreeMap<String, Value>,
}

/// Named tensors plus metadata, as stored in one file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub metadata: BTreeMap<String, Value>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn with(mut self, name: impl Into<String>, tensor: Tensor<f32>) -> Self {
        self.push(name, tensor);
        self
    }

    pub fn meta(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.metadata.insert(key.to_string(), value.into());
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take(&mut self, name: &str) -> Option<Tensor<f32>> {
        let i = self.tensors.iter().position(|(n, _)| n == name)?;
        Some(self.tensors.remove(i).1)
    }

    /// Like [`Container::get`] but reports a missing tensor as a format error.
    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name).ok_or_else(|| Error::Format {
            offset: 0,
            detail: format!("missing tensor {name:?}"),
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            version: FORMAT_VERSION,
            byte_order: "little".into(),
            dtype: "f32".into(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let io = |e| Error::io("<stream>", e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        let mut buf = Vec::with_capacity(1 << 16);
        for (_, t) in &self.tensors {
            for chunk in t.data().chunks(1 << 14) {
                buf.clear();
                for v in chunk {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&buf).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory cannot fail");
        out
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = Tracked { inner: r, offset: 0 };
        let mut magic = [0u8; 4];
        r.exact(&mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format { offset: 0, detail: format!("bad magic {magic:?}, expected LMN1") });
        }
        let mut len = [0u8; 8];
        r.exact(&mut len, "header length")?;
        let len = u64::from_le_bytes(len);
        if len > MAX_HEADER {
            return Err(Error::Format { offset: 4, detail: format!("implausible header length {len}") });
        }
        let mut json = vec![0u8; len as usize];
        r.exact(&mut json, "header")?;
        let header: Header = serde_json::from_slice(&json)
            .map_err(|e| Error::Format { offset: 12, detail: format!("header is not valid JSON: {e}") })?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Format {
                offset: 12,
                detail: format!("unsupported format version {} (expected {FORMAT_VERSION})", header.version),
            });
        }
        if header.byte_order != "little" || header.dtype != "f32" {
            return Err(Error::Format {
                offset: 12,
                detail: format!("unsupported encoding {}/{}", header.byte_order, header.dtype),
            });
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut bytes = vec![0u8; 1 << 16];
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            while data.len() < n {
                let take = ((n - data.len()) * 4).min(bytes.len());
                r.exact(&mut bytes[..take], &entry.name)?;
                data.extend(bytes[..take].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])));
            }
            let t = Tensor::new(&entry.shape, data).map_err(|e| Error::Format {
                offset: r.offset,
                detail: format!("tensor {:?}: {e}", entry.name),
            })?;
            tensors.push((entry.name, t));
        }
        let mut probe = [0u8; 1];
        match r.inner.read(&mut probe) {
            Ok(0) => {}
            Ok(_) => {
                return Err(Error::Format { offset: r.offset, detail: "trailing bytes after payload".into() })
            }
            Err(e) => return Err(Error::io("<stream>", e)),
        }
        Ok(Container { tensors, metadata: header.metadata })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(file)).map_err(|e| with_path(e, path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file)).map_err(|e| with_path(e, path))
    }
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        Error::Format { offset, detail } => Error::Format { offset, detail: format!("{}: {detail}", path.display()) },
        other => other,
    }
}

struct Tracked<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Tracked<R> {
    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => {
                    return Err(Error::Format {
                        offset: self.offset + got as u64,
                        detail: format!("truncated while reading {what}"),
                    })
                }
                Ok(n) => got += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(Error::io("<stream>", e)),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        Container::new()
            .with("a", Tensor::new(&[2, 3], vec![1.0, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 7.0]).unwrap())
            .with("b", Tensor::scalar(42.0))
            .meta("seed", 7u64)
            .meta("config_hash", "abc")
    }

    #[test]
    fn round_trip_bytes() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"LMN1");
        let len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 12 + len + 7 * 4);
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
        assert_eq!(c.to_bytes(), bytes);
    }

    #[test]
    fn payload_is_little_endian_f32_in_header_order() {
        let bytes = sample().to_bytes();
        let tail = &bytes[bytes.len() - 4..];
        assert_eq!(tail, 42.0f32.to_le_bytes());
    }

    #[test]
    fn flipped_magic_refused() {
        let mut bytes = sample().to_bytes();
        bytes[0] ^= 0xff;
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().to_bytes();
        let cut = bytes.len() - 3;
        match Container::from_bytes(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, cut),
            other => panic!("unexpected {other:?}"),
        }
        assert!(Container::from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn version_mismatch_refused() {
        let text = String::from_utf8_lossy(&sample().to_bytes()).into_owned();
        assert!(text.contains("\"version\":1"));
        let mut bytes = sample().to_bytes();
        let pos = bytes.windows(11).position(|w| w == b"\"version\":1").unwrap();
        bytes[pos + 10] = b'2';
        let err = Container::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 2"));
    }
}
