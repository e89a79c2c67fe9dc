//! Named parameter traversal and the scalar-stream file format.
//!
//! Layout of a scalar stream (all integers little-endian):
//!
//! ```text
//! magic     4 bytes   b"MVSS"
//! version   u16       1
//! hdr_len   u32       length of the JSON header in bytes
//! header    hdr_len   UTF-8 JSON: {"precision", "meta", "tensors": [{"name", "shape"}]}
//! payload   ...       every tensor's scalars, row-major, in header order
//! ```

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::{Precision, Scalar, Tensor};

pub const STREAM_MAGIC: &[u8; 4] = b"MVSS";
pub const STREAM_VERSION: u16 = 1;

/// A model component with named trainable tensors.
///
/// `visit` and `visit_mut` must walk tensors in the same order; that order is
/// also the order in which `bind` registers parameters on a backend.
pub trait Parameters<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    /// Replaces every tensor by the entry with the same name and shape.
    fn load_tensors(&mut self, named: &[(String, Tensor<T>)]) -> Result<()> {
        let mut err = None;
        let mut used = 0;
        self.visit_mut("", &mut |name, t| {
            if err.is_some() {
                return;
            }
            match named.iter().find(|(n, _)| n == name) {
                Some((_, src)) if src.shape() == t.shape() => {
                    *t = src.clone();
                    used += 1;
                }
                Some((_, src)) => {
                    err = Some(Error::Config(format!(
                        "tensor '{name}' has shape {:?} in file, model expects {:?}",
                        src.shape(),
                        t.shape()
                    )))
                }
                None => err = Some(Error::Config(format!("tensor '{name}' missing from file"))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if used != named.len() {
            return Err(Error::Config(format!(
                "file holds {} tensors, model consumed {used}",
                named.len()
            )));
        }
        Ok(())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StreamHeader {
    precision: Precision,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

pub fn encode_stream<T: Scalar>(meta: Value, tensors: &[(String, Tensor<T>)]) -> Result<Vec<u8>> {
    let header = StreamHeader {
        precision: T::PRECISION,
        meta,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let payload: usize = tensors.iter().map(|(_, t)| t.len()).sum();
    let mut out = Vec::with_capacity(10 + json.len() + payload * T::PRECISION.bytes());
    out.extend_from_slice(STREAM_MAGIC);
    out.extend_from_slice(&STREAM_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub type DecodedStream<T> = (Value, Vec<(String, Tensor<T>)>);

pub fn decode_stream<T: Scalar>(bytes: &[u8]) -> Result<DecodedStream<T>> {
    if bytes.len() < 10 {
        return Err(Error::format(bytes.len(), "truncated stream preamble"));
    }
    if &bytes[..4] != STREAM_MAGIC {
        return Err(Error::format(0, "bad magic, expected MVSS"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != STREAM_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let hdr_len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let body = 10 + hdr_len;
    if bytes.len() < body {
        return Err(Error::format(bytes.len(), "truncated header"));
    }
    let header: StreamHeader = serde_json::from_slice(&bytes[10..body])
        .map_err(|e| Error::format(10, format!("bad header json: {e}")))?;
    if header.precision != T::PRECISION {
        return Err(Error::Config(format!(
            "stream holds {} scalars but {} was requested",
            header.precision,
            T::PRECISION
        )));
    }
    let width = T::PRECISION.bytes();
    let mut offset = body;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = offset + n * width;
        if end > bytes.len() {
            return Err(Error::format(
                bytes.len(),
                format!("payload of '{}' truncated (needs {end} bytes)", entry.name),
            ));
        }
        let data = bytes[offset..end].chunks_exact(width).map(T::read_le).collect();
        let t = Tensor::from_vec(&entry.shape, data).map_err(|e| Error::format(offset, e.to_string()))?;
        tensors.push((entry.name, t));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::format(offset, "trailing bytes after payload"));
    }
    Ok((header.meta, tensors))
}
