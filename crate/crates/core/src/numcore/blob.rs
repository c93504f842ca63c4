//! Tensor blob files: one JSON header line `{"dtype":"f64","shape":[r,c]}`
//! followed by little-endian binary64 values in row-major order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    shape: [usize; 2],
}

pub fn encode_blob(t: &Tensor) -> Vec<u8> {
    let header = format!("{{\"dtype\":\"f64\",\"shape\":[{},{}]}}\n", t.rows(), t.cols());
    let mut out = Vec::with_capacity(header.len() + 8 * t.len());
    out.extend_from_slice(header.as_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_blob(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let fail = |reason: String| Error::Blob {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = BufReader::new(bytes);
    let mut line = String::new();
    reader
        .read_line(&mut line)
        .map_err(|e| fail(format!("unreadable header: {e}")))?;
    if !line.ends_with('\n') {
        return Err(fail("header line is not newline-terminated".into()));
    }
    let header: Header =
        serde_json::from_str(line.trim_end()).map_err(|e| fail(format!("bad header: {e}")))?;
    if header.dtype != "f64" {
        return Err(fail(format!("unsupported dtype {:?}", header.dtype)));
    }
    let [rows, cols] = header.shape;
    let mut payload = Vec::new();
    reader
        .read_to_end(&mut payload)
        .map_err(|e| fail(format!("unreadable payload: {e}")))?;
    if payload.len() != rows * cols * 8 {
        return Err(fail(format!(
            "payload has {} bytes, expected {} for shape [{rows},{cols}]",
            payload.len(),
            rows * cols * 8
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(rows, cols, data).map_err(|e| fail(e.to_string()))
}

pub fn write_blob(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_blob(t)).map_err(|e| Error::io(path, e))
}

pub fn read_blob(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_blob(&bytes, path)
}
