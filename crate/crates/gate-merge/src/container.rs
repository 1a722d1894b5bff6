//! Bit-exact binary tensor container.
//!
//! Layout: 8-byte magic `GMTENS1\n`, a little-endian u64 header length, a
//! compact JSON header (sorted keys) describing entries and string metadata,
//! then raw little-endian f32 payload at 8-byte-aligned ascending offsets.
//! Writing the same container twice yields identical bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::matrix::WeightMatrix;

pub const MAGIC: &[u8; 8] = b"GMTENS1\n";

/// Upper bound on accepted header sizes, guarding against corrupted lengths.
const MAX_HEADER_LEN: u64 = 256 * 1024 * 1024;

/// An n-dimensional f32 tensor with row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "tensor shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let count: usize = shape.iter().product();
        if data.len() != count {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {count} elements but data has {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("tensor contains non-finite values".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        let len = data.len();
        Self::new(vec![len], data)
    }

    pub fn from_matrix(m: &WeightMatrix) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }

    /// Reinterprets a rank-2 tensor as a matrix.
    pub fn to_matrix(&self) -> Result<WeightMatrix> {
        match self.shape[..] {
            [rows, cols] => WeightMatrix::new(rows, cols, self.data.clone()),
            _ => Err(Error::Dimension(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn nbytes(&self) -> usize {
        4 * self.data.len()
    }
}

/// A named set of tensors plus string metadata, the unit of persistence.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorContainer {
    tensors: BTreeMap<String, Tensor>,
    meta: BTreeMap<String, String>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::InvalidInput("tensor name must be non-empty".into()));
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidInput(format!("duplicate tensor name {name}")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.insert(key.into(), value.into());
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Like [`get`](Self::get) but missing entries become schema errors.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Schema(format!("missing required entry {name}")))
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn meta_get(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta_get(key)
            .ok_or_else(|| Error::Schema(format!("missing required meta key {key}")))
    }

    pub fn save(&self, path: &Path) -> Result<u64> {
        let mut file = BufWriter::new(File::create(path)?);
        let n = write_container(self, &mut file)?;
        file.flush()?;
        Ok(n)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = BufReader::new(File::open(path)?);
        read_container(&mut file)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_container(self, &mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        read_container(&mut cursor)
    }
}

fn align8(offset: usize) -> usize {
    offset.div_ceil(8) * 8
}

/// Serializes a container; returns the byte count written.
///
/// Entries are emitted in name order at ascending 8-byte-aligned offsets and
/// the header is compact JSON with sorted keys, so equal containers always
/// produce identical bytes.
pub fn write_container(container: &TensorContainer, sink: &mut impl Write) -> Result<u64> {
    let mut entries = Vec::with_capacity(container.tensors.len());
    let mut offset = 0usize;
    for (name, tensor) in &container.tensors {
        offset = align8(offset);
        entries.push(json!({
            "name": name,
            "dtype": "f32",
            "shape": tensor.shape(),
            "offset": offset,
            "nbytes": tensor.nbytes(),
        }));
        offset += tensor.nbytes();
    }
    let meta: Map<String, Value> = container
        .meta
        .iter()
        .map(|(k, v)| (k.clone(), Value::String(v.clone())))
        .collect();
    let header = serde_json::to_string(&json!({
        "entries": entries,
        "meta": meta,
    }))
    .expect("header is valid JSON by construction");

    sink.write_all(MAGIC)?;
    sink.write_all(&(header.len() as u64).to_le_bytes())?;
    sink.write_all(header.as_bytes())?;

    let mut written = 0usize;
    for tensor in container.tensors.values() {
        let padded = align8(written);
        sink.write_all(&vec![0u8; padded - written][..])?;
        written = padded;
        for v in tensor.data() {
            sink.write_all(&v.to_le_bytes())?;
        }
        written += tensor.nbytes();
    }
    Ok((MAGIC.len() + 8 + header.len() + written) as u64)
}

struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

fn parse_usize(value: &Value, what: &str) -> Result<usize> {
    value
        .as_u64()
        .and_then(|v| usize::try_from(v).ok())
        .ok_or_else(|| Error::Format(format!("{what} must be an unsigned integer")))
}

fn parse_header(text: &str) -> Result<(Vec<HeaderEntry>, BTreeMap<String, String>)> {
    let root: Value =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("header is not JSON: {e}")))?;
    let obj = root
        .as_object()
        .ok_or_else(|| Error::Format("header must be a JSON object".into()))?;
    for key in obj.keys() {
        if key != "entries" && key != "meta" {
            return Err(Error::Format(format!("unexpected header key {key}")));
        }
    }

    let entries_value = obj
        .get("entries")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Format("header needs an entries array".into()))?;
    let mut entries = Vec::with_capacity(entries_value.len());
    for item in entries_value {
        let e = item
            .as_object()
            .ok_or_else(|| Error::Format("entry must be a JSON object".into()))?;
        for key in e.keys() {
            if !matches!(key.as_str(), "name" | "dtype" | "shape" | "offset" | "nbytes") {
                return Err(Error::Format(format!("unexpected entry key {key}")));
            }
        }
        let name = e
            .get("name")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Format("entry name must be a string".into()))?
            .to_string();
        if name.is_empty() {
            return Err(Error::Format("entry name must be non-empty".into()));
        }
        match e.get("dtype").and_then(Value::as_str) {
            Some("f32") => {}
            Some(other) => return Err(Error::Format(format!("unsupported dtype {other}"))),
            None => return Err(Error::Format("entry dtype must be a string".into())),
        }
        let shape_value = e
            .get("shape")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Format("entry shape must be an array".into()))?;
        let mut shape = Vec::with_capacity(shape_value.len());
        for dim in shape_value {
            let d = parse_usize(dim, "shape dimension")?;
            if d == 0 {
                return Err(Error::Format("shape dimensions must be positive".into()));
            }
            shape.push(d);
        }
        if shape.is_empty() {
            return Err(Error::Format("entry shape must be non-empty".into()));
        }
        let offset = parse_usize(
            e.get("offset").unwrap_or(&Value::Null),
            "entry offset",
        )?;
        let nbytes = parse_usize(
            e.get("nbytes").unwrap_or(&Value::Null),
            "entry nbytes",
        )?;
        let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let expected = count.and_then(|c| c.checked_mul(4));
        if expected != Some(nbytes) {
            return Err(Error::Format(format!(
                "entry {name}: nbytes {nbytes} does not match shape {shape:?}"
            )));
        }
        entries.push(HeaderEntry {
            name,
            shape,
            offset,
            nbytes,
        });
    }

    let mut cursor = 0usize;
    let mut seen = std::collections::BTreeSet::new();
    for e in &entries {
        if !seen.insert(e.name.as_str()) {
            return Err(Error::Format(format!("duplicate entry name {}", e.name)));
        }
        if e.offset % 8 != 0 {
            return Err(Error::Format(format!(
                "entry {}: offset {} is not 8-byte aligned",
                e.name, e.offset
            )));
        }
        if e.offset < cursor {
            return Err(Error::Format(format!(
                "entry {}: offset {} overlaps the previous entry",
                e.name, e.offset
            )));
        }
        cursor = e
            .offset
            .checked_add(e.nbytes)
            .ok_or_else(|| Error::Format("entry extent overflows".into()))?;
    }

    let meta_value = obj
        .get("meta")
        .and_then(Value::as_object)
        .ok_or_else(|| Error::Format("header needs a meta object".into()))?;
    let mut meta = BTreeMap::new();
    for (k, v) in meta_value {
        let s = v
            .as_str()
            .ok_or_else(|| Error::Format(format!("meta value for {k} must be a string")))?;
        meta.insert(k.clone(), s.to_string());
    }
    Ok((entries, meta))
}

/// Deserializes a container, validating magic, header schema, offset layout,
/// payload size, and value finiteness.
pub fn read_container(source: &mut impl Read) -> Result<TensorContainer> {
    let mut magic = [0u8; 8];
    read_exact_or_truncated(source, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic; not a GMTENS1 file".into()));
    }
    let mut len_bytes = [0u8; 8];
    read_exact_or_truncated(source, &mut len_bytes, "header length")?;
    let header_len = u64::from_le_bytes(len_bytes);
    if header_len > MAX_HEADER_LEN {
        return Err(Error::Format(format!(
            "header length {header_len} exceeds the {MAX_HEADER_LEN}-byte cap"
        )));
    }
    let mut header_bytes = vec![0u8; header_len as usize];
    read_exact_or_truncated(source, &mut header_bytes, "header")?;
    let header_text = String::from_utf8(header_bytes)
        .map_err(|_| Error::Format("header is not valid UTF-8".into()))?;
    let (entries, meta) = parse_header(&header_text)?;

    let mut payload = Vec::new();
    source.read_to_end(&mut payload)?;
    let expected = entries.last().map_or(0, |e| e.offset + e.nbytes);
    if payload.len() < expected {
        return Err(Error::Truncated(format!(
            "payload holds {} bytes but entries extend to {expected}",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing payload bytes after the last entry",
            payload.len() - expected
        )));
    }

    let mut container = TensorContainer::new();
    container.meta = meta;
    for e in entries {
        let bytes = &payload[e.offset..e.offset + e.nbytes];
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "entry {} contains non-finite values",
                e.name
            )));
        }
        let tensor = Tensor::new(e.shape, data)?;
        container.insert(e.name, tensor)?;
    }
    Ok(container)
}

fn read_exact_or_truncated(source: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    source.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(format!("file ends inside the {what}"))
        } else {
            Error::Io(e)
        }
    })
}
