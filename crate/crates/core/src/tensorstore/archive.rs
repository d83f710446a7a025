use std::collections::HashMap;
use std::path::Path;

use serde_json::{Map, Value};

use crate::bitkit::FloatWord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
}

/// One tensor's metadata; the bytes live in the archive's data region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorRecord {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    begin: usize,
    end: usize,
}

impl TensorRecord {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Byte span relative to the start of the data region.
    pub fn span(&self) -> (usize, usize) {
        (self.begin, self.end)
    }
}

/// Named FP32 tensors in the safetensors container layout.
///
/// The header bytes of a parsed archive are kept verbatim and the data
/// region is kept as one buffer, so an unmodified archive re-serializes to
/// the identical byte stream. Value edits only touch the data buffer.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WeightArchive {
    names: Vec<String>,
    records: Vec<TensorRecord>,
    index: HashMap<String, usize>,
    metadata: Option<Map<String, Value>>,
    data: Vec<u8>,
    raw_header: Option<Vec<u8>>,
}

fn archive_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Archive {
        offset: offset as u64,
        msg: msg.into(),
    }
}

impl WeightArchive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor after the existing data.
    pub fn push_tensor(&mut self, name: &str, shape: &[usize], values: &[f32]) -> Result<()> {
        if name == "__metadata__" || self.index.contains_key(name) {
            return Err(Error::precondition(format!("duplicate or reserved tensor name {name:?}")));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::precondition(format!("tensor {name:?} has a zero dimension")));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Shape {
                expected: shape.to_vec(),
                got: vec![values.len()],
            });
        }
        let begin = self.data.len();
        for v in values {
            self.data.extend_from_slice(&v.to_le_bytes());
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.records.push(TensorRecord {
            dtype: Dtype::F32,
            shape: shape.to_vec(),
            begin,
            end: self.data.len(),
        });
        self.raw_header = None;
        Ok(())
    }

    pub fn set_metadata(&mut self, key: &str, value: &str) {
        self.metadata
            .get_or_insert_with(Map::new)
            .insert(key.to_string(), Value::String(value.to_string()));
        self.raw_header = None;
    }

    pub fn metadata(&self) -> Option<&Map<String, Value>> {
        self.metadata.as_ref()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.index.get(name).map(|&i| &self.records[i])
    }

    fn record(&self, name: &str) -> Result<&TensorRecord> {
        self.get(name)
            .ok_or_else(|| Error::Manifest(format!("tensor {name:?} not found in archive")))
    }

    pub fn values(&self, name: &str) -> Result<Vec<f32>> {
        let r = self.record(name)?;
        Ok(self.data[r.begin..r.end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    /// Byte offset (within the data region) of element `index` of `name`.
    fn element_offset(&self, name: &str, index: usize) -> Result<usize> {
        let r = self.get(name).ok_or_else(|| Error::Coordinate {
            tensor: name.to_string(),
            index,
        })?;
        if index >= r.numel() {
            return Err(Error::Coordinate {
                tensor: name.to_string(),
                index,
            });
        }
        Ok(r.begin + 4 * index)
    }

    pub fn word(&self, name: &str, index: usize) -> Result<FloatWord> {
        let o = self.element_offset(name, index)?;
        Ok(FloatWord::from_le_bytes([
            self.data[o],
            self.data[o + 1],
            self.data[o + 2],
            self.data[o + 3],
        ]))
    }

    pub fn value(&self, name: &str, index: usize) -> Result<f32> {
        self.word(name, index).map(FloatWord::to_f32)
    }

    pub fn set_word(&mut self, name: &str, index: usize, w: FloatWord) -> Result<()> {
        let o = self.element_offset(name, index)?;
        self.data[o..o + 4].copy_from_slice(&w.to_le_bytes());
        Ok(())
    }

    /// Overwrites every value of an existing tensor.
    pub fn set_values(&mut self, name: &str, values: &[f32]) -> Result<()> {
        let r = self.record(name)?.clone();
        if values.len() != r.numel() {
            return Err(Error::Shape {
                expected: r.shape.clone(),
                got: vec![values.len()],
            });
        }
        for (chunk, v) in self.data[r.begin..r.end].chunks_exact_mut(4).zip(values) {
            chunk.copy_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }

    /// Raw data region (after the header).
    pub fn data_bytes(&self) -> &[u8] {
        &self.data
    }

    fn header_bytes(&self) -> Vec<u8> {
        if let Some(raw) = &self.raw_header {
            return raw.clone();
        }
        let mut root = Map::new();
        if let Some(meta) = &self.metadata {
            root.insert("__metadata__".into(), Value::Object(meta.clone()));
        }
        for (name, r) in self.names.iter().zip(&self.records) {
            let mut entry = Map::new();
            entry.insert("dtype".into(), Value::from("F32"));
            entry.insert("shape".into(), Value::from(r.shape.clone()));
            entry.insert("data_offsets".into(), Value::from(vec![r.begin, r.end]));
            root.insert(name.clone(), Value::Object(entry));
        }
        let mut bytes = serde_json::to_vec(&Value::Object(root)).expect("header serializes");
        while bytes.len() % 8 != 0 {
            bytes.push(b' ');
        }
        bytes
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header_bytes();
        let mut out = Vec::with_capacity(8 + header.len() + self.data.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(archive_err(bytes.len(), "truncated stream: missing header length"));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let header_end = 8u64
            .checked_add(n)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| archive_err(bytes.len(), format!("truncated stream: header of {n} bytes declared")))?
            as usize;
        let header = &bytes[8..header_end];
        let text = std::str::from_utf8(header)
            .map_err(|e| archive_err(8 + e.valid_up_to(), "header is not valid UTF-8"))?;
        let root: Map<String, Value> = serde_json::from_str(text).map_err(|e| {
            let offset = if e.line() == 1 { 8 + e.column().saturating_sub(1) } else { 8 };
            archive_err(offset, format!("malformed header: {e}"))
        })?;
        let data = &bytes[header_end..];

        let mut archive = WeightArchive::new();
        for (name, entry) in &root {
            if name == "__metadata__" {
                let meta = entry
                    .as_object()
                    .filter(|m| m.values().all(Value::is_string))
                    .ok_or_else(|| archive_err(8, "__metadata__ must be a string map"))?;
                archive.metadata = Some(meta.clone());
                continue;
            }
            let bad = |msg: &str| archive_err(8, format!("tensor {name:?}: {msg}"));
            let obj = entry.as_object().ok_or_else(|| bad("entry is not an object"))?;
            match obj.get("dtype").and_then(Value::as_str) {
                Some("F32") => {}
                Some(other) => return Err(bad(&format!("unsupported dtype {other}"))),
                None => return Err(bad("missing dtype")),
            }
            let shape = obj
                .get("shape")
                .and_then(Value::as_array)
                .ok_or_else(|| bad("missing shape"))?
                .iter()
                .map(|d| d.as_u64().filter(|&d| d > 0).map(|d| d as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad("shape must be a list of positive integers"))?;
            let offsets = obj
                .get("data_offsets")
                .and_then(Value::as_array)
                .filter(|a| a.len() == 2)
                .and_then(|a| Some((a[0].as_u64()? as usize, a[1].as_u64()? as usize)))
                .ok_or_else(|| bad("data_offsets must be [begin, end]"))?;
            let (begin, end) = offsets;
            let numel: usize = shape.iter().product();
            if end < begin || end - begin != numel * 4 {
                return Err(archive_err(
                    header_end + begin,
                    format!("tensor {name:?}: span {begin}..{end} does not hold {numel} F32 values"),
                ));
            }
            if end > data.len() {
                return Err(archive_err(
                    bytes.len(),
                    format!("truncated stream: tensor {name:?} ends at data offset {end}"),
                ));
            }
            archive.index.insert(name.clone(), archive.names.len());
            archive.names.push(name.clone());
            archive.records.push(TensorRecord {
                dtype: Dtype::F32,
                shape,
                begin,
                end,
            });
        }

        let mut spans: Vec<(usize, usize, &str)> = archive
            .records
            .iter()
            .zip(&archive.names)
            .map(|(r, n)| (r.begin, r.end, n.as_str()))
            .collect();
        spans.sort_unstable();
        for pair in spans.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(archive_err(
                    header_end + pair[1].0,
                    format!("tensor {:?} overlaps tensor {:?}", pair[1].2, pair[0].2),
                ));
            }
        }

        archive.data = data.to_vec();
        archive.raw_header = Some(header.to_vec());
        Ok(archive)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

pub fn read_archive(bytes: &[u8]) -> Result<WeightArchive> {
    WeightArchive::from_bytes(bytes)
}

pub fn write_archive(a: &WeightArchive) -> Vec<u8> {
    a.to_bytes()
}
