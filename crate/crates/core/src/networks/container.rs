//! Named-tensor container shared by model and comparator files.
//!
//! Layout: 8-byte magic, u64 LE manifest length, UTF-8 JSON manifest, then a
//! blob of f32 LE values. Each manifest tensor entry carries a byte `offset`
//! into the blob and a byte `length`; entries are contiguous and in order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u64 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

/// Writes atomically: the file appears only once completely written.
pub fn write(path: &Path, magic: &[u8; 8], mut manifest: Map<String, Value>, tensors: &[(&str, &Tensor<f32>)]) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob = Vec::new();
    for (name, t) in tensors {
        let offset = blob.len() as u64;
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            length: blob.len() as u64 - offset,
        });
    }
    manifest.insert("format_version".into(), Value::from(FORMAT_VERSION));
    manifest.insert("tensors".into(), serde_json::to_value(&entries)?);
    let json = serde_json::to_vec(&Value::Object(manifest))?;

    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    let io = |e| Error::io(path, e);
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(magic).map_err(io)?;
        f.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        f.write_all(&json).map_err(io)?;
        f.write_all(&blob).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

pub struct RawTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub struct Contents {
    pub manifest: Map<String, Value>,
    pub tensors: Vec<RawTensor>,
}

impl Contents {
    /// Removes a tensor, checking its declared shape before its length.
    pub fn take(&mut self, name: &str, expected: [usize; 4]) -> Result<Tensor<f32>> {
        let i = self
            .tensors
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let raw = self.tensors.swap_remove(i);
        if raw.shape != expected {
            return Err(Error::TensorShape {
                name: raw.name,
                expected: expected.to_vec(),
                found: raw.shape,
            });
        }
        if raw.data.len() != expected.iter().product::<usize>() {
            return Err(Error::Length(format!(
                "tensor `{name}` holds {} values, its shape needs {}",
                raw.data.len(),
                expected.iter().product::<usize>()
            )));
        }
        Tensor::from_vec(expected, raw.data)
    }

    /// Fails if any tensor was not consumed.
    pub fn finish(&self) -> Result<()> {
        match self.tensors.first() {
            Some(t) => Err(Error::Config(format!("unexpected tensor `{}`", t.name))),
            None => Ok(()),
        }
    }

    pub fn field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .manifest
            .get(key)
            .cloned()
            .ok_or_else(|| Error::Config(format!("manifest lacks `{key}`")))?;
        Ok(serde_json::from_value(v)?)
    }
}

pub fn read(path: &Path, magic: &[u8; 8]) -> Result<Contents> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes, magic).map_err(|e| match e {
        Error::BadMagic { expected, .. } => Error::BadMagic {
            path: path.to_path_buf(),
            expected,
        },
        other => other,
    })
}

pub fn parse(bytes: &[u8], magic: &[u8; 8]) -> Result<Contents> {
    if bytes.len() < 8 || &bytes[..8] != magic {
        return Err(Error::BadMagic {
            path: Default::default(),
            expected: String::from_utf8_lossy(magic).trim_end_matches('\0').to_string(),
        });
    }
    if bytes.len() < 16 {
        return Err(Error::Length("file ends inside the manifest length".into()));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[16..];
    if mlen > body.len() as u64 {
        return Err(Error::Length(format!(
            "manifest declares {mlen} bytes, only {} remain",
            body.len()
        )));
    }
    let (json, blob) = body.split_at(mlen as usize);
    let mut manifest: Map<String, Value> = serde_json::from_slice(json)?;
    let version = manifest
        .get("format_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Config("manifest lacks format_version".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let entries: Vec<TensorEntry> = serde_json::from_value(
        manifest
            .remove("tensors")
            .ok_or_else(|| Error::Config("manifest lacks tensors".into()))?,
    )?;

    let mut expected_offset = 0u64;
    for e in &entries {
        if e.length % 4 != 0 {
            return Err(Error::Length(format!(
                "tensor `{}` length {} is not a whole number of f32 values",
                e.name, e.length
            )));
        }
        if e.offset != expected_offset {
            return Err(Error::Length(format!(
                "tensor `{}` starts at byte {}, expected {expected_offset}",
                e.name, e.offset
            )));
        }
        expected_offset += e.length;
    }
    if expected_offset != blob.len() as u64 {
        return Err(Error::Length(format!(
            "manifest describes {expected_offset} blob bytes, file holds {}",
            blob.len()
        )));
    }

    let tensors = entries
        .into_iter()
        .map(|e| {
            let raw = &blob[e.offset as usize..(e.offset + e.length) as usize];
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            RawTensor {
                name: e.name,
                shape: e.shape,
                data,
            }
        })
        .collect();
    Ok(Contents { manifest, tensors })
}
