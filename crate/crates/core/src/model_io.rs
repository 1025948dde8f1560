//! Model files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CONVEXCERT-MODEL v1\n"        magic line carrying the format version
//! u64                            manifest length in bytes
//! manifest                       UTF-8 JSON, see `Manifest`
//! f32 × Σ len(tensor)            raw blobs, one per manifest tensor, in order
//! ```
//!
//! The manifest lists every tensor with its name, shape and nonnegativity
//! flag. ICNN tensors come first in storage order (`A1, b1, A2, b2, C2, …`);
//! classifier files append `mu` (concat feature map only) and `tau`.
//! Loading reproduces every value bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::certify::FeatureConvexClassifier;
use crate::error::{Error, Result};
use crate::featuremap::{FeatureKind, FeatureMap};
use crate::icnn::{IcnnParams, IcnnSpec};
use crate::tensor::Tensor;

pub const MAGIC: &str = "CONVEXCERT-MODEL v1\n";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub nonnegative: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FeatureEntry {
    pub kind: FeatureKind,
    pub input_dim: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub spec: IcnnSpec,
    pub tensors: Vec<TensorEntry>,
    /// Present for classifier files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_map: Option<FeatureEntry>,
}

fn icnn_entries(params: &IcnnParams) -> Vec<TensorEntry> {
    let spec = params.spec();
    spec.param_names()
        .into_iter()
        .zip(spec.param_shapes())
        .zip(spec.constraint_mask())
        .map(|((name, shape), nonnegative)| TensorEntry {
            name,
            shape,
            nonnegative,
        })
        .collect()
}

fn encode(manifest: &Manifest, blobs: &[&Tensor]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(manifest)?;
    let floats: usize = blobs.iter().map(|t| t.len()).sum();
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 4 * floats);
    out.extend_from_slice(MAGIC.as_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in blobs {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.bytes.len() as u64,
                message: format!(
                    "truncated {what}: needed {n} bytes at offset {}, {} available",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn decode(bytes: &[u8]) -> Result<(Manifest, Vec<Tensor>)> {
    let head = &bytes[..bytes.len().min(MAGIC.len())];
    if head != MAGIC.as_bytes() {
        let found = String::from_utf8_lossy(head).trim_end().to_string();
        return Err(Error::Version {
            expected: MAGIC.trim_end().to_string(),
            found,
        });
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let len = u64::from_le_bytes(r.take(8, "manifest length")?.try_into().unwrap());
    let manifest_offset = r.pos as u64;
    let json = r.take(
        usize::try_from(len).map_err(|_| Error::Parse {
            offset: manifest_offset,
            message: "manifest length overflows".into(),
        })?,
        "manifest",
    )?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| Error::Parse {
        offset: manifest_offset + e.column() as u64,
        message: format!("invalid manifest: {e}"),
    })?;

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let offset = r.pos as u64;
        let raw = r.take(4 * n, &format!("tensor {}", entry.name))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(entry.shape.clone(), data).map_err(|e| Error::Parse {
            offset,
            message: format!("tensor {}: {e}", entry.name),
        })?;
        tensors.push(t);
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse {
            offset: r.pos as u64,
            message: format!("{} trailing bytes after last tensor", bytes.len() - r.pos),
        });
    }
    Ok((manifest, tensors))
}

fn split_icnn(manifest: &Manifest, tensors: &mut Vec<Tensor>) -> Result<IcnnParams> {
    let expected = manifest.spec.param_names();
    let n = expected.len();
    if manifest.tensors.len() < n {
        return Err(Error::Format(format!(
            "manifest lists {} tensors, ICNN needs {n}",
            manifest.tensors.len()
        )));
    }
    for ((entry, name), nonneg) in manifest
        .tensors
        .iter()
        .zip(&expected)
        .zip(manifest.spec.constraint_mask())
    {
        if &entry.name != name || entry.nonnegative != nonneg {
            return Err(Error::Format(format!(
                "unexpected tensor entry {:?} (wanted {name}, nonnegative={nonneg})",
                entry
            )));
        }
    }
    let rest = tensors.split_off(n);
    let icnn_tensors = std::mem::replace(tensors, rest);
    IcnnParams::from_tensors(manifest.spec.clone(), icnn_tensors)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_icnn(params: &IcnnParams) -> Result<Vec<u8>> {
    let manifest = Manifest {
        spec: params.spec().clone(),
        tensors: icnn_entries(params),
        feature_map: None,
    };
    encode(&manifest, &params.tensors())
}

pub fn decode_icnn(bytes: &[u8]) -> Result<IcnnParams> {
    let (manifest, mut tensors) = decode(bytes)?;
    split_icnn(&manifest, &mut tensors)
}

pub fn save_icnn(params: &IcnnParams, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_icnn(params)?)
}

/// Loads ICNN parameters (and their spec) from an ICNN or classifier file.
pub fn load_icnn(path: impl AsRef<Path>) -> Result<(IcnnParams, IcnnSpec)> {
    let params = decode_icnn(&read(path.as_ref())?)?;
    let spec = params.spec().clone();
    Ok((params, spec))
}

pub fn encode_classifier(clf: &FeatureConvexClassifier) -> Result<Vec<u8>> {
    let icnn = clf.icnn();
    let map = clf.feature_map();
    let mut entries = icnn_entries(icnn);
    let mut blobs = icnn.tensors();
    if let Some(mu) = map.mu() {
        entries.push(TensorEntry {
            name: "mu".into(),
            shape: mu.shape().to_vec(),
            nonnegative: false,
        });
        blobs.push(mu);
    }
    let tau = Tensor::from(vec![clf.tau()]);
    entries.push(TensorEntry {
        name: "tau".into(),
        shape: vec![1],
        nonnegative: false,
    });
    blobs.push(&tau);
    let manifest = Manifest {
        spec: icnn.spec().clone(),
        tensors: entries,
        feature_map: Some(FeatureEntry {
            kind: map.kind(),
            input_dim: map.input_dim(),
        }),
    };
    encode(&manifest, &blobs)
}

pub fn decode_classifier(bytes: &[u8]) -> Result<FeatureConvexClassifier> {
    let (manifest, mut tensors) = decode(bytes)?;
    let icnn = split_icnn(&manifest, &mut tensors)?;
    let fm = manifest
        .feature_map
        .as_ref()
        .ok_or_else(|| Error::Format("file holds a bare ICNN, not a classifier".into()))?;
    let names: Vec<&str> = manifest.tensors[icnn.spec().param_names().len()..]
        .iter()
        .map(|e| e.name.as_str())
        .collect();
    let mut extra = tensors.into_iter();
    let map = match fm.kind {
        FeatureKind::Identity => {
            if names != ["tau"] {
                return Err(Error::Format(format!("unexpected trailing tensors {names:?}")));
            }
            FeatureMap::identity(fm.input_dim)
        }
        FeatureKind::MeanOffsetAbsConcat => {
            if names != ["mu", "tau"] {
                return Err(Error::Format(format!("unexpected trailing tensors {names:?}")));
            }
            let mu = extra.next().unwrap();
            if mu.len() != fm.input_dim {
                return Err(Error::Format("mu length disagrees with input_dim".into()));
            }
            FeatureMap::concat(mu)?
        }
    };
    let tau = extra.next().unwrap().item()?;
    FeatureConvexClassifier::new(map, icnn, tau)
}

pub fn save_classifier(clf: &FeatureConvexClassifier, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_classifier(clf)?)
}

pub fn load_classifier(path: impl AsRef<Path>) -> Result<FeatureConvexClassifier> {
    decode_classifier(&read(path.as_ref())?)
}
