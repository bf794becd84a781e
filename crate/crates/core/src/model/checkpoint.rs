//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      8 bytes  "ROCTCKPT"
//! version    u32      (currently 1)
//! n_meta     u32
//!   key      u32 length + UTF-8 bytes
//!   value    u32 length + UTF-8 bytes
//! n_params   u32
//!   name     u32 length + UTF-8 bytes
//!   rank     u32
//!   extents  rank × u64
//!   payload  product(extents) × f64
//! ```

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelGraph, ModelSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ROCTCKPT";
pub const VERSION: u32 = 1;
pub const META_MODEL_SPEC: &str = "model_spec";

/// Parsed contents of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub metadata: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &ModelGraph) -> Result<Self> {
        Ok(Checkpoint {
            version: VERSION,
            metadata: vec![
                (META_MODEL_SPEC.to_string(), serde_json::to_string(&model.spec)?),
                ("class_count".to_string(), model.spec.class_count.to_string()),
                ("input_size".to_string(), model.spec.input_size.to_string()),
            ],
            tensors: model
                .params
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        })
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let raw = self
            .meta(META_MODEL_SPEC)
            .ok_or_else(|| Error::Checkpoint("no model spec in metadata".into()))?;
        Ok(serde_json::from_str(raw)?)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        write_u32(w, self.metadata.len())?;
        for (k, v) in &self.metadata {
            write_str(w, k)?;
            write_str(w, v)?;
        }
        write_u32(w, self.tensors.len())?;
        for (name, t) in &self.tensors {
            write_str(w, name)?;
            write_u32(w, t.rank())?;
            for &e in t.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        let n_meta = read_u32(r)?;
        let mut metadata = Vec::with_capacity(n_meta as usize);
        for _ in 0..n_meta {
            metadata.push((read_str(r)?, read_str(r)?));
        }
        let n_params = read_u32(r)?;
        let mut tensors = Vec::with_capacity(n_params as usize);
        for _ in 0..n_params {
            let name = read_str(r)?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut b = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint {
            version,
            metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} overflows u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(format!("invalid UTF-8: {e}")))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SkipReason {
    ShapeConflict { file: Vec<usize>, model: Vec<usize> },
    NotInModel,
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SkipReason::ShapeConflict { file, model } => {
                write!(f, "shape conflict (file {file:?}, model {model:?})")
            }
            SkipReason::NotInModel => write!(f, "not in model"),
        }
    }
}

/// What a load copied, skipped, or left untouched.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub copied: Vec<String>,
    pub skipped: Vec<(String, SkipReason)>,
    /// Model parameters with no entry in the file.
    pub missing: Vec<String>,
}

impl LoadReport {
    pub fn is_complete(&self) -> bool {
        self.skipped.is_empty() && self.missing.is_empty()
    }
}

impl fmt::Display for LoadReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "copied: {}", self.copied.len())?;
        for (name, why) in &self.skipped {
            writeln!(f, "skipped: {name}: {why}")?;
        }
        for name in &self.missing {
            writeln!(f, "missing: {name}")?;
        }
        Ok(())
    }
}

pub fn save_checkpoint(model: &ModelGraph, path: &Path) -> Result<()> {
    Checkpoint::from_model(model)?.save(path)
}

/// Copies matching parameters from `ckpt` into `model`. With `strict`, any
/// skipped or missing name is an error and nothing is copied.
pub fn apply_checkpoint(ckpt: &Checkpoint, model: &mut ModelGraph, strict: bool) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    for (name, t) in &ckpt.tensors {
        match model.params.get(name) {
            None => report.skipped.push((name.clone(), SkipReason::NotInModel)),
            Some(p) if p.value.shape() != t.shape() => report.skipped.push((
                name.clone(),
                SkipReason::ShapeConflict {
                    file: t.shape().to_vec(),
                    model: p.value.shape().to_vec(),
                },
            )),
            Some(_) => report.copied.push(name.clone()),
        }
    }
    report.missing = model
        .params
        .names()
        .filter(|n| !ckpt.tensors.iter().any(|(m, _)| m == n))
        .map(str::to_string)
        .collect();

    if strict && !report.is_complete() {
        return Err(Error::Checkpoint(format!(
            "strict load failed: {} skipped, {} missing{}",
            report.skipped.len(),
            report.missing.len(),
            report
                .skipped
                .first()
                .map(|(n, why)| format!(" (first: {n}: {why})"))
                .unwrap_or_default()
        )));
    }
    for (name, t) in &ckpt.tensors {
        if report.copied.contains(name) {
            model.params.get_mut(name).unwrap().value = t.clone();
        }
    }
    Ok(report)
}

pub fn load_checkpoint(path: &Path, model: &mut ModelGraph, strict: bool) -> Result<LoadReport> {
    apply_checkpoint(&Checkpoint::load(path)?, model, strict)
}

/// Rebuilds the model described by the checkpoint's metadata and strictly
/// loads its parameters.
pub fn model_from_checkpoint(path: &Path) -> Result<ModelGraph> {
    let ckpt = Checkpoint::load(path)?;
    let spec = ckpt.model_spec()?;
    let mut model = ModelGraph::new(spec, 0)?;
    apply_checkpoint(&ckpt, &mut model, true)?;
    Ok(model)
}
