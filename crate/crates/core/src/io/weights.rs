//! `DFTW` weight files.
//!
//! Layout, all integers little-endian: magic `DFTW`, `u32` version, `u32`
//! entry count, then per entry a `u16` name length, the UTF-8 name, a `u8`
//! dtype (0 = f32), a `u8` rank, `u32` dims and the raw data. A CRC-32 of
//! every preceding byte closes the file.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::model::{GazeModel, ModelConfig, Module};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DFTW";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn encode_tensors<'a>(
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<Vec<u8>> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut seen = BTreeSet::new();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        if !seen.insert(name) {
            return Err(Error::NameSet(format!("duplicate entry `{name}`")));
        }
        let len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidArgument(format!("name too long: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(DTYPE_F32);
        buf.push(t.ndim() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Corrupt("missing DFTW header".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Corrupt("CRC-32 mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version(format!("format version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    let mut seen = BTreeSet::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Corrupt("entry name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Version(format!("dtype code {dtype} for `{name}`")));
        }
        let ndim = r.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Corrupt("entry too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Corrupt(format!("`{name}`: {e}")))?;
        if !seen.insert(name.clone()) {
            return Err(Error::Corrupt(format!("duplicate entry `{name}`")));
        }
        out.push((name, t));
    }
    if r.pos != body.len() {
        return Err(Error::Corrupt("trailing bytes after last entry".into()));
    }
    Ok(out)
}

pub fn write_tensors<'a>(
    path: &Path,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    std::fs::write(path, encode_tensors(entries)?)?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_tensors(&std::fs::read(path)?)
}

/// Every parameter and buffer of `model`, in registry order.
pub fn save_weights(model: &dyn Module, path: &Path) -> Result<()> {
    let params = model.parameters();
    write_tensors(path, params.iter().map(|p| (p.name.as_str(), &p.value)))
}

/// Copies named values into `model`. Strict mode requires the two sets of
/// (name, shape) signatures to be equal; otherwise the entries must be a
/// subset of the model's names with matching shapes.
/// Entries are matched by name, and nothing is modified on error.
pub fn assign_tensors(
    model: &mut dyn Module,
    entries: &[(String, Tensor)],
    strict: bool,
) -> Result<()> {
    let map: BTreeMap<&str, &Tensor> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let names: BTreeSet<String> = model.parameters().iter().map(|p| p.name.clone()).collect();
    let unknown: Vec<&str> = map
        .keys()
        .copied()
        .filter(|n| !names.contains(*n))
        .collect();
    if !unknown.is_empty() {
        return Err(Error::NameSet(format!(
            "not in model: {}",
            preview(&unknown)
        )));
    }
    if strict {
        let missing: Vec<&str> = names
            .iter()
            .map(String::as_str)
            .filter(|n| !map.contains_key(n))
            .collect();
        if !missing.is_empty() {
            return Err(Error::NameSet(format!(
                "missing from file: {}",
                preview(&missing)
            )));
        }
    }
    for p in model.parameters() {
        if let Some(t) = map.get(p.name.as_str()) {
            if t.shape() != p.shape() {
                // A strict load compares signatures, so a resized entry is a
                // different name-set rather than a bad value.
                if strict {
                    return Err(Error::NameSet(format!(
                        "`{}` is {:?} in the file but {:?} in the model",
                        p.name,
                        t.shape(),
                        p.shape()
                    )));
                }
                return Err(shape_err("load_weights", t.shape(), p.shape()));
            }
        }
    }
    model.visit_mut(&mut |p| {
        if let Some(t) = map.get(p.name.as_str()) {
            p.value = (*t).clone();
        }
    });
    Ok(())
}

fn preview(names: &[&str]) -> String {
    let head: Vec<_> = names.iter().take(3).copied().collect();
    if names.len() > 3 {
        format!("{} and {} more", head.join(", "), names.len() - 3)
    } else {
        head.join(", ")
    }
}

pub fn load_weights(model: &mut dyn Module, path: &Path, strict: bool) -> Result<()> {
    assign_tensors(model, &read_tensors(path)?, strict)
}

/// Recovers the architecture from entry names and shapes.
pub fn infer_config(entries: &[(String, Tensor)]) -> Result<ModelConfig> {
    let map: BTreeMap<&str, &Tensor> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let get = |name: &str| {
        map.get(name)
            .copied()
            .ok_or_else(|| Error::NameSet(format!("weight file lacks `{name}`")))
    };
    let stem = get("stem.conv.weight")?.shape().to_vec();
    let mut dims = [0; 4];
    let mut depths = [0; 4];
    for s in 0..4 {
        dims[s] = get(&format!("stages.{s}.blocks.0.dwconv.weight"))?.shape()[0];
        while map.contains_key(format!("stages.{s}.blocks.{}.dwconv.weight", depths[s]).as_str()) {
            depths[s] += 1;
        }
    }
    let adapter = map.get("stages.0.blocks.0.adapter.fc_down.weight");
    let adapter_ratio = match adapter {
        Some(t) => dims[0] / t.shape()[0].max(1),
        None => 4,
    };
    Ok(ModelConfig {
        in_channels: stem[1],
        stage_depths: depths,
        stage_dims: dims,
        patch_stride: stem[2],
        head_outputs: get("head.fc.weight")?.shape()[0],
        adapters_enabled: adapter.is_some(),
        adapter_ratio,
    })
}

/// Builds a model whose architecture matches the entries and loads them
/// strictly. Entries outside the model (optimizer state, decoders) are
/// ignored.
pub fn model_from_tensors(entries: &[(String, Tensor)]) -> Result<GazeModel> {
    let config = infer_config(entries)?;
    let mut model = crate::model::build_teacher(config, 0)?;
    let names: BTreeSet<String> = model.parameters().iter().map(|p| p.name.clone()).collect();
    let own: Vec<(String, Tensor)> = entries
        .iter()
        .filter(|(n, _)| names.contains(n))
        .cloned()
        .collect();
    assign_tensors(&mut model, &own, true)?;
    Ok(model)
}

pub fn load_model(path: &Path) -> Result<GazeModel> {
    model_from_tensors(&read_tensors(path)?)
}
