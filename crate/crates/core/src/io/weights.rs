use std::collections::BTreeSet;
use std::path::Path;

use super::atomic::write_atomic;
use crate::error::{Error, Result, WeightError};
use crate::graph::{ModelGraph, ParamSet};
use crate::tensor::{Dims, Tensor};

pub const MAGIC: &[u8; 4] = b"MFW1";
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Decoded weight file, entries in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightFile {
    pub entries: Vec<WeightEntry>,
}

/// Serializes entries. Names must be unique and payloads match their dims.
pub fn save_weights(file: &WeightFile) -> Result<Vec<u8>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(file.entries.len() as u32).to_le_bytes());
    for e in &file.entries {
        if !seen.insert(e.name.as_str()) {
            return Err(WeightError::DuplicateName(e.name.clone()).into());
        }
        let name_len =
            u16::try_from(e.name.len()).map_err(|_| Error::param(&e.name, "name longer than 65535 bytes"))?;
        if e.dims.len() > u8::MAX as usize {
            return Err(Error::param(&e.name, "more than 255 dims"));
        }
        if e.dims.iter().product::<usize>() != e.data.len() {
            return Err(Error::param(
                &e.name,
                format!("payload of {} values for dims {:?}", e.data.len(), e.dims),
            ));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(DTYPE_F32);
        out.push(e.dims.len() as u8);
        for &d in &e.dims {
            let d = u32::try_from(d).map_err(|_| Error::param(&e.name, "dim exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(WeightError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WeightError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WeightError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WeightError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses and verifies magic and CRC before decoding any tensor.
pub fn load_weights(bytes: &[u8]) -> Result<WeightFile, WeightError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(WeightError::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(WeightError::Truncated(bytes.len()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(WeightError::Crc { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let count = r.u32()?;
    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    for _ in 0..count {
        let at = r.pos;
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| WeightError::BadName(at))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(WeightError::DuplicateName(name));
        }
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(WeightError::UnknownDtype(dtype));
        }
        let ndim = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let payload = r.take(n.checked_mul(4).ok_or(WeightError::Truncated(r.pos))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(WeightEntry { name, dims, data });
    }
    if r.pos != body.len() {
        return Err(WeightError::Truncated(r.pos));
    }
    Ok(WeightFile { entries })
}

/// On-disk shape: convolution weights keep four dims, every other tensor is
/// rank 1.
fn disk_dims(name: &str, d: Dims) -> Vec<usize> {
    if name.ends_with(".weight") {
        d.as_array().to_vec()
    } else {
        vec![d.len()]
    }
}

fn memory_dims(dims: &[usize]) -> Option<Dims> {
    match *dims {
        [c] => Some(Dims::new(c, 1, 1, 1)),
        [n, c, h, w] => Some(Dims::new(n, c, h, w)),
        _ => None,
    }
}

pub fn save_params(params: &ParamSet<f32>) -> Result<Vec<u8>> {
    let entries = params
        .iter()
        .map(|(name, t)| WeightEntry {
            name: name.clone(),
            dims: disk_dims(name, t.dims()),
            data: t.data().to_vec(),
        })
        .collect();
    save_weights(&WeightFile { entries })
}

/// Result of binding a weight file to a graph.
#[derive(Debug, Clone)]
pub struct LoadedParams {
    pub params: ParamSet<f32>,
    /// Names in the file the graph does not bind.
    pub unmatched: Vec<String>,
    /// Names the graph binds that the file lacks.
    pub missing: Vec<String>,
}

/// Decodes `bytes` and checks every tensor the graph names against its
/// expected shape.
pub fn load_params(bytes: &[u8], graph: &ModelGraph) -> Result<LoadedParams> {
    let file = load_weights(bytes)?;
    let specs: std::collections::BTreeMap<_, _> =
        graph.param_specs().into_iter().map(|s| (s.name.clone(), s)).collect();
    let mut params = ParamSet::new();
    let mut unmatched = Vec::new();
    for e in file.entries {
        let Some(spec) = specs.get(&e.name) else {
            unmatched.push(e.name);
            continue;
        };
        let expected = disk_dims(&e.name, spec.dims);
        let dims = memory_dims(&e.dims).filter(|_| e.dims == expected);
        let Some(dims) = dims else {
            return Err(WeightError::ShapeConflict {
                name: e.name,
                file: e.dims,
                expected,
            }
            .into());
        };
        params.insert(e.name, Tensor::from_vec(dims, e.data)?);
    }
    let missing = specs.keys().filter(|n| params.get(n).is_none()).cloned().collect();
    Ok(LoadedParams {
        params,
        unmatched,
        missing,
    })
}

pub fn write_weights_file(path: &Path, params: &ParamSet<f32>) -> Result<()> {
    write_atomic(path, &save_params(params)?)
}

/// Loads a complete parameter set for `graph`; missing names are an error.
pub fn read_weights_file(path: &Path, graph: &ModelGraph) -> Result<LoadedParams> {
    let loaded = load_params(&std::fs::read(path)?, graph)?;
    if let Some(name) = loaded.missing.first() {
        return Err(Error::param(name, format!("absent from {}", path.display())));
    }
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> WeightFile {
        WeightFile {
            entries: vec![
                WeightEntry {
                    name: "a.weight".into(),
                    dims: vec![2, 1, 1, 2],
                    data: vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE],
                },
                WeightEntry {
                    name: "a.bias".into(),
                    dims: vec![2],
                    data: vec![0.0, -0.0],
                },
            ],
        }
    }

    #[test]
    fn byte_layout() {
        let b = save_weights(&WeightFile {
            entries: vec![WeightEntry {
                name: "x".into(),
                dims: vec![1],
                data: vec![1.0],
            }],
        })
        .unwrap();
        let mut expect = b"MFW1".to_vec();
        expect.extend([1, 0, 0, 0, 1, 0, b'x', 0, 1, 1, 0, 0, 0]);
        expect.extend(1.0f32.to_le_bytes());
        let crc = crc32fast::hash(&expect);
        expect.extend(crc.to_le_bytes());
        assert_eq!(b, expect);
    }

    #[test]
    fn round_trip_and_corruption() {
        let f = sample();
        let mut b = save_weights(&f).unwrap();
        assert_eq!(load_weights(&b).unwrap(), f);
        let n = b.len();
        b[n - 8] ^= 1;
        assert_eq!(load_weights(&b).unwrap_err().code(), 2);
        b[0] = b'X';
        assert_eq!(load_weights(&b).unwrap_err(), WeightError::BadMagic);
    }

    #[test]
    fn unknown_dtype_is_reported_after_crc() {
        let mut b = save_weights(&sample()).unwrap();
        // dtype byte of the first entry: magic 4 + count 4 + len 2 + name 8
        b[18] = 7;
        let n = b.len();
        let crc = crc32fast::hash(&b[..n - 4]);
        b[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert_eq!(load_weights(&b).unwrap_err(), WeightError::UnknownDtype(7));
    }

    #[test]
    fn duplicate_names_rejected_on_save() {
        let mut f = sample();
        f.entries[1].name = "a.weight".into();
        assert!(matches!(
            save_weights(&f),
            Err(Error::Weights(WeightError::DuplicateName(_)))
        ));
    }
}
