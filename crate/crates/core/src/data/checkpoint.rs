//! Versioned named-tensor checkpoints.
//!
//! Layout, all integers little-endian `u32`: magic `QUAN`, version, tensor
//! count, then per tensor its name length and UTF-8 bytes, rank, dims, and
//! `f32` values.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{QuanError, Result};
use crate::layers::{Module, Param};
use crate::scalar::Real;

pub const MAGIC: &[u8; 4] = b"QUAN";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "quan";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if dims.iter().product::<usize>() != values.len() {
            return Err(QuanError::Shape(format!(
                "tensor {name} declares {dims:?} but holds {} values",
                values.len()
            )));
        }
        Ok(NamedTensor { name, dims, values })
    }
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| QuanError::Range(format!("{what} {n} does not fit the checkpoint format")))
}

pub fn encode_checkpoint(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(tensors.len(), "tensor count")?.to_le_bytes());
    for t in tensors {
        if !seen.insert(t.name.as_str()) {
            return Err(QuanError::Config(format!("duplicate tensor name {}", t.name)));
        }
        if t.dims.iter().product::<usize>() != t.values.len() {
            return Err(QuanError::Shape(format!("tensor {} has inconsistent dims", t.name)));
        }
        out.extend_from_slice(&u32_of(t.name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&u32_of(t.dims.len(), "rank")?.to_le_bytes());
        for &d in &t.dims {
            out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
        }
        for v in &t.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(QuanError::format(
                self.source,
                format!("payload ends at byte {} while reading {what}", self.bytes.len()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_checkpoint(bytes: &[u8], source: &str) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { bytes, pos: 0, source };
    if r.take(4, "magic")? != MAGIC {
        return Err(QuanError::format(source, "not a QUAN checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(QuanError::format(source, format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| QuanError::format(source, "tensor name is not UTF-8"))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(QuanError::format(source, format!("duplicate tensor name {name}")));
        }
        let rank = r.u32("rank")? as usize;
        let dims = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| QuanError::format(source, format!("tensor {name} is too large")))?;
        let values = r
            .take(n, "values")?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push(NamedTensor { name, dims, values });
    }
    if r.pos != bytes.len() {
        return Err(QuanError::format(
            source,
            format!("{} trailing bytes after the declared tensors", bytes.len() - r.pos),
        ));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let bytes = encode_checkpoint(tensors)?;
    fs::write(path, bytes).map_err(|e| QuanError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = fs::read(path).map_err(|e| QuanError::io(path, e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}

/// Parameters followed by buffers (stored as `[len]` vectors, rounded to `f32`).
pub fn collect_state<T: Real>(params: &[&Param<T>], buffers: &[(String, &[f64])]) -> Vec<NamedTensor> {
    let mut out: Vec<NamedTensor> = params
        .iter()
        .map(|p| NamedTensor {
            name: p.name.clone(),
            dims: p.dims.clone(),
            values: p.value.iter().map(|v| v.to_f64() as f32).collect(),
        })
        .collect();
    out.extend(buffers.iter().map(|(name, v)| NamedTensor {
        name: name.clone(),
        dims: vec![v.len()],
        values: v.iter().map(|&x| x as f32).collect(),
    }));
    out
}

fn index_by_name(tensors: &[NamedTensor]) -> Result<HashMap<&str, &NamedTensor>> {
    let mut by_name = HashMap::new();
    for t in tensors {
        if by_name.insert(t.name.as_str(), t).is_some() {
            return Err(QuanError::Config(format!("duplicate tensor name {}", t.name)));
        }
    }
    Ok(by_name)
}

fn lookup<'a>(by_name: &HashMap<&str, &'a NamedTensor>, name: &str, dims: &[usize]) -> Result<&'a NamedTensor> {
    let t = by_name
        .get(name)
        .ok_or_else(|| QuanError::Config(format!("checkpoint has no tensor named {name}")))?;
    if t.dims != dims {
        return Err(QuanError::Shape(format!(
            "tensor {name}: checkpoint dims {:?}, model dims {dims:?}",
            t.dims
        )));
    }
    Ok(t)
}

fn fill_params<T: Real>(by_name: &HashMap<&str, &NamedTensor>, params: Vec<&mut Param<T>>) -> Result<usize> {
    let n = params.len();
    for p in params {
        let t = lookup(by_name, &p.name, &p.dims)?;
        for (dst, &v) in p.value.iter_mut().zip(&t.values) {
            *dst = T::from_f64(v as f64);
        }
    }
    Ok(n)
}

fn fill_buffers(by_name: &HashMap<&str, &NamedTensor>, buffers: Vec<(String, &mut [f64])>) -> Result<usize> {
    let n = buffers.len();
    for (name, buf) in buffers {
        let t = lookup(by_name, &name, &[buf.len()])?;
        for (dst, &v) in buf.iter_mut().zip(&t.values) {
            *dst = v as f64;
        }
    }
    Ok(n)
}

fn check_all_used(tensors: &[NamedTensor], used: usize) -> Result<()> {
    if used != tensors.len() {
        return Err(QuanError::Config(format!(
            "checkpoint holds {} tensors but the model uses {used}",
            tensors.len()
        )));
    }
    Ok(())
}

/// Copies tensors into parameters and buffers by name. Every parameter and
/// buffer must be present with matching dims, and every tensor must be used.
pub fn restore_state<T: Real>(
    tensors: &[NamedTensor],
    params: Vec<&mut Param<T>>,
    buffers: Vec<(String, &mut [f64])>,
) -> Result<()> {
    let by_name = index_by_name(tensors)?;
    let used = fill_params(&by_name, params)? + fill_buffers(&by_name, buffers)?;
    check_all_used(tensors, used)
}

/// [`restore_state`] for a module plus parameters held outside it.
pub fn restore_module<T: Real>(
    tensors: &[NamedTensor],
    module: &mut dyn Module<T>,
    extra: Vec<&mut Param<T>>,
) -> Result<()> {
    let by_name = index_by_name(tensors)?;
    let mut used = fill_params(&by_name, module.params_mut())?;
    used += fill_params(&by_name, extra)?;
    used += fill_buffers(&by_name, module.buffers_mut())?;
    check_all_used(tensors, used)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ParamKind;

    #[test]
    fn scalar_byte_accounting() {
        let t = NamedTensor::new("w", vec![1], vec![1.5]).unwrap();
        let bytes = encode_checkpoint(&[t]).unwrap();
        assert_eq!(bytes.len(), 4 + 4 + 4 + (4 + 1) + 4 + 4 + 4);
        let expected: [u8; 29] = [
            b'Q', b'U', b'A', b'N', 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, b'w', 1, 0, 0, 0, 1, 0, 0, 0, 0x00, 0x00, 0xc0,
            0x3f,
        ];
        assert_eq!(bytes, expected);
    }

    #[test]
    fn round_trip_bit_exact() {
        let ts = vec![
            NamedTensor::new("a.weight", vec![2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.25, 1e-30, -7.5]).unwrap(),
            NamedTensor::new("b", vec![1], vec![f32::MAX]).unwrap(),
        ];
        let back = decode_checkpoint(&encode_checkpoint(&ts).unwrap(), "mem").unwrap();
        for (x, y) in ts.iter().zip(&back) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.dims, y.dims);
            let bits = |v: &[f32]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&x.values), bits(&y.values));
        }
    }

    #[test]
    fn rejects_corruption() {
        let t = NamedTensor::new("w", vec![2], vec![1.0, 2.0]).unwrap();
        let good = encode_checkpoint(std::slice::from_ref(&t)).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad, "m").unwrap_err().to_string().contains("magic"));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(decode_checkpoint(&bad, "m").unwrap_err().to_string().contains("version"));
        assert!(decode_checkpoint(&good[..good.len() - 1], "m").is_err());
        let mut long = good.clone();
        long.push(0);
        assert!(decode_checkpoint(&long, "m").is_err());
        assert!(encode_checkpoint(&[t.clone(), t]).is_err());
    }

    #[test]
    fn restore_by_name() {
        let mut a = Param::<f32>::filled("a", vec![2], ParamKind::Bias, 0.0);
        let mut b = Param::<f32>::filled("b", vec![1], ParamKind::Bias, 0.0);
        let mut buf = vec![0.0f64; 3];
        let ts = vec![
            NamedTensor::new("buf", vec![3], vec![1.0, 2.0, 3.0]).unwrap(),
            NamedTensor::new("b", vec![1], vec![9.0]).unwrap(),
            NamedTensor::new("a", vec![2], vec![4.0, 5.0]).unwrap(),
        ];
        restore_state(&ts, vec![&mut a, &mut b], vec![("buf".into(), &mut buf[..])]).unwrap();
        assert_eq!((a.value.clone(), b.value.clone(), buf.clone()), (vec![4.0, 5.0], vec![9.0], vec![1.0, 2.0, 3.0]));
        assert!(restore_state(&ts[..2], vec![&mut a, &mut b], vec![]).is_err());
        let wrong = vec![NamedTensor::new("a", vec![1, 2], vec![0.0, 0.0]).unwrap()];
        assert!(restore_state(&wrong, vec![&mut a], vec![]).is_err());
    }
}
