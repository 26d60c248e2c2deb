//! Binary checkpoint format: magic `CANET1`, format version, a JSON metadata
//! blob, a named tensor table, and a trailing FNV-1a checksum over every
//! preceding byte.
//!
//! Layout: 6-byte magic, u32 version, u64 blob length + blob, u32 tensor
//! count, then per tensor a u16 name length, the name, a u8 dtype code,
//! a u8 rank, u32 dims, and the raw little-endian payload; finally the u64
//! checksum. All integers are little-endian. save → load → save is
//! byte-identical.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::fnv1a;
use crate::scalar::Scalar;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

pub const MAGIC: &[u8; 6] = b"CANET1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: u8,
    pub dims: Vec<u32>,
    pub bytes: Vec<u8>,
}

fn dtype_bytes(code: u8) -> Result<usize> {
    match code {
        0 => Ok(4),
        1 => Ok(8),
        other => Err(Error::Checkpoint(format!("unknown dtype code {other}"))),
    }
}

// ── serialization ───────────────────────────────────────────────────────

pub fn write_checkpoint(path: &Path, meta_json: &str, tensors: &[TensorEntry]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(meta_json.as_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        assert!(t.name.len() <= u16::MAX as usize, "tensor name too long");
        let numel: usize = t.dims.iter().map(|&d| d as usize).product();
        assert_eq!(
            t.bytes.len(),
            numel * dtype_bytes(t.dtype).expect("valid dtype"),
            "payload size mismatch for {}",
            t.name
        );
        buf.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.push(t.dtype);
        buf.push(t.dims.len() as u8);
        for &d in &t.dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        buf.extend_from_slice(&t.bytes);
    }
    let sum = fnv1a(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<(String, Vec<TensorEntry>)> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() < MAGIC.len() + 4 + 8 + 4 + 8 {
        return Err(Error::Checkpoint(format!(
            "{}: too short to be a checkpoint ({} bytes)",
            path.display(),
            raw.len()
        )));
    }
    let body = &raw[..raw.len() - 8];
    let stored = u64::from_le_bytes(raw[raw.len() - 8..].try_into().unwrap());
    let computed = fnv1a(body);
    if stored != computed {
        return Err(Error::Checkpoint(format!(
            "{}: checksum mismatch (stored {stored:016x}, computed {computed:016x})",
            path.display()
        )));
    }
    let mut c = Cursor { buf: body, pos: 0 };
    let magic = c.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {magic:?}, expected {MAGIC:?}",
            path.display()
        )));
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format version {version}",
            path.display()
        )));
    }
    let meta_len = c.u64("metadata length")? as usize;
    let meta = std::str::from_utf8(c.take(meta_len, "metadata")?)
        .map_err(|_| Error::Checkpoint("metadata is not UTF-8".to_string()))?
        .to_string();
    let count = c.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    let mut seen = std::collections::BTreeSet::new();
    for idx in 0..count {
        let name_len = c.u16("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "tensor name")?)
            .map_err(|_| Error::Checkpoint(format!("tensor {idx} name is not UTF-8")))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("duplicate tensor name {name}")));
        }
        let dtype = c.take(1, "dtype")?[0];
        let elem = dtype_bytes(dtype)?;
        let rank = c.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u32("dims")?);
        }
        let numel: usize = dims.iter().map(|&d| d as usize).product();
        let bytes = c.take(numel * elem, &format!("payload of {name}"))?.to_vec();
        tensors.push(TensorEntry { name, dtype, dims, bytes });
    }
    if c.pos != body.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the tensor table",
            body.len() - c.pos
        )));
    }
    Ok((meta, tensors))
}

// ── parameter-set adapters ──────────────────────────────────────────────

fn encode<S: Scalar>(data: &[S]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * S::BYTES);
    for &v in data {
        v.write_le(&mut out);
    }
    out
}

fn decode<S: Scalar>(bytes: &[u8]) -> Vec<S> {
    bytes.chunks_exact(S::BYTES).map(S::read_le).collect()
}

/// All tensors of a parameter set (parameters and buffers alike) as
/// checkpoint entries named `<prefix>.<name>`, in registration order.
pub fn entries_from_params<S: Scalar>(prefix: &str, params: &ParamSet<S>) -> Vec<TensorEntry> {
    params
        .iter()
        .map(|(name, tensor, _)| TensorEntry {
            name: format!("{prefix}.{name}"),
            dtype: S::DTYPE,
            dims: tensor.shape().iter().map(|&d| d as u32).collect(),
            bytes: encode(tensor.data()),
        })
        .collect()
}

/// Optimizer moment tables as entries named `<prefix>.<name>`; dims are
/// taken from the owning parameter. Lazily created moments may cover only
/// a subset of the parameters.
pub fn entries_from_moments<S: Scalar>(
    prefix: &str,
    params: &ParamSet<S>,
    moments: &BTreeMap<String, Vec<S>>,
) -> Vec<TensorEntry> {
    moments
        .iter()
        .map(|(name, data)| TensorEntry {
            name: format!("{prefix}.{name}"),
            dtype: S::DTYPE,
            dims: params.get(name).shape().iter().map(|&d| d as u32).collect(),
            bytes: encode(data),
        })
        .collect()
}

fn check_entry<S: Scalar>(entry: &TensorEntry, shape: &[usize]) -> Result<()> {
    if entry.dtype != S::DTYPE {
        return Err(Error::Checkpoint(format!(
            "{}: dtype code {} does not match the model's {}",
            entry.name,
            entry.dtype,
            S::DTYPE
        )));
    }
    let dims: Vec<usize> = entry.dims.iter().map(|&d| d as usize).collect();
    if dims != shape {
        return Err(Error::Checkpoint(format!(
            "{}: shape mismatch, checkpoint {dims:?} vs model {shape:?}",
            entry.name
        )));
    }
    Ok(())
}

/// Load every tensor of `params` from entries named `<prefix>.<name>`.
/// Missing tensors, dtype mismatches, and shape mismatches are named errors.
pub fn apply_params<S: Scalar>(
    prefix: &str,
    entries: &BTreeMap<&str, &TensorEntry>,
    params: &mut ParamSet<S>,
) -> Result<()> {
    let names: Vec<String> = params.iter().map(|(n, _, _)| n.to_string()).collect();
    for name in names {
        let key = format!("{prefix}.{name}");
        let entry = entries
            .get(key.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint is missing tensor {key}")))?;
        let tensor = params.get_mut(&name);
        check_entry::<S>(entry, tensor.shape())?;
        tensor.data_mut().copy_from_slice(&decode::<S>(&entry.bytes));
    }
    Ok(())
}

/// Collect optimizer moments stored under `<prefix>.` back into a name-keyed
/// table, validating each against the owning parameter's shape.
pub fn moments_from_entries<S: Scalar>(
    prefix: &str,
    entries: &BTreeMap<&str, &TensorEntry>,
    params: &ParamSet<S>,
) -> Result<BTreeMap<String, Vec<S>>> {
    let dotted = format!("{prefix}.");
    let mut out = BTreeMap::new();
    for (&name, &entry) in entries {
        let Some(param_name) = name.strip_prefix(&dotted) else {
            continue;
        };
        if !params.contains(param_name) {
            return Err(Error::Checkpoint(format!(
                "{name}: no parameter named {param_name} in the model"
            )));
        }
        check_entry::<S>(entry, params.get(param_name).shape())?;
        out.insert(param_name.to_string(), decode::<S>(&entry.bytes));
    }
    Ok(out)
}

/// Index entries by name for the loaders above.
pub fn index_entries(entries: &[TensorEntry]) -> BTreeMap<&str, &TensorEntry> {
    entries.iter().map(|e| (e.name.as_str(), e)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensor::Tensor;

    fn sample_entries() -> Vec<TensorEntry> {
        let mut params = ParamSet::<f32>::new();
        let mut rng = stream(1, "ckpt-test", 0);
        params.add_conv(&mut rng, "enc", 4, 3, 3);
        params.add_bn("enc.n", 4);
        entries_from_params("theta", &params)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = std::env::temp_dir().join("canet-ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        let a = dir.join("a.ckpt");
        let b = dir.join("b.ckpt");
        let entries = sample_entries();
        let meta = r#"{"epoch":3}"#;
        write_checkpoint(&a, meta, &entries).unwrap();
        let (meta_back, entries_back) = read_checkpoint(&a).unwrap();
        assert_eq!(meta_back, meta);
        assert_eq!(entries_back, entries);
        write_checkpoint(&b, &meta_back, &entries_back).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn corruption_is_refused() {
        let dir = std::env::temp_dir().join("canet-ckpt-corrupt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.ckpt");
        write_checkpoint(&path, "{}", &sample_entries()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        let e = read_checkpoint(&path).unwrap_err().to_string();
        assert!(e.contains("checksum"), "{e}");

        // bad magic with a recomputed checksum is still refused
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[mid] ^= 0x40;
        bytes[0] = b'X';
        let sum = fnv1a(&bytes[..bytes.len() - 8]);
        let n = bytes.len();
        bytes[n - 8..].copy_from_slice(&sum.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let e = read_checkpoint(&path).unwrap_err().to_string();
        assert!(e.contains("magic"), "{e}");
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn shape_and_dtype_mismatches_are_named() {
        let entries = sample_entries();
        let index = index_entries(&entries);

        // wider model: shape mismatch names the tensor
        let mut wide = ParamSet::<f32>::new();
        let mut rng = stream(2, "ckpt-test", 0);
        wide.add_conv(&mut rng, "enc", 8, 3, 3);
        wide.add_bn("enc.n", 8);
        let e = apply_params("theta", &index, &mut wide).unwrap_err().to_string();
        assert!(e.contains("theta.enc.w") && e.contains("shape"), "{e}");

        // f64 model on an f32 checkpoint: dtype mismatch
        let mut double = ParamSet::<f64>::new();
        let mut rng = stream(3, "ckpt-test", 0);
        double.add_conv(&mut rng, "enc", 4, 3, 3);
        double.add_bn("enc.n", 4);
        let e = apply_params("theta", &index, &mut double).unwrap_err().to_string();
        assert!(e.contains("dtype"), "{e}");

        // absent prefix: missing tensor is named
        let mut params = ParamSet::<f32>::new();
        let mut rng = stream(4, "ckpt-test", 0);
        params.add_conv(&mut rng, "other", 4, 3, 3);
        let e = apply_params("theta", &index, &mut params).unwrap_err().to_string();
        assert!(e.contains("theta.other.w"), "{e}");
    }

    #[test]
    fn params_and_moments_restore_exact_values() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = stream(5, "ckpt-test", 0);
        params.add_conv(&mut rng, "a", 2, 2, 3);
        params.add_zero_conv("b", 1, 2, 1);
        let mut moments = BTreeMap::new();
        moments.insert("a.w".to_string(), params.get("a.w").data().to_vec());
        let mut entries = entries_from_params("theta", &params);
        entries.extend(entries_from_moments("opt.m", &params, &moments));

        let dir = std::env::temp_dir().join("canet-ckpt-vals");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("v.ckpt");
        write_checkpoint(&path, "{}", &entries).unwrap();
        let (_, back) = read_checkpoint(&path).unwrap();
        let index = index_entries(&back);

        let mut fresh = ParamSet::<f64>::new();
        let mut rng2 = stream(6, "ckpt-test", 0);
        fresh.add_conv(&mut rng2, "a", 2, 2, 3);
        fresh.add_zero_conv("b", 1, 2, 1);
        assert_ne!(fresh.get("a.w").data(), params.get("a.w").data());
        apply_params("theta", &index, &mut fresh).unwrap();
        assert_eq!(fresh.get("a.w").data(), params.get("a.w").data());
        assert_eq!(fresh.get("b.w").data(), params.get("b.w").data());

        let m = moments_from_entries("opt.m", &index, &fresh).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m["a.w"], moments["a.w"]);
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn truncation_is_reported_with_counts() {
        let dir = std::env::temp_dir().join("canet-ckpt-trunc");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.ckpt");
        write_checkpoint(&path, "{}", &sample_entries()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..10]).unwrap();
        let e = read_checkpoint(&path).unwrap_err().to_string();
        assert!(e.contains("too short"), "{e}");
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn empty_tensor_table_round_trips() {
        let dir = std::env::temp_dir().join("canet-ckpt-empty");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("e.ckpt");
        write_checkpoint(&path, r#"{"note":"init"}"#, &[]).unwrap();
        let (meta, tensors) = read_checkpoint(&path).unwrap();
        assert_eq!(meta, r#"{"note":"init"}"#);
        assert!(tensors.is_empty());
        let _ = std::fs::remove_dir_all(&dir);
    }
}
