//! Little-endian binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` version, `u32`-prefixed model config text,
//! `u64` training step, `u64` optimizer step, `u32` tensor count, then per
//! tensor a `u32`-prefixed name, `u32` rank, `u64` dims and raw `f32` data.
//! Optimizer moments are stored as `adam.m.<name>` and `adam.v.<name>`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::{model_config_text, parse_model_config};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, VariantName};
use crate::scalar::Scalar;
use crate::training::AdamW;

pub const MAGIC: &[u8; 8] = b"BITSKIP\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub step: u64,
    pub model: Model<T>,
    pub optimizer: Option<AdamW<T>>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn put_tensor<T: Scalar>(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[T]) {
    put_str(buf, name);
    put_u32(buf, shape.len() as u32);
    for &d in shape {
        put_u64(buf, d as u64);
    }
    for v in data {
        buf.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
    }
}

/// Serializes a checkpoint. Values are stored as `f32` regardless of `T`.
pub fn encode<T: Scalar>(model: &Model<T>, optimizer: Option<&AdamW<T>>, step: u64) -> Vec<u8> {
    let tensors = model.tensors();
    let mut buf = Vec::with_capacity(16 + 4 * model.parameter_count() * 3);
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_str(&mut buf, &model_config_text(model.config()));
    put_u64(&mut buf, step);
    put_u64(&mut buf, optimizer.map_or(0, |o| o.step));
    let count = tensors.len() * if optimizer.is_some() { 3 } else { 1 };
    put_u32(&mut buf, count as u32);
    for (name, t) in &tensors {
        put_tensor(&mut buf, name, t.shape(), t.data());
    }
    if let Some(opt) = optimizer {
        for (prefix, moments) in [("adam.m.", &opt.m), ("adam.v.", &opt.v)] {
            for ((name, t), m) in tensors.iter().zip(moments) {
                put_tensor(&mut buf, &format!("{prefix}{name}"), t.shape(), m);
            }
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
}

/// Parses a checkpoint, checking every tensor against the embedded config.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).map_err(|_| Error::Format("file too short for a checkpoint".into()))? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let config = parse_model_config(&r.string()?)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let step = r.u64()?;
    let opt_step = r.u64()?;
    let count = r.u32()? as usize;

    let mut model = Model::<T>::new(config)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let with_opt = match count {
        c if c == expected.len() => false,
        c if c == 3 * expected.len() => true,
        c => {
            return Err(Error::Format(format!(
                "checkpoint holds {c} tensors, config implies {} or {}",
                expected.len(),
                3 * expected.len()
            )))
        }
    };
    let mut m = Vec::new();
    let mut v = Vec::new();
    let mut params = model.tensors_mut();
    for i in 0..count {
        let (want_name, want_shape) = &expected[i % expected.len()];
        let prefix = match i / expected.len() {
            0 => "",
            1 => "adam.m.",
            _ => "adam.v.",
        };
        let name = r.string()?;
        if name != format!("{prefix}{want_name}") {
            return Err(Error::Format(format!(
                "expected tensor '{prefix}{want_name}', found '{name}'"
            )));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if &shape != want_shape {
            return Err(Error::shape(
                "checkpoint",
                format!("'{name}' has shape {shape:?}, config implies {want_shape:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data: Vec<T> = raw
            .chunks_exact(4)
            .map(|c| T::of_f32(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        match prefix {
            "" => params[i].1.data_mut().copy_from_slice(&data),
            "adam.m." => m.push(data),
            _ => v.push(data),
        }
    }
    drop(params);
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        step,
        model,
        optimizer: with_opt.then_some(AdamW { step: opt_step, m, v }),
    })
}

/// Writes to a temporary sibling, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = dir.join(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &Model<T>,
    optimizer: Option<&AdamW<T>>,
    step: u64,
) -> Result<()> {
    write_atomic(path, &encode(model, optimizer, step))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads and insists on a particular variant.
pub fn load_checkpoint_as<T: Scalar>(path: &Path, variant: VariantName) -> Result<Checkpoint<T>> {
    let ck = load_checkpoint(path)?;
    check_variant(ck.model.config(), variant)?;
    Ok(ck)
}

pub fn check_variant(config: &ModelConfig, expected: VariantName) -> Result<()> {
    let found = config.variant.name;
    if found != expected {
        return Err(Error::VariantMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}
