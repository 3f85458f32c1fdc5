//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian `u32`: magic `REEFLCK1`, version,
//! round, config length and UTF-8 model keys, tensor count, then per tensor
//! name length, name, rank, dims and `f32` values.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{model_keys, parse_model_keys};
use crate::error::{Error, Result};
use crate::model::{GlobalModel, Model, ModelConfig};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"REEFLCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub round: u32,
    /// Whether the model was trained with feature modulation.
    pub modulation: bool,
    pub model: GlobalModel<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

fn put(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Input(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&ck.round.to_le_bytes());
    let text = model_keys(&ck.model.config, ck.modulation);
    put(&mut out, text.len())?;
    out.extend_from_slice(text.as_bytes());
    let tensors = ck.model.named_tensors();
    put(&mut out, tensors.len())?;
    for (_, name, t) in tensors {
        put(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put(&mut out, t.rank())?;
        for &d in t.shape() {
            put(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }

    fn error(&self, at: usize, detail: impl Into<String>) -> Error {
        Error::Format {
            offset: at as u64,
            detail: detail.into(),
        }
    }
}

/// Header fields and raw tensors, without rebuilding a model.
pub fn decode_entries(bytes: &[u8]) -> Result<(u32, String, Vec<TensorEntry>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(r.error(0, "bad magic"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(r.error(8, format!("unsupported version {version}")));
    }
    let round = r.u32("round")?;
    let len = r.usize("config length")?;
    let at = r.pos;
    let text = std::str::from_utf8(r.take(len, "config")?)
        .map_err(|e| r.error(at, format!("config is not UTF-8: {e}")))?
        .to_string();
    let count = r.usize("tensor count")?;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.usize("name length")?;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| r.error(at, format!("name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.usize("rank")?;
        let shape = (0..rank).map(|_| r.usize("dims")).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = r
            .take(numel * 4, "tensor data")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        entries.push(TensorEntry { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(r.error(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((round, text, entries))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (round, text, entries) = decode_entries(bytes)?;
    let (config, modulation): (ModelConfig, bool) = parse_model_keys(&text)?;
    let mut model = Model::<f32>::init(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut it = entries.into_iter();
    let mut failure = None;
    model.visit_mut(&mut |_, name, t| {
        if failure.is_some() {
            return;
        }
        match it.next() {
            Some(e) if e.name == name && e.shape == t.shape() => {
                *t = Tensor::new(e.shape, e.data).expect("shape checked");
            }
            Some(e) => {
                failure = Some(Error::Input(format!(
                    "checkpoint tensor {} {:?} where {name} {:?} was expected",
                    e.name,
                    e.shape,
                    t.shape()
                )))
            }
            None => failure = Some(Error::Input(format!("checkpoint lacks {name}"))),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = it.next() {
        return Err(Error::Input(format!("unexpected checkpoint tensor {}", extra.name)));
    }
    Ok(Checkpoint {
        round,
        modulation,
        model,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Human-readable summary: header keys, then one line per tensor.
pub fn describe(bytes: &[u8]) -> Result<String> {
    let (round, text, entries) = decode_entries(bytes)?;
    let mut out = format!("version={CHECKPOINT_VERSION}\nround={round}\n{text}");
    let mut total = 0;
    for e in &entries {
        total += e.data.len();
        out.push_str(&format!("{} {:?} {}\n", e.name, e.shape, e.data.len()));
    }
    out.push_str(&format!("tensors={} parameters={total}\n", entries.len()));
    Ok(out)
}
