use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::model::Model;
use super::optim::Adam;
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BHML";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

/// Position of a ChaCha8 generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte seed, lowercase hex.
    pub seed: String,
    pub stream: u64,
    /// Word position as a decimal string (128-bit).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Config(format!("invalid rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AdamMeta {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    method: String,
    epoch: usize,
    val_accuracy: Option<f64>,
    best_val_accuracy: Option<f64>,
    rng: RngState,
    adam: Option<AdamMeta>,
    config: RunConfig,
}

/// Everything needed to evaluate or resume a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub model: Model,
    pub adam: Option<Adam>,
    pub rng: RngState,
    pub val_accuracy: Option<f64>,
    pub best_val_accuracy: Option<f64>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::format(self.path, "size overflows usize"))
    }
}

impl Checkpoint {
    fn tensors(&self) -> Vec<(String, &Tensor<f64>)> {
        let mut groups: Vec<(&str, &ParamSet<f64>)> = vec![("param/", &self.model.params), ("running/", &self.model.running)];
        if let Some(a) = &self.adam {
            groups.push(("adam_m/", &a.m));
            groups.push(("adam_v/", &a.v));
        }
        groups
            .into_iter()
            .flat_map(|(prefix, set)| set.iter().map(move |(n, t)| (format!("{prefix}{n}"), t)))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            method: self.config.train.method.as_str().to_string(),
            epoch: self.epoch,
            val_accuracy: self.val_accuracy,
            best_val_accuracy: self.best_val_accuracy,
            rng: self.rng.clone(),
            adam: self.adam.as_ref().map(|a| AdamMeta {
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                t: a.t,
            }),
            config: self.config.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let tensors = self.tensors();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u64(&mut out, json.len() as u64);
        out.extend_from_slice(&json);
        put_u32(&mut out, tensors.len() as u32);
        let mut offset = 0u64;
        for (name, t) in &tensors {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            put_u32(&mut out, t.ndim() as u32);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            put_u64(&mut out, offset);
            offset += 8 * t.len() as u64;
        }
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(path, format!("unsupported format version {version}")));
        }
        let json_len = r.usize()?;
        let header: Header = serde_json::from_slice(r.take(json_len)?)
            .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
        let n = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
            if r.u8()? != DTYPE_F64 {
                return Err(Error::format(path, format!("tensor {name} has unsupported dtype")));
            }
            let ndim = r.u32()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.usize()).collect::<Result<_>>()?;
            let offset = r.usize()?;
            manifest.push((name, shape, offset));
        }
        let payload = &bytes[r.pos..];
        let mut sets: [ParamSet<f64>; 4] = Default::default();
        let mut expected = 0usize;
        for (name, shape, offset) in manifest {
            let count: usize = shape.iter().product();
            if offset != expected || payload.len() < offset + 8 * count {
                return Err(Error::format(path, format!("tensor {name} lies outside the payload")));
            }
            expected = offset + 8 * count;
            let data = payload[offset..offset + 8 * count]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data)?;
            let (slot, rest) = ["param/", "running/", "adam_m/", "adam_v/"]
                .iter()
                .enumerate()
                .find_map(|(i, p)| name.strip_prefix(p).map(|rest| (i, rest)))
                .ok_or_else(|| Error::format(path, format!("unknown tensor group in {name}")))?;
            sets[slot]
                .insert(rest, t)
                .map_err(|_| Error::format(path, format!("duplicate tensor {name}")))?;
        }
        if expected != payload.len() {
            return Err(Error::format(path, "trailing bytes after payload"));
        }
        let [params, running, m, v] = sets;
        let adam = match header.adam {
            Some(meta) => {
                if m.names().ne(params.names()) || v.names().ne(params.names()) {
                    return Err(Error::format(path, "optimizer state does not match parameters"));
                }
                Some(Adam {
                    beta1: meta.beta1,
                    beta2: meta.beta2,
                    eps: meta.eps,
                    t: meta.t,
                    m,
                    v,
                })
            }
            None => None,
        };
        if header.method != header.config.train.method.as_str() {
            return Err(Error::format(path, "header method disagrees with config"));
        }
        let model = Model { params, running };
        model
            .check_method(header.config.train.method)
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(Checkpoint {
            config: header.config,
            epoch: header.epoch,
            model,
            adam,
            rng: header.rng,
            val_accuracy: header.val_accuracy,
            best_val_accuracy: header.best_val_accuracy,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}
