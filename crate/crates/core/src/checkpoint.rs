//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "ABMC"  u32 version
//! u32 config length, UTF-8 `key=value` lines
//! u32 tensor count, then per tensor:
//!     u32 name length, name, u8 dtype (0 = f32, 1 = f64),
//!     u32 rank, u64 extents…, row-major payload
//! u64 total payload bytes
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::{parse_pairs, TrainConfig};
use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ABMC";
pub const VERSION: u32 = 1;

/// Keys that describe the checkpoint rather than the run configuration.
pub const META_KEYS: [&str; 5] = ["vocab_size", "vocab", "branches", "epoch", "best_wer"];

/// A tensor in either precision.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn of<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }

    pub fn all_finite(&self) -> bool {
        match self {
            StoredTensor::F32(t) => t.all_finite(),
            StoredTensor::F64(t) => t.all_finite(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: BTreeMap<String, String>,
    pub tensors: Vec<(String, StoredTensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit the u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_payload<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) -> usize {
    let start = out.len();
    for &v in t.data() {
        v.to_le(out);
    }
    out.len() - start
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Integrity(format!(
                "checkpoint truncated: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn payload<T: Scalar>(&mut self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let size = T::DTYPE.size();
        let bytes = self.take(n.checked_mul(size).ok_or_else(|| Error::Integrity("tensor too large".into()))?)?;
        let data = bytes.chunks_exact(size).map(T::from_le).collect();
        Tensor::new(shape, data)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut cfg = String::new();
        for (k, v) in &self.config {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Format(format!("config entry {k:?} cannot be stored")));
            }
            cfg.push_str(k);
            cfg.push('=');
            cfg.push_str(v);
            cfg.push('\n');
        }
        put_u32(&mut out, cfg.len())?;
        out.extend_from_slice(cfg.as_bytes());
        put_u32(&mut out, self.tensors.len())?;
        let mut payload = 0u64;
        for (name, t) in &self.tensors {
            if !t.all_finite() {
                return Err(Error::Numeric(format!("tensor {name} holds NaN or infinite values")));
            }
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            let shape = t.shape().to_vec();
            out.push(match t {
                StoredTensor::F32(_) => DType::F32.code(),
                StoredTensor::F64(_) => DType::F64.code(),
            });
            put_u32(&mut out, shape.len())?;
            for &e in &shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            payload += match t {
                StoredTensor::F32(t) => put_payload(&mut out, t),
                StoredTensor::F64(t) => put_payload(&mut out, t),
            } as u64;
        }
        out.extend_from_slice(&payload.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| Error::Format("file too short for a checkpoint header".into()))? != MAGIC {
            return Err(Error::Format("missing ABMC magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::Format(format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let n = r.u32()?;
        let text = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Format("config block is not UTF-8".into()))?;
        let config = parse_pairs(text)
            .map_err(|e| Error::Format(e.to_string()))?
            .into_iter()
            .collect();
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        let mut payload = 0u64;
        for _ in 0..count {
            let n = r.u32()?;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let code = r.take(1)?[0];
            let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
            let rank = r.u32()?;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Integrity("extent overflow".into()))?);
            }
            let start = r.pos;
            let t = match dtype {
                DType::F32 => StoredTensor::F32(r.payload(&shape)?),
                DType::F64 => StoredTensor::F64(r.payload(&shape)?),
            };
            payload += (r.pos - start) as u64;
            tensors.push((name, t));
        }
        let stated = r.u64()?;
        if stated != payload {
            return Err(Error::Integrity(format!("payload length {payload} does not match recorded {stated}")));
        }
        if r.pos != bytes.len() {
            return Err(Error::Integrity(format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, tensors })
    }

    /// Writes through a sibling temporary file and a rename, so an
    /// interrupted save never clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = Path::new(&tmp);
        fs::write(tmp, bytes).map_err(|e| Error::io(tmp, e))?;
        fs::rename(tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.config.get(key).map(String::as_str)
    }
}

/// Training progress stored alongside the weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Progress {
    pub epoch: usize,
    pub best_wer: f64,
}

/// Packs a model, its run configuration and vocabulary into a checkpoint.
/// With `inference_only` only the encoder and the inference branch are kept.
pub fn checkpoint_of<T: Scalar>(
    model: &Model<T>,
    config: &TrainConfig,
    vocab: &Vocabulary,
    progress: Progress,
    inference_only: bool,
) -> Checkpoint {
    let mut map: BTreeMap<String, String> = config.pairs().into_iter().collect();
    let branches: Vec<String> = if inference_only {
        vec![model.primary().name.clone()]
    } else {
        model.branch_names()
    };
    let keep_prefix = |name: &str| {
        name.starts_with("encoder.") || branches.iter().any(|b| name.starts_with(&format!("{b}.")))
    };
    map.insert("variant".into(), model.config.variant.to_string());
    map.insert("vocab_size".into(), model.config.decoder.vocab_size.to_string());
    map.insert("vocab".into(), vocab.symbols().join(" "));
    map.insert("branches".into(), branches.join(","));
    map.insert("epoch".into(), progress.epoch.to_string());
    map.insert("best_wer".into(), progress.best_wer.to_string());
    Checkpoint {
        config: map,
        tensors: model
            .store
            .iter()
            .filter(|(_, name, _)| keep_prefix(name))
            .map(|(_, name, t)| (name.to_string(), StoredTensor::of(t)))
            .collect(),
    }
}

/// Everything restored from a checkpoint.
pub struct Restored<T> {
    pub model: Model<T>,
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub progress: Progress,
}

fn meta<'a>(ck: &'a Checkpoint, key: &str) -> Result<&'a str> {
    ck.get(key).ok_or_else(|| Error::Format(format!("checkpoint lacks {key}")))
}

/// Rebuilds a model from a checkpoint. With `inference_only` every branch
/// but the inference branch is dropped, whatever the file holds.
pub fn restore<T: Scalar>(ck: &Checkpoint, inference_only: bool) -> Result<Restored<T>> {
    let config = TrainConfig::from_pairs(&ck.config, &META_KEYS).map_err(|e| Error::Format(e.to_string()))?;
    let vocab_size: usize = meta(ck, "vocab_size")?
        .parse()
        .map_err(|_| Error::Format("bad vocab_size".into()))?;
    let symbols: Vec<&str> = meta(ck, "vocab")?.split(' ').filter(|s| !s.is_empty()).collect();
    let vocab = Vocabulary::new(&symbols)?;
    if vocab.len() != vocab_size {
        return Err(Error::Format(format!(
            "vocabulary has {} entries, model expects {vocab_size}",
            vocab.len()
        )));
    }
    let stored: Vec<&str> = meta(ck, "branches")?.split(',').collect();
    let progress = Progress {
        epoch: meta(ck, "epoch")?.parse().map_err(|_| Error::Format("bad epoch".into()))?,
        best_wer: meta(ck, "best_wer")?.parse().map_err(|_| Error::Format("bad best_wer".into()))?,
    };
    let mut model = Model::<T>::new(config.model(vocab_size), 0)?;
    if inference_only || stored.len() < model.branches.len() {
        if stored.first() != Some(&model.primary().name.as_str()) {
            return Err(Error::Format(format!("checkpoint branches {stored:?} lack the inference branch")));
        }
        model = model.into_inference();
    }
    let tensors: BTreeMap<&str, &StoredTensor> = ck.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        let t = tensors
            .get(name.as_str())
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
        model.store.set(id, t.cast()).map_err(|_| {
            Error::Format(format!("tensor {name} has shape {:?}", t.shape()))
        })?;
    }
    if !inference_only {
        for (name, _) in &ck.tensors {
            if model.store.id(name).is_none() {
                return Err(Error::Format(format!("unexpected tensor {name}")));
            }
        }
    }
    Ok(Restored {
        model,
        config,
        vocab,
        progress,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::data::synth::synthetic_vocabulary;

    fn small_config() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.encoder.blocks = 1;
        c.encoder.layers_per_block = 1;
        c.encoder.growth_rate = 4;
        c.encoder.initial_channels = 4;
        c.encoder.out_channels = 8;
        c.encoder.downsample_factor = 2;
        c.hidden = 8;
        c.attn_dim = 8;
        c.attention.coverage_channels = 2;
        c
    }

    fn model(c: &TrainConfig) -> (Model<f32>, Vocabulary) {
        let vocab = synthetic_vocabulary();
        (Model::new(c.model(vocab.len()), 11).unwrap(), vocab)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = small_config();
        let (m, vocab) = model(&c);
        let p = Progress {
            epoch: 7,
            best_wer: 12.5,
        };
        let ck = checkpoint_of(&m, &c, &vocab, p, false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.abmc");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let r = restore::<f32>(&back, false).unwrap();
        assert_eq!(r.config, c);
        assert_eq!(r.vocab, vocab);
        assert_eq!(r.progress, p);
        for (id, name, t) in m.store.iter() {
            assert_eq!(r.model.store.name(id), name);
            let (a, b) = (t.data(), r.model.store.tensor(id).data());
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn inference_only_has_no_second_branch() {
        let c = small_config();
        let (m, vocab) = model(&c);
        let p = Progress { epoch: 0, best_wer: 100.0 };
        let ck = checkpoint_of(&m, &c, &vocab, p, true);
        assert!(ck.tensors.iter().all(|(n, _)| !n.starts_with("r2l.")));
        let r = restore::<f32>(&ck, false).unwrap();
        assert_eq!(r.model.branch_names(), ["l2r"]);
        assert!(matches!(r.model.branch("r2l"), Err(Error::Capability(_))));

        let full = checkpoint_of(&m, &c, &vocab, p, false);
        let r = restore::<f32>(&full, true).unwrap();
        assert!(r.model.store.iter().all(|(_, n, _)| !n.starts_with("r2l.")));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let mut c = small_config();
        c.variant = Variant::UniL2R;
        let (m, vocab) = model(&c);
        let bytes = checkpoint_of(&m, &c, &vocab, Progress { epoch: 0, best_wer: 0.0 }, false)
            .to_bytes()
            .unwrap();
        let mut v = bytes.clone();
        v[4] += 1;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::Format(_))));
        let mut v = bytes.clone();
        v[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 20]), Err(Error::Integrity(_))));
        let mut v = bytes.clone();
        v.push(0);
        assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::Integrity(_))));
        let n = bytes.len();
        let mut v = bytes;
        v[n - 8] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::Integrity(_))));
    }
}
