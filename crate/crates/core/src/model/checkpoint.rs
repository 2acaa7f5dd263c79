//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DGCT" | version u32 | fingerprint len u32 + utf8 | seed u64 | step u64
//! | param count u32 | per param: name len u32 + utf8, rank u32, dims u64…
//! | payload f64… in directory order | sha256 of everything before it
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{init_params, param_group, Model, ModelConfig, ParamGroup};
use crate::error::{CheckpointError, Error};
use crate::numeric::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"DGCT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadMode {
    #[default]
    Full,
    /// Input, target and field embedding tables only.
    EmbeddingsOnly,
    /// Attention blocks and output projection only.
    ScoringNetworkOnly,
}

impl LoadMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LoadMode::Full => "full",
            LoadMode::EmbeddingsOnly => "embeddings-only",
            LoadMode::ScoringNetworkOnly => "scoring-network-only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(LoadMode::Full),
            "embeddings-only" => Some(LoadMode::EmbeddingsOnly),
            "scoring-network-only" => Some(LoadMode::ScoringNetworkOnly),
            _ => None,
        }
    }

    fn includes(&self, name: &str) -> bool {
        match self {
            LoadMode::Full => true,
            LoadMode::EmbeddingsOnly => param_group(name) == ParamGroup::Embeddings,
            LoadMode::ScoringNetworkOnly => param_group(name) == ParamGroup::ScoringNetwork,
        }
    }
}

/// In-memory checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub seed: u64,
    pub step: u64,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: u64) -> Self {
        Self {
            fingerprint: model.config.fingerprint(),
            seed: model.config.seed,
            step,
            params: model
                .params
                .iter()
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.fingerprint);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for (_, t) in &self.params {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 4 + 4 + 32 {
            return Err(CheckpointError::Truncated("header"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnknownVersion(version));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Checksum);
        }
        let fingerprint = r.string("fingerprint")?;
        let seed = r.u64("seed")?;
        let step = r.u64("step")?;
        let count = r.u32("directory")? as usize;
        let mut dir = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string("directory")?;
            let rank = r.u32("directory")? as usize;
            let shape = (0..rank)
                .map(|_| r.u64("directory").map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            dir.push((name, shape));
        }
        let mut params = Vec::with_capacity(count);
        for (name, shape) in dir {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            let t = Tensor::new(shape, data).map_err(|_| CheckpointError::Truncated("payload"))?;
            params.push((name, t));
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Truncated("trailing bytes"));
        }
        Ok(Self {
            fingerprint,
            seed,
            step,
            params,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Builds a model for `config`, filling parameters from this checkpoint
    /// according to `mode`. Parameters outside a partial mode keep their
    /// fresh initialization.
    pub fn restore(&self, config: &ModelConfig, mode: LoadMode) -> Result<Model, Error> {
        if mode == LoadMode::Full && self.fingerprint != config.fingerprint() {
            return Err(CheckpointError::Fingerprint(format!(
                "checkpoint `{}` vs model `{}`",
                self.fingerprint,
                config.fingerprint()
            ))
            .into());
        }
        let mut params: ParamStore = init_params(config)?;
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names.iter().filter(|n| mode.includes(n)) {
            let saved = self
                .get(name)
                .ok_or_else(|| CheckpointError::MissingParam(name.clone()))?;
            let expected = params.value(name).expect("listed").shape();
            if saved.shape() != expected {
                return Err(CheckpointError::ParamShape {
                    name: name.clone(),
                    expected: expected.to_vec(),
                    found: saved.shape().to_vec(),
                }
                .into());
            }
            params.insert(name.clone(), saved.clone());
        }
        Ok(Model {
            config: config.clone(),
            params,
        })
    }
}

/// Writes the model's parameters with its fingerprint and seed.
pub fn save_checkpoint(model: &Model, step: u64, path: &Path) -> Result<(), CheckpointError> {
    Checkpoint::from_model(model, step).write(path)
}

/// Loads a checkpoint into a model laid out by `config`.
pub fn load_checkpoint(path: &Path, config: &ModelConfig, mode: LoadMode) -> Result<Model, Error> {
    Checkpoint::read(path)?.restore(config, mode)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&[u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8, "payload")?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &'static str) -> Result<String, CheckpointError> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| CheckpointError::Truncated(what))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSchema;

    fn model(seed: u64) -> Model {
        let schema = DatasetSchema::uniform(2, 3).unwrap();
        Model::new(ModelConfig {
            dim: 4,
            blocks: 1,
            heads: 2,
            ff_width: 4,
            seed,
            ..ModelConfig::for_schema(&schema)
        })
        .unwrap()
    }

    #[test]
    fn round_trip_bit_exact() {
        let m = model(1);
        let ck = Checkpoint::from_model(&m, 7);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let restored = back.restore(&m.config, LoadMode::Full).unwrap();
        for ((a, x), (b, y)) in m.params.iter().zip(restored.params.iter()) {
            assert_eq!(a, b);
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let bytes = Checkpoint::from_model(&model(1), 0).to_bytes();
        let mut bad = bytes.clone();
        let i = bad.len() - 40;
        bad[i] ^= 0x01;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Checksum)));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..30]), Err(CheckpointError::Truncated(_))));
        let mut wrong = bytes.clone();
        wrong[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&wrong), Err(CheckpointError::UnknownVersion(9))));
        assert!(matches!(Checkpoint::from_bytes(b"NOPE...."), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn partial_modes() {
        let src = model(1);
        let target_cfg = ModelConfig { seed: 2, ..src.config.clone() };
        let ck = Checkpoint::from_model(&src, 0);
        let emb = ck.restore(&target_cfg, LoadMode::EmbeddingsOnly).unwrap();
        let net = ck.restore(&target_cfg, LoadMode::ScoringNetworkOnly).unwrap();
        for (name, t) in src.params.iter() {
            let same_e = emb.params.value(name).unwrap() == t;
            let same_n = net.params.value(name).unwrap() == t;
            let is_matrix = t.shape().len() == 2;
            match param_group(name) {
                ParamGroup::Embeddings => {
                    assert!(same_e);
                    assert!(!same_n);
                }
                ParamGroup::ScoringNetwork => {
                    assert!(same_n);
                    // gains and biases share their constant init
                    assert!(!is_matrix || !same_e, "{name}");
                }
            }
        }
    }

    #[test]
    fn fingerprint_mismatch_only_blocks_full_mode() {
        let src = model(1);
        let mut deeper = src.config.clone();
        deeper.blocks = 2;
        let ck = Checkpoint::from_model(&src, 0);
        assert!(matches!(
            ck.restore(&deeper, LoadMode::Full),
            Err(Error::Checkpoint(CheckpointError::Fingerprint(_)))
        ));
        assert!(ck.restore(&deeper, LoadMode::EmbeddingsOnly).is_ok());
        assert!(ck.restore(&deeper, LoadMode::ScoringNetworkOnly).is_err());
    }
}
