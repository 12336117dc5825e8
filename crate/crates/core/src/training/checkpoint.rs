//! Versioned binary checkpoint: configuration, rate weight, every parameter,
//! the frozen entropy tables and the training RNG position, followed by a
//! SHA-256 of everything before it.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::codec::{EntropyTables, Model};
use crate::config::ModelConfig;
use crate::entropy::{CdfTable, FactorizedTables, NUM_SYMBOLS};
use crate::error::{Error, Result};
use crate::nn::Params;
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"STCK";
const VERSION: u8 = 1;

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

#[derive(Clone)]
pub struct Checkpoint {
    pub cfg: ModelConfig,
    pub lambda: f64,
    pub params: Params,
    pub tables: EntropyTables,
    pub step: u64,
    pub rng: Option<RngState>,
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Truncated(format!("checkpoint needs {n} more bytes, {} left", self.buf.len())));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

fn put_blob(out: &mut Vec<u8>, b: &[u8]) {
    out.extend((b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_tables(out: &mut Vec<u8>, t: &FactorizedTables) {
    out.extend((t.tables.len() as u32).to_le_bytes());
    for table in &t.tables {
        for v in table.cdf() {
            out.extend(v.to_le_bytes());
        }
    }
}

fn get_tables(r: &mut Reader) -> Result<FactorizedTables> {
    let n = r.u32()? as usize;
    let mut tables = Vec::with_capacity(n);
    for _ in 0..n {
        let cdf = (0..=NUM_SYMBOLS).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        tables.push(CdfTable::from_cdf(cdf).ok_or_else(|| Error::InvalidArgument("checkpoint holds an invalid CDF table".into()))?);
    }
    Ok(FactorizedTables { tables })
}

impl Checkpoint {
    /// Snapshot of a trained model; tables are frozen from the current parameters.
    pub fn capture(model: &Model, params: &Params, lambda: f64, step: u64, rng: Option<&ChaCha8Rng>) -> Self {
        Self {
            cfg: model.cfg.clone(),
            lambda,
            params: params.clone(),
            tables: EntropyTables::freeze(model, params),
            step,
            rng: rng.map(RngState::capture),
        }
    }

    pub fn config_hash(&self) -> [u8; 32] {
        self.cfg.hash_with_lambda(self.lambda)
    }

    /// Rebuilds the layer structure and checks it against the stored parameters.
    pub fn model(&self) -> Result<Model> {
        let mut fresh = Params::default();
        let model = Model::new(&mut fresh, self.cfg.clone(), 0)?;
        if fresh.len() != self.params.len() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint has {} parameters, configuration expects {}",
                self.params.len(),
                fresh.len()
            )));
        }
        for ((_, a, ta), (_, b, tb)) in fresh.iter().zip(self.params.iter()) {
            if a != b || ta.shape() != tb.shape() {
                return Err(Error::ConfigMismatch(format!("parameter {b} {:?} where {a} {:?} was expected", tb.shape(), ta.shape())));
            }
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.push(VERSION);
        put_blob(&mut out, &serde_json::to_vec(&self.cfg).expect("config serializes"));
        out.extend(self.lambda.to_le_bytes());
        out.extend(self.config_hash());
        out.extend(self.step.to_le_bytes());
        match &self.rng {
            Some(s) => {
                out.push(1);
                out.extend(s.seed);
                out.extend(s.stream.to_le_bytes());
                out.extend(s.word_pos.to_le_bytes());
            }
            None => out.push(0),
        }
        out.extend((self.params.len() as u32).to_le_bytes());
        for (_, name, t) in self.params.iter() {
            put_blob(&mut out, name.as_bytes());
            out.push(t.rank() as u8);
            for d in t.shape() {
                out.extend((*d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        put_tables(&mut out, &self.tables.motion);
        put_tables(&mut out, &self.tables.hyper);
        let digest = Sha256::digest(&out);
        out.extend(digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 + 32 || bytes[..4] != MAGIC {
            return Err(Error::InvalidArgument("not a checkpoint file".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::UnsupportedVersion(bytes[4]));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::InvalidArgument("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader { buf: &body[5..] };
        let cfg: ModelConfig = serde_json::from_slice(r.blob()?)?;
        let lambda = r.f64()?;
        let hash: [u8; 32] = r.take(32)?.try_into().expect("32");
        if hash != cfg.hash_with_lambda(lambda) {
            return Err(Error::ConfigMismatch("stored config hash does not match its configuration".into()));
        }
        let step = r.u64()?;
        let rng = match r.u8()? {
            0 => None,
            _ => Some(RngState {
                seed: r.take(32)?.try_into().expect("32"),
                stream: r.u64()?,
                word_pos: u128::from_le_bytes(r.take(16)?.try_into().expect("16")),
            }),
        };
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let name = String::from_utf8(r.blob()?.to_vec()).map_err(|_| Error::InvalidArgument("parameter name is not UTF-8".into()))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let data = (0..shape.iter().product::<usize>()).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            entries.push((name, Tensor::new(data, &shape)));
        }
        let tables = EntropyTables {
            motion: get_tables(&mut r)?,
            hyper: get_tables(&mut r)?,
        };
        if !r.buf.is_empty() {
            return Err(Error::InvalidArgument(format!("{} unexpected bytes in checkpoint", r.buf.len())));
        }
        let ck = Self {
            cfg,
            lambda,
            params: Params::from_named(entries),
            tables,
            step,
            rng,
        };
        ck.model()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode_sequence, SequenceParams, VerbatimIntra};
    use crate::nn::stream_rng;
    use rand::Rng;

    #[test]
    fn save_load_reproduces_eval_outputs_bitwise() {
        let mut p = Params::default();
        let m = Model::new(&mut p, ModelConfig::toy(), 5).unwrap();
        let mut rng = stream_rng(1, "ck");
        let _: f64 = rng.random();
        let ck = Checkpoint::capture(&m, &p, 1024.0, 17, Some(&rng));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.step, 17);
        assert_eq!(back.tables, ck.tables);
        assert_eq!(back.config_hash(), ck.config_hash());
        let mut resumed = back.rng.unwrap().restore();
        assert_eq!(resumed.random::<u64>(), rng.random::<u64>());
        let frames = crate::data::moving_texture(64, 64, 3, 2);
        let sp = SequenceParams::new(1024.0);
        let a = encode_sequence(&m, &p, &ck.tables, &frames, &sp, &VerbatimIntra).unwrap();
        let bm = back.model().unwrap();
        let b = encode_sequence(&bm, &back.params, &back.tables, &frames, &sp, &VerbatimIntra).unwrap();
        assert_eq!(a.container, b.container);
        assert_eq!(a.recon, b.recon);
    }

    #[test]
    fn corruption_and_mismatch_are_rejected() {
        let mut p = Params::default();
        let m = Model::new(&mut p, ModelConfig::toy(), 5).unwrap();
        let bytes = Checkpoint::capture(&m, &p, 256.0, 0, None).to_bytes();
        let mut bad = bytes.clone();
        bad[100] ^= 1;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut ver = bytes.clone();
        ver[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&ver), Err(Error::UnsupportedVersion(2))));
    }
}
