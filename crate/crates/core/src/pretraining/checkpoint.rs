//! Binary checkpoint: `KALMCK1`, config hash, step, config text, named f64
//! tensors, optimizer moments, neighbor table, RNG states, metrics, CRC32.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::kv::KvMap;
use crate::model::{KalmModel, ModelConfig, ParamMap};

use super::{Adam, MetricRow, NeighborTable, TrainConfig, TrainError};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"KALMCK1";
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: ParamMap,
    pub optimizer: Adam,
    pub neighbors: NeighborTable,
    /// Data-order, model-dropout and entity-sampling streams.
    pub rngs: [ChaCha8Rng; 3],
    pub metrics: Vec<MetricRow>,
}

pub fn config_text(model: &ModelConfig, train: &TrainConfig) -> String {
    let mut kv = KvMap::new();
    model.to_kv(&mut kv);
    train.to_kv(&mut kv);
    kv.render()
}

/// Digest of the rendered configuration.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> u32 {
    crc32fast::hash(config_text(model, train).as_bytes())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let s = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| TrainError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, TrainError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, TrainError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| TrainError::Checkpoint("length overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn bytes(&mut self) -> Result<&'a [u8], TrainError> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn string(&mut self) -> Result<String, TrainError> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| TrainError::Checkpoint("invalid UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn model(&self) -> Result<KalmModel, TrainError> {
        Ok(KalmModel::from_params(self.model_config.clone(), self.params.clone())?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(config_hash(&self.model_config, &self.train_config));
        w.u64(self.step);
        w.bytes(config_text(&self.model_config, &self.train_config).as_bytes());
        w.u32(self.params.len() as u32);
        for (name, t) in &self.params {
            w.bytes(name.as_bytes());
            w.u8(DTYPE_F64);
            w.u32(t.shape().len() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.f64s(t.data());
        }
        let o = &self.optimizer;
        w.f64s(&[o.beta1, o.beta2, o.eps, o.weight_decay]);
        w.u64(o.t);
        for (m, v) in o.m.iter().zip(&o.v) {
            w.u64(m.len() as u64);
            w.f64s(m);
            w.f64s(v);
        }
        w.u64(self.neighbors.step);
        w.u32(self.neighbors.lists.len() as u32);
        for list in &self.neighbors.lists {
            w.u32(list.len() as u32);
            list.iter().for_each(|&e| w.u32(e));
        }
        w.u32(self.rngs.len() as u32);
        for r in &self.rngs {
            w.0.extend_from_slice(&r.get_seed());
            w.u64(r.get_stream());
            w.0.extend_from_slice(&r.get_word_pos().to_le_bytes());
        }
        w.u32(self.metrics.len() as u32);
        for m in &self.metrics {
            w.u64(m.step);
            w.f64s(&[m.lr, m.loss_w, m.loss_e, m.tok_per_s]);
        }
        let crc = crc32fast::hash(&w.0);
        w.u32(crc);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, TrainError> {
        let bad = |m: &str| TrainError::Checkpoint(m.to_string());
        if buf.len() < CHECKPOINT_MAGIC.len() + 4 || &buf[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let (body, footer) = buf.split_at(buf.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(footer.try_into().unwrap()) {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: CHECKPOINT_MAGIC.len() };
        let hash = r.u32()?;
        let step = r.u64()?;
        let kv = KvMap::parse(&r.string()?).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let model_config = ModelConfig::from_kv(&kv).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let train_config = TrainConfig::from_kv(&kv).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if config_hash(&model_config, &train_config) != hash {
            return Err(bad("config hash does not match stored config"));
        }
        let n = r.u32()? as usize;
        let mut params = ParamMap::new();
        for _ in 0..n {
            let name = r.string()?;
            if r.u8()? != DTYPE_F64 {
                return Err(TrainError::Checkpoint(format!("tensor {name}: unsupported dtype")));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let data = r.f64s(shape.iter().product())?;
            let t = Tensor::new(shape, data).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
            params.insert(name, Arc::new(t));
        }
        let h = r.f64s(4)?;
        let mut optimizer = Adam::new(&[], h[0], h[1], h[2], h[3]);
        optimizer.t = r.u64()?;
        for _ in 0..n {
            let len = r.u64()? as usize;
            optimizer.m.push(r.f64s(len)?);
            optimizer.v.push(r.f64s(len)?);
        }
        let nstep = r.u64()?;
        let lists = (0..r.u32()?)
            .map(|_| {
                let len = r.u32()?;
                (0..len).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        let neighbors = NeighborTable { lists, step: nstep };
        if r.u32()? != 3 {
            return Err(bad("expected three RNG states"));
        }
        let mut rng = || -> Result<ChaCha8Rng, TrainError> {
            let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
            let stream = r.u64()?;
            let pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
            let mut g = ChaCha8Rng::from_seed(seed);
            g.set_stream(stream);
            g.set_word_pos(pos);
            Ok(g)
        };
        let rngs = [rng()?, rng()?, rng()?];
        let metrics = (0..r.u32()?)
            .map(|_| {
                let step = r.u64()?;
                let v = r.f64s(4)?;
                Ok(MetricRow { step, lr: v[0], loss_w: v[1], loss_e: v[2], tok_per_s: v[3] })
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        if r.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { step, model_config, train_config, params, optimizer, neighbors, rngs, metrics })
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
