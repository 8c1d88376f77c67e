//! The KALM decoder: duet input embedding, pre-norm causal transformer
//! blocks, a word head tied to the word embeddings and a cosine entity
//! scoring head.

mod config;
mod generate;

use std::sync::Arc;

use indexmap::IndexMap;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{cosine, AutodiffError, Graph, Tensor, Var};
use crate::dictionary::NULL_ENTITY;
use crate::tokenizer::TokenizerError;

pub use config::{MarginConvention, ModelConfig, ModelMode};
pub use generate::{argmax, generate, LanguageModel};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds context length {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("{kind} id {id} out of range (size {size})")]
    IdOutOfRange { kind: &'static str, id: u32, size: usize },
    #[error("word and entity channels differ in length ({words} vs {entities})")]
    ChannelMismatch { words: usize, entities: usize },
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

const INIT_STD: f64 = 0.02;

/// Named parameter tensors in a fixed order.
pub type ParamMap = IndexMap<String, Arc<Tensor>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    /// Parameters in the network layers.
    pub network: usize,
    /// Parameters in lookup tables (word, position, entity embeddings and an
    /// untied word head).
    pub embedding: usize,
}

#[derive(Debug, Clone)]
pub struct KalmModel {
    pub config: ModelConfig,
    pub params: ParamMap,
}

/// A flattened batch of equal-length duet sequences, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub words: Vec<u32>,
    pub entities: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    pub fn single(words: &[u32], entities: &[u32]) -> Self {
        Self { words: words.to_vec(), entities: entities.to_vec(), batch: 1, seq: words.len() }
    }
}

/// A recorded forward pass. Parameters are bound into the graph on first use
/// so loss terms can extend the same tape.
pub struct ForwardPass {
    pub graph: Graph,
    /// Final-norm hidden states, `[batch * seq, d_model]`.
    pub hidden: Var,
    /// Word logits, `[batch * seq, vocab]`.
    pub logits: Var,
    bound: Vec<Option<Var>>,
}

impl ForwardPass {
    pub fn param(&mut self, model: &KalmModel, name: &str) -> Result<Var, ModelError> {
        bind(&mut self.graph, &mut self.bound, &model.params, name)
    }

    /// Gradients for every bound parameter, by parameter index.
    pub fn param_grads(&self) -> Vec<(usize, &[f64])> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| self.graph.grad(v)).map(|g| (i, g)))
            .collect()
    }
}

fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
    let m = g.matmul(x, w)?;
    g.add_row(m, b)
}

fn bind(graph: &mut Graph, bound: &mut [Option<Var>], params: &ParamMap, name: &str) -> Result<Var, ModelError> {
    let idx = params.get_index_of(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
    if let Some(v) = bound[idx] {
        return Ok(v);
    }
    let v = graph.param(params[idx].clone());
    bound[idx] = Some(v);
    Ok(v)
}

/// Shapes of every parameter for a config, in storage order.
pub fn param_shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = c.d_model;
    let mut out: Vec<(String, Vec<usize>)> = vec![
        ("wte".into(), vec![c.vocab_size, d]),
        ("wpe".into(), vec![c.context_length, d]),
    ];
    if c.mode.uses_entity_input() {
        out.push(("entity.table".into(), vec![c.entity_vocab_size, c.d_entity]));
        out.push(("entity.in".into(), vec![c.d_entity, d]));
    }
    if c.mode.uses_entity_loss() {
        out.push(("entity.out".into(), vec![d, c.d_entity]));
    }
    for l in 0..c.layers {
        let p = |s: &str| format!("h{l}.{s}");
        out.extend([
            (p("ln1.g"), vec![d]),
            (p("ln1.b"), vec![d]),
            (p("attn.wq"), vec![d, d]),
            (p("attn.bq"), vec![d]),
            (p("attn.wk"), vec![d, d]),
            (p("attn.bk"), vec![d]),
            (p("attn.wv"), vec![d, d]),
            (p("attn.bv"), vec![d]),
            (p("attn.wo"), vec![d, d]),
            (p("attn.bo"), vec![d]),
            (p("ln2.g"), vec![d]),
            (p("ln2.b"), vec![d]),
            (p("mlp.w1"), vec![d, 4 * d]),
            (p("mlp.b1"), vec![4 * d]),
            (p("mlp.w2"), vec![4 * d, d]),
            (p("mlp.b2"), vec![d]),
        ]);
    }
    out.push(("lnf.g".into(), vec![d]));
    out.push(("lnf.b".into(), vec![d]));
    if !c.tied_head {
        out.push(("head".into(), vec![c.vocab_size, d]));
    }
    out
}

fn is_embedding(name: &str) -> bool {
    matches!(name, "wte" | "wpe" | "entity.table" | "head")
}

/// Each tensor draws from its own stream keyed by `(seed, name)`, so the
/// same name initializes identically whatever else the config contains.
fn init_tensor(seed: u64, name: &str, shape: &[usize], layers: usize) -> Tensor {
    let n: usize = shape.iter().product();
    if name.ends_with(".g") {
        return Tensor::from_fn(shape, |_| 1.0);
    }
    if shape.len() == 1 {
        return Tensor::zeros(shape);
    }
    let std = if name.ends_with("attn.wo") || name.ends_with("mlp.w2") {
        INIT_STD / (2.0 * layers as f64).sqrt()
    } else {
        INIT_STD
    };
    let key = crc32fast::hash(name.as_bytes()) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let normal = Normal::new(0.0, std).expect("valid std");
    let data: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

impl KalmModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let params = param_shapes(&config)
            .into_iter()
            .map(|(name, shape)| {
                let t = init_tensor(seed, &name, &shape, config.layers);
                (name, Arc::new(t))
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Builds a model from stored tensors, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamMap) -> Result<Self, ModelError> {
        config.validate()?;
        for (name, shape) in param_shapes(&config) {
            let t = params.get(&name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Config(format!("parameter {name} has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(Self { config, params })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.params.get(name).map(|t| t.as_ref()).ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn param_counts(&self) -> ParamCounts {
        let mut c = ParamCounts { network: 0, embedding: 0 };
        for (name, t) in &self.params {
            if is_embedding(name) {
                c.embedding += t.numel();
            } else {
                c.network += t.numel();
            }
        }
        c
    }

    /// Order-sensitive digest of all parameter values.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(&v.to_bits().to_le_bytes());
            }
        }
        h.finalize()
    }

    fn check_batch(&self, b: &Batch) -> Result<(), ModelError> {
        let c = &self.config;
        if b.words.len() != b.entities.len() {
            return Err(ModelError::ChannelMismatch { words: b.words.len(), entities: b.entities.len() });
        }
        if b.seq == 0 || b.batch == 0 || b.words.len() != b.batch * b.seq {
            return Err(ModelError::Config(format!("batch of {} ids is not {} x {}", b.words.len(), b.batch, b.seq)));
        }
        if b.seq > c.context_length {
            return Err(ModelError::SequenceTooLong { len: b.seq, max: c.context_length });
        }
        if let Some(&id) = b.words.iter().find(|&&w| w as usize >= c.vocab_size) {
            return Err(ModelError::IdOutOfRange { kind: "word", id, size: c.vocab_size });
        }
        if c.mode.uses_entity_input() {
            if let Some(&id) = b.entities.iter().find(|&&e| e as usize >= c.entity_vocab_size) {
                return Err(ModelError::IdOutOfRange { kind: "entity", id, size: c.entity_vocab_size });
            }
        }
        Ok(())
    }

    fn new_pass(&self) -> (Graph, Vec<Option<Var>>) {
        (Graph::new(), vec![None; self.params.len()])
    }

    /// Input vectors `word + position + Linear_t(entity)`, with the entity
    /// term exactly zero at null positions and absent in baseline mode.
    fn embed(&self, g: &mut Graph, bound: &mut [Option<Var>], b: &Batch) -> Result<Var, ModelError> {
        let p = &self.params;
        let wte = bind(g, bound, p, "wte")?;
        let wpe = bind(g, bound, p, "wpe")?;
        let words = g.embedding_gather(wte, &b.words)?;
        let positions: Vec<u32> = (0..b.batch).flat_map(|_| 0..b.seq as u32).collect();
        let pos = g.embedding_gather(wpe, &positions)?;
        let mut x = g.add(words, pos)?;
        if self.config.mode.uses_entity_input() {
            let table = bind(g, bound, p, "entity.table")?;
            let lin = bind(g, bound, p, "entity.in")?;
            let ent = g.embedding_gather(table, &b.entities)?;
            let projected = g.matmul(ent, lin)?;
            let mask: Vec<f64> = b.entities.iter().map(|&e| if e == NULL_ENTITY { 0.0 } else { 1.0 }).collect();
            let masked = g.scale_rows(projected, &mask)?;
            x = g.add(x, masked)?;
        }
        Ok(x)
    }

    /// Input embeddings of one sequence without dropout.
    pub fn embed_input(&self, words: &[u32], entities: &[u32]) -> Result<Tensor, ModelError> {
        let b = Batch::single(words, entities);
        self.check_batch(&b)?;
        let (mut g, mut bound) = self.new_pass();
        let x = self.embed(&mut g, &mut bound, &b)?;
        Ok(g.value(x).clone())
    }

    /// Records the forward pass. `rng` enables training-time dropout on the
    /// input vectors and attention probabilities; `None` is inference.
    pub fn forward(&self, b: &Batch, mut rng: Option<&mut dyn RngCore>) -> Result<ForwardPass, ModelError> {
        self.check_batch(b)?;
        let c = &self.config;
        let (mut g, mut bound) = self.new_pass();
        let mut x = self.embed(&mut g, &mut bound, b)?;
        if let Some(r) = rng.as_deref_mut() {
            x = g.dropout(x, c.dropout, r, true)?;
        }
        let p = &self.params;
        for l in 0..c.layers {
            let n = |s: &str| format!("h{l}.{s}");
            let mut w = |g: &mut Graph, s: &str| bind(g, &mut bound, p, &n(s));
            let (g1, b1) = (w(&mut g, "ln1.g")?, w(&mut g, "ln1.b")?);
            let h = g.layer_norm(x, g1, b1, c.ln_eps)?;
            let (wq, bq) = (w(&mut g, "attn.wq")?, w(&mut g, "attn.bq")?);
            let q = affine(&mut g, h, wq, bq)?;
            let (wk, bk) = (w(&mut g, "attn.wk")?, w(&mut g, "attn.bk")?);
            let k = affine(&mut g, h, wk, bk)?;
            let (wv, bv) = (w(&mut g, "attn.wv")?, w(&mut g, "attn.bv")?);
            let v = affine(&mut g, h, wv, bv)?;
            let drop: Option<(f64, &mut dyn RngCore)> = match &mut rng {
                Some(r) if c.dropout > 0.0 => Some((c.dropout, &mut **r)),
                _ => None,
            };
            let a = g.causal_attention(q, k, v, c.heads, b.seq, drop)?;
            let (wo, bo) = (w(&mut g, "attn.wo")?, w(&mut g, "attn.bo")?);
            let o = affine(&mut g, a, wo, bo)?;
            x = g.add(x, o)?;
            let (g2, b2) = (w(&mut g, "ln2.g")?, w(&mut g, "ln2.b")?);
            let h2 = g.layer_norm(x, g2, b2, c.ln_eps)?;
            let (w1, b1) = (w(&mut g, "mlp.w1")?, w(&mut g, "mlp.b1")?);
            let up = affine(&mut g, h2, w1, b1)?;
            let act = g.gelu(up)?;
            let (w2, b2) = (w(&mut g, "mlp.w2")?, w(&mut g, "mlp.b2")?);
            let down = affine(&mut g, act, w2, b2)?;
            x = g.add(x, down)?;
        }
        let gf = bind(&mut g, &mut bound, &self.params, "lnf.g")?;
        let bf = bind(&mut g, &mut bound, &self.params, "lnf.b")?;
        let hidden = g.layer_norm(x, gf, bf, c.ln_eps)?;
        let head = bind(&mut g, &mut bound, &self.params, if c.tied_head { "wte" } else { "head" })?;
        let logits = g.matmul_bt(hidden, head)?;
        Ok(ForwardPass { graph: g, hidden, logits, bound })
    }

    /// Inference-mode word logits `[T, V]` and hidden states `[T, d_model]`.
    pub fn infer(&self, words: &[u32], entities: &[u32]) -> Result<(Tensor, Tensor), ModelError> {
        let fp = self.forward(&Batch::single(words, entities), None)?;
        Ok((fp.graph.value(fp.logits).clone(), fp.graph.value(fp.hidden).clone()))
    }

    /// Cosine between the projected hidden state and an entity embedding;
    /// zero when either norm is below the guard.
    pub fn score_entity(&self, hidden: &[f64], entity: u32) -> Result<f64, ModelError> {
        let c = &self.config;
        if entity as usize >= c.entity_vocab_size {
            return Err(ModelError::IdOutOfRange { kind: "entity", id: entity, size: c.entity_vocab_size });
        }
        let w = self.param("entity.out")?;
        let table = self.param("entity.table")?;
        let proj: Vec<f64> = (0..c.d_entity)
            .map(|j| hidden.iter().enumerate().map(|(i, h)| h * w.data()[i * c.d_entity + j]).sum())
            .collect();
        Ok(cosine(&proj, table.row(entity as usize)))
    }
}

impl LanguageModel for KalmModel {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn context_length(&self) -> usize {
        self.config.context_length
    }

    fn uses_entities(&self) -> bool {
        self.config.mode.uses_entity_input()
    }

    fn word_logits(&self, words: &[u32], entities: &[u32]) -> Result<Tensor, ModelError> {
        Ok(self.infer(words, entities)?.0)
    }
}
