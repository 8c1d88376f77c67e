//! Joint word + entity objective, optimizer, learning-rate schedule, training
//! loop and checkpoints.

mod checkpoint;
mod config;
mod objective;
mod optim;

use std::fmt::Write as _;
use std::io::{self, Write};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dictionary::NULL_ENTITY;
use crate::model::{Batch, KalmModel, ModelError};
use crate::tokenizer::DuetSequence;

pub use checkpoint::{config_hash, config_text, Checkpoint, CHECKPOINT_MAGIC};
pub use config::{lr_schedule, NegativeMixture, TrainConfig};
pub use objective::{
    build_neighbor_table, entity_dropout, entity_margin_loss, kalm_loss, sample_negative, EntityTarget,
    LossBreakdown, LossInputs, NegativeBranch, NeighborTable,
};
pub use optim::Adam;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("corpus has {tokens} tokens, need at least {needed}")]
    CorpusTooSmall { tokens: usize, needed: usize },
    #[error("non-finite loss at step {step}")]
    NonFinite { step: u64, inputs: Box<LossInputs> },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl TrainError {
    /// Human-readable dump of the batch behind a non-finite loss.
    pub fn batch_dump(&self) -> Option<String> {
        let TrainError::NonFinite { step, inputs } = self else { return None };
        let b = &inputs.batch;
        let mut s = format!("step\t{step}\nbatch\t{}\nseq\t{}\n", b.batch, b.seq);
        for r in 0..b.batch {
            let span = r * b.seq..(r + 1) * b.seq;
            let _ = writeln!(s, "words\t{:?}", &b.words[span.clone()]);
            let _ = writeln!(s, "entities\t{:?}", &b.entities[span]);
        }
        Some(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub lr: f64,
    pub loss_w: f64,
    pub loss_e: f64,
    pub tok_per_s: f64,
}

pub const METRIC_HEADER: &str = "step\tlr\tloss_w\tloss_e\ttok_per_s";

impl MetricRow {
    pub fn tsv(&self) -> String {
        format!("{}\t{:e}\t{:.6}\t{:.6}\t{:.1}", self.step, self.lr, self.loss_w, self.loss_e, self.tok_per_s)
    }
}

pub fn write_metric_log<W: Write>(mut w: W, rows: &[MetricRow]) -> io::Result<()> {
    writeln!(w, "{METRIC_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.tsv())?;
    }
    Ok(())
}

const DATA_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
const ENTITY_STREAM: u64 = 3;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Owns the model, optimizer and all training randomness. Batches are
/// windows drawn uniformly from the concatenated corpus.
pub struct Trainer {
    pub model: KalmModel,
    pub config: TrainConfig,
    pub optimizer: Adam,
    pub neighbors: NeighborTable,
    pub step: u64,
    pub metrics: Vec<MetricRow>,
    /// Hard draws that found no neighbors and used a random entity instead.
    pub hard_fallbacks: u64,
    data_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    entity_rng: ChaCha8Rng,
    words: Vec<u32>,
    entities: Vec<u32>,
}

impl Trainer {
    pub fn new(model: KalmModel, config: TrainConfig, corpus: &[DuetSequence]) -> Result<Self, TrainError> {
        config.validate()?;
        let sizes: Vec<usize> = model.params.values().map(|t| t.numel()).collect();
        let optimizer = Adam::new(&sizes, config.beta1, config.beta2, config.adam_eps, config.weight_decay);
        let seed = config.seed;
        Self::assemble(
            model,
            config,
            optimizer,
            NeighborTable::default(),
            0,
            Vec::new(),
            [stream_rng(seed, DATA_STREAM), stream_rng(seed, DROPOUT_STREAM), stream_rng(seed, ENTITY_STREAM)],
            corpus,
        )
    }

    pub fn from_checkpoint(ck: Checkpoint, corpus: &[DuetSequence]) -> Result<Self, TrainError> {
        let model = ck.model()?;
        Self::assemble(model, ck.train_config, ck.optimizer, ck.neighbors, ck.step, ck.metrics, ck.rngs, corpus)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        model: KalmModel,
        config: TrainConfig,
        optimizer: Adam,
        neighbors: NeighborTable,
        step: u64,
        metrics: Vec<MetricRow>,
        rngs: [ChaCha8Rng; 3],
        corpus: &[DuetSequence],
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if config.seq_length > model.config.context_length {
            return Err(TrainError::Config(format!(
                "seq_length {} exceeds context length {}",
                config.seq_length, model.config.context_length
            )));
        }
        let words: Vec<u32> = corpus.iter().flat_map(|d| d.word_ids.iter().copied()).collect();
        let entities: Vec<u32> = corpus.iter().flat_map(|d| d.entity_ids.iter().copied()).collect();
        if words.len() != entities.len() {
            return Err(TrainError::Config("corpus word/entity channels differ in length".into()));
        }
        if words.len() < config.seq_length + 1 {
            return Err(TrainError::CorpusTooSmall { tokens: words.len(), needed: config.seq_length + 1 });
        }
        let [data_rng, dropout_rng, entity_rng] = rngs;
        Ok(Self {
            model,
            config,
            optimizer,
            neighbors,
            step,
            metrics,
            hard_fallbacks: 0,
            data_rng,
            dropout_rng,
            entity_rng,
            words,
            entities,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            model_config: self.model.config.clone(),
            train_config: self.config.clone(),
            params: self.model.params.clone(),
            optimizer: self.optimizer.clone(),
            neighbors: self.neighbors.clone(),
            rngs: [self.data_rng.clone(), self.dropout_rng.clone(), self.entity_rng.clone()],
            metrics: self.metrics.clone(),
        }
    }

    fn refresh_neighbors(&mut self) {
        let mc = &self.model.config;
        if !mc.mode.uses_entity_loss() || self.config.negatives.hard == 0.0 {
            return;
        }
        let due = self.step.is_multiple_of(self.config.neighbor_refresh) && self.neighbors.step != self.step;
        if self.neighbors.lists.is_empty() || due {
            let table = &self.model.params["entity.table"];
            self.neighbors = build_neighbor_table(table.data(), mc.d_entity, self.config.hard_neighbors, self.step);
        }
    }

    /// Draws the next batch and resolves entity dropout and negatives.
    fn next_inputs(&mut self) -> LossInputs {
        let (bs, t) = (self.config.batch_sequences, self.config.seq_length);
        let mc = &self.model.config;
        let mut batch = Batch { words: Vec::with_capacity(bs * t), entities: Vec::with_capacity(bs * t), batch: bs, seq: t };
        let mut word_targets = Vec::with_capacity(bs * t);
        let mut target_entities = Vec::with_capacity(bs * t);
        let last = self.words.len() - t - 1;
        for _ in 0..bs {
            let off = self.data_rng.random_range(0..=last);
            batch.words.extend_from_slice(&self.words[off..off + t]);
            batch.entities.extend_from_slice(&self.entities[off..off + t]);
            word_targets.extend_from_slice(&self.words[off + 1..off + t + 1]);
            target_entities.extend_from_slice(&self.entities[off + 1..off + t + 1]);
        }
        if mc.mode.uses_entity_input() {
            objective::drop_entities(&mut batch.entities, self.config.entity_dropout, &mut self.entity_rng);
        } else {
            batch.entities.iter_mut().for_each(|e| *e = NULL_ENTITY);
        }
        let mut entity_targets = Vec::new();
        if mc.mode.uses_entity_loss() {
            for (position, &positive) in target_entities.iter().enumerate() {
                if positive == NULL_ENTITY {
                    continue;
                }
                let (negative, branch) = sample_negative(
                    positive,
                    &self.neighbors,
                    mc.entity_vocab_size,
                    &self.config.negatives,
                    &mut self.entity_rng,
                );
                if branch == NegativeBranch::HardFallback {
                    self.hard_fallbacks += 1;
                }
                entity_targets.push(EntityTarget { position, positive, negative });
            }
        }
        LossInputs { batch, word_targets, entity_targets }
    }

    /// One optimizer update.
    pub fn train_step(&mut self) -> Result<MetricRow, TrainError> {
        let started = Instant::now();
        self.refresh_neighbors();
        let inputs = self.next_inputs();
        let (mut fp, loss, parts) = kalm_loss(&self.model, &inputs, Some(&mut self.dropout_rng))?;
        if !parts.total.is_finite() {
            return Err(TrainError::NonFinite { step: self.step + 1, inputs: Box::new(inputs) });
        }
        fp.graph.backward(loss).map_err(ModelError::from)?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.model.params.len()];
        for (i, g) in fp.param_grads() {
            grads[i] = Some(g.to_vec());
        }
        drop(fp);
        let lr = lr_schedule(self.step + 1, &self.config);
        let mut tensors: Vec<_> = self.model.params.values_mut().map(Arc::make_mut).collect();
        self.optimizer.step(&mut tensors, &grads, lr);
        self.step += 1;
        let tokens = (self.config.batch_sequences * self.config.seq_length) as f64;
        let row = MetricRow {
            step: self.step,
            lr,
            loss_w: parts.word,
            loss_e: parts.entity,
            tok_per_s: tokens / started.elapsed().as_secs_f64().max(1e-9),
        };
        self.metrics.push(row);
        Ok(row)
    }

    /// Runs until `max_steps`, calling `on_step` after every update.
    pub fn run(&mut self, mut on_step: impl FnMut(&Trainer, &MetricRow) -> Result<(), TrainError>) -> Result<(), TrainError> {
        while self.step < self.config.max_steps {
            let row = self.train_step()?;
            on_step(self, &row)?;
        }
        Ok(())
    }
}
