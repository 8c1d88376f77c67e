use crate::kv::{KvError, KvMap};

use super::TrainError;

/// Probabilities of drawing the null entity, a uniformly random entity, or a
/// hard neighbor of the positive as the negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegativeMixture {
    pub null: f64,
    pub random: f64,
    pub hard: f64,
}

impl Default for NegativeMixture {
    fn default() -> Self {
        Self { null: 0.01, random: 0.49, hard: 0.50 }
    }
}

/// Training-only knobs. Loss weight, margin and dropout live on the model
/// config so a checkpoint's model section alone fixes the objective.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub max_steps: u64,
    pub warmup_steps: u64,
    pub max_lr: f64,
    pub min_lr: f64,
    pub total_decay_steps: u64,
    /// Sequences per batch. The full-scale setting is 512.
    pub batch_sequences: usize,
    /// Tokens per sequence. The full-scale setting is 1024.
    pub seq_length: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub entity_dropout: f64,
    pub negatives: NegativeMixture,
    pub hard_neighbors: usize,
    pub neighbor_refresh: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            max_steps: 5000,
            warmup_steps: 3200,
            max_lr: 1.5e-4,
            min_lr: 1e-5,
            total_decay_steps: 300_000,
            batch_sequences: 64,
            seq_length: 128,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            entity_dropout: 0.1,
            negatives: NegativeMixture::default(),
            hard_neighbors: 100,
            neighbor_refresh: 500,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        let n = &self.negatives;
        for (name, p) in [("null", n.null), ("random", n.random), ("hard", n.hard)] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("negative mixture {name} probability {p} outside [0, 1]"));
            }
        }
        if ((n.null + n.random + n.hard) - 1.0).abs() > 1e-9 {
            return fail(format!("negative mixture sums to {}", n.null + n.random + n.hard));
        }
        if self.warmup_steps >= self.total_decay_steps {
            return fail("warmup_steps must be below total_decay_steps".into());
        }
        if !(0.0..1.0).contains(&self.entity_dropout) {
            return fail(format!("entity dropout {} outside [0, 1)", self.entity_dropout));
        }
        if self.batch_sequences == 0 || self.seq_length == 0 {
            return fail("batch_sequences and seq_length must be positive".into());
        }
        if !(self.max_lr >= self.min_lr && self.min_lr >= 0.0) {
            return fail("need max_lr >= min_lr >= 0".into());
        }
        if self.neighbor_refresh == 0 {
            return fail("neighbor_refresh must be positive".into());
        }
        Ok(())
    }

    pub fn to_kv(&self, out: &mut KvMap) {
        out.set("seed", self.seed);
        out.set("max-steps", self.max_steps);
        out.set("warmup-steps", self.warmup_steps);
        out.set("max-lr", self.max_lr);
        out.set("min-lr", self.min_lr);
        out.set("total-decay-steps", self.total_decay_steps);
        out.set("batch-sequences", self.batch_sequences);
        out.set("seq-length", self.seq_length);
        out.set("weight-decay", self.weight_decay);
        out.set("beta1", self.beta1);
        out.set("beta2", self.beta2);
        out.set("adam-eps", self.adam_eps);
        out.set("entity-dropout", self.entity_dropout);
        out.set("neg-null", self.negatives.null);
        out.set("neg-random", self.negatives.random);
        out.set("neg-hard", self.negatives.hard);
        out.set("hard-neighbors", self.hard_neighbors);
        out.set("neighbor-refresh", self.neighbor_refresh);
        out.set("checkpoint-every", self.checkpoint_every);
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self, KvError> {
        let d = Self::default();
        Ok(Self {
            seed: kv.get_or("seed", d.seed)?,
            max_steps: kv.get_or("max-steps", d.max_steps)?,
            warmup_steps: kv.get_or("warmup-steps", d.warmup_steps)?,
            max_lr: kv.get_or("max-lr", d.max_lr)?,
            min_lr: kv.get_or("min-lr", d.min_lr)?,
            total_decay_steps: kv.get_or("total-decay-steps", d.total_decay_steps)?,
            batch_sequences: kv.get_or("batch-sequences", d.batch_sequences)?,
            seq_length: kv.get_or("seq-length", d.seq_length)?,
            weight_decay: kv.get_or("weight-decay", d.weight_decay)?,
            beta1: kv.get_or("beta1", d.beta1)?,
            beta2: kv.get_or("beta2", d.beta2)?,
            adam_eps: kv.get_or("adam-eps", d.adam_eps)?,
            entity_dropout: kv.get_or("entity-dropout", d.entity_dropout)?,
            negatives: NegativeMixture {
                null: kv.get_or("neg-null", d.negatives.null)?,
                random: kv.get_or("neg-random", d.negatives.random)?,
                hard: kv.get_or("neg-hard", d.negatives.hard)?,
            },
            hard_neighbors: kv.get_or("hard-neighbors", d.hard_neighbors)?,
            neighbor_refresh: kv.get_or("neighbor-refresh", d.neighbor_refresh)?,
            checkpoint_every: kv.get_or("checkpoint-every", d.checkpoint_every)?,
        })
    }
}

/// Linear warmup from 0 to `max_lr`, cosine decay to `min_lr` at
/// `total_decay_steps`, constant afterwards.
pub fn lr_schedule(step: u64, c: &TrainConfig) -> f64 {
    if step < c.warmup_steps {
        return c.max_lr * step as f64 / c.warmup_steps as f64;
    }
    if step > c.total_decay_steps {
        return c.min_lr;
    }
    let progress = (step - c.warmup_steps) as f64 / (c.total_decay_steps - c.warmup_steps) as f64;
    c.min_lr + 0.5 * (c.max_lr - c.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}
