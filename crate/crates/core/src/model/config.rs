use std::fmt;
use std::str::FromStr;

use crate::kv::{KvError, KvMap};

use super::ModelError;

/// Which parts of the entity pathway are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelMode {
    /// Word-only GPT-2 shaped decoder.
    Baseline,
    /// Entity embeddings at the input, no entity prediction loss.
    InputOnly,
    /// Entity input plus the entity margin loss at the output.
    FullKalm,
}

impl ModelMode {
    pub fn uses_entity_input(self) -> bool {
        !matches!(self, ModelMode::Baseline)
    }

    pub fn uses_entity_loss(self) -> bool {
        matches!(self, ModelMode::FullKalm)
    }
}

impl fmt::Display for ModelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelMode::Baseline => "baseline",
            ModelMode::InputOnly => "input-only",
            ModelMode::FullKalm => "full-kalm",
        })
    }
}

impl FromStr for ModelMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('_', "-").as_str() {
            "baseline" => Ok(ModelMode::Baseline),
            "input-only" => Ok(ModelMode::InputOnly),
            "full-kalm" => Ok(ModelMode::FullKalm),
            other => Err(format!("unknown mode {other:?} (baseline, input-only, full-kalm)")),
        }
    }
}

/// Sign convention of the entity hinge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MarginConvention {
    /// `max(0, margin - s_pos + s_neg)`: the positive must outscore the negative.
    PositiveAbove,
    /// `max(0, s_pos - s_neg + margin)`, the literal form with the opposite sign.
    Literal,
}

impl fmt::Display for MarginConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MarginConvention::PositiveAbove => "positive-above",
            MarginConvention::Literal => "literal",
        })
    }
}

impl FromStr for MarginConvention {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "positive-above" => Ok(MarginConvention::PositiveAbove),
            "literal" => Ok(MarginConvention::Literal),
            other => Err(format!("unknown margin convention {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub mode: ModelMode,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_entity: usize,
    pub vocab_size: usize,
    /// Entity vocabulary size including the null entity at id 0.
    pub entity_vocab_size: usize,
    pub context_length: usize,
    pub dropout: f64,
    /// Hinge margin.
    pub margin: f64,
    /// Weight of the entity loss in the joint objective.
    pub entity_loss_weight: f64,
    pub margin_convention: MarginConvention,
    pub tied_head: bool,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: ModelMode::FullKalm,
            layers: 4,
            d_model: 256,
            heads: 4,
            d_entity: 64,
            vocab_size: 2048,
            entity_vocab_size: 2001,
            context_length: 128,
            dropout: 0.1,
            margin: 1.0,
            entity_loss_weight: 1.0,
            margin_convention: MarginConvention::PositiveAbove,
            tied_head: true,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.context_length == 0 {
            return fail("layers, d_model, heads and context_length must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive".into());
        }
        if self.mode.uses_entity_input() {
            if self.d_entity == 0 {
                return fail("d_entity must be positive when entities are used".into());
            }
            if self.entity_vocab_size < 2 {
                return fail("entity vocabulary needs the null entity and at least one real entity".into());
            }
        }
        if !(self.margin > 0.0) {
            return fail(format!("margin must be > 0, got {}", self.margin));
        }
        if !(self.entity_loss_weight >= 0.0) {
            return fail(format!("entity-loss-weight must be >= 0, got {}", self.entity_loss_weight));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.ln_eps > 0.0) {
            return fail("ln_eps must be > 0".into());
        }
        Ok(())
    }

    pub fn to_kv(&self, out: &mut KvMap) {
        out.set("mode", self.mode);
        out.set("layers", self.layers);
        out.set("d-model", self.d_model);
        out.set("heads", self.heads);
        out.set("d-entity", self.d_entity);
        out.set("vocab-size", self.vocab_size);
        out.set("entity-vocab-size", self.entity_vocab_size);
        out.set("context-length", self.context_length);
        out.set("dropout", self.dropout);
        out.set("margin", self.margin);
        out.set("entity-loss-weight", self.entity_loss_weight);
        out.set("margin-convention", self.margin_convention);
        out.set("tied-head", self.tied_head);
        out.set("ln-eps", self.ln_eps);
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self, KvError> {
        let d = Self::default();
        Ok(Self {
            mode: kv.get_or("mode", d.mode)?,
            layers: kv.get_or("layers", d.layers)?,
            d_model: kv.get_or("d-model", d.d_model)?,
            heads: kv.get_or("heads", d.heads)?,
            d_entity: kv.get_or("d-entity", d.d_entity)?,
            vocab_size: kv.get_or("vocab-size", d.vocab_size)?,
            entity_vocab_size: kv.get_or("entity-vocab-size", d.entity_vocab_size)?,
            context_length: kv.get_or("context-length", d.context_length)?,
            dropout: kv.get_or("dropout", d.dropout)?,
            margin: kv.get_or("margin", d.margin)?,
            entity_loss_weight: kv.get_or("entity-loss-weight", d.entity_loss_weight)?,
            margin_convention: kv.get_or("margin-convention", d.margin_convention)?,
            tied_head: kv.get_or("tied-head", d.tied_head)?,
            ln_eps: kv.get_or("ln-eps", d.ln_eps)?,
        })
    }
}
