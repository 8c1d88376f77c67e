//! Entity dropout, negative sampling, hard-neighbor tables and the joint
//! word + entity objective.

use rand::{Rng, RngCore};
use rayon::prelude::*;

use crate::autodiff::{cosine, Var};
use crate::dictionary::NULL_ENTITY;
use crate::model::{Batch, ForwardPass, KalmModel, MarginConvention, ModelError};
use crate::tokenizer::DuetSequence;

use super::NegativeMixture;

/// Replaces each linked entity id with null independently with probability `p`.
/// Null positions consume no randomness.
pub fn entity_dropout(duet: &DuetSequence, p: f64, rng: &mut dyn RngCore) -> DuetSequence {
    let mut out = duet.clone();
    drop_entities(&mut out.entity_ids, p, rng);
    out
}

pub(crate) fn drop_entities(ids: &mut [u32], p: f64, rng: &mut dyn RngCore) {
    if p <= 0.0 {
        return;
    }
    for e in ids.iter_mut().filter(|e| **e != NULL_ENTITY) {
        if rng.random::<f64>() < p {
            *e = NULL_ENTITY;
        }
    }
}

/// Nearest entities by cosine over the current entity table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NeighborTable {
    /// `lists[e]` holds the neighbors of entity `e`; `lists[0]` is empty.
    pub lists: Vec<Vec<u32>>,
    /// Training step at which the table was built.
    pub step: u64,
}

impl NeighborTable {
    pub fn neighbors(&self, entity: u32) -> &[u32] {
        self.lists.get(entity as usize).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// For every non-null entity, the `k` non-null entities with the highest
/// cosine to it (self excluded, ties to the smaller id).
pub fn build_neighbor_table(table: &[f64], dim: usize, k: usize, step: u64) -> NeighborTable {
    let n = table.len() / dim.max(1);
    let row = |i: usize| &table[i * dim..(i + 1) * dim];
    let mut lists: Vec<Vec<u32>> = (0..n)
        .into_par_iter()
        .map(|e| {
            if e == 0 || k == 0 {
                return Vec::new();
            }
            let mut scored: Vec<(f64, u32)> =
                (1..n).filter(|&o| o != e).map(|o| (cosine(row(e), row(o)), o as u32)).collect();
            let cmp = |a: &(f64, u32), b: &(f64, u32)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
            if scored.len() > k {
                scored.select_nth_unstable_by(k - 1, cmp);
                scored.truncate(k);
            }
            scored.sort_by(cmp);
            scored.into_iter().map(|(_, o)| o).collect()
        })
        .collect();
    if lists.is_empty() {
        lists.push(Vec::new());
    }
    NeighborTable { lists, step }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeBranch {
    Null,
    Random,
    Hard,
    /// A hard draw for an entity without neighbors, served by the random branch.
    HardFallback,
}

/// Draws a negative for `positive` from the mixture. The result never equals
/// `positive`; a hard draw with no neighbors falls back to a random entity and
/// a random draw with no other entity available falls back to null.
pub fn sample_negative(
    positive: u32,
    neighbors: &NeighborTable,
    entity_vocab_size: usize,
    mixture: &NegativeMixture,
    rng: &mut dyn RngCore,
) -> (u32, NegativeBranch) {
    let u: f64 = rng.random();
    let mut branch = if u < mixture.null {
        NegativeBranch::Null
    } else if u < mixture.null + mixture.random {
        NegativeBranch::Random
    } else {
        NegativeBranch::Hard
    };
    if branch == NegativeBranch::Hard {
        let list = neighbors.neighbors(positive);
        let usable = list.iter().filter(|&&e| e != positive).count();
        if usable > 0 {
            let k = rng.random_range(0..usable);
            return (*list.iter().filter(|&&e| e != positive).nth(k).unwrap(), branch);
        }
        branch = NegativeBranch::HardFallback;
    }
    if branch != NegativeBranch::Null {
        let candidates = entity_vocab_size.saturating_sub(1) - usize::from(positive != NULL_ENTITY);
        if candidates > 0 {
            let mut e = rng.random_range(1..=candidates as u32);
            if positive != NULL_ENTITY && e >= positive {
                e += 1;
            }
            return (e, branch);
        }
    }
    (NULL_ENTITY, NegativeBranch::Null)
}

/// Everything the objective needs for one step, with all randomness except
/// model dropout already resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct LossInputs {
    /// Model inputs; the entity channel has had entity dropout applied.
    pub batch: Batch,
    /// Next-token targets, one per input position.
    pub word_targets: Vec<u32>,
    /// One record per position whose next token carries a linked entity.
    pub entity_targets: Vec<EntityTarget>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntityTarget {
    /// Flat index into the batch.
    pub position: usize,
    pub positive: u32,
    pub negative: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub word: f64,
    /// Mean hinge over linked positions; 0 when none or not in the objective.
    pub entity: f64,
    pub linked: usize,
}

/// Records forward pass and objective. Returns the pass and the scalar loss
/// node, ready for `backward`.
pub fn kalm_loss(
    model: &KalmModel,
    inputs: &LossInputs,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<(ForwardPass, Var, LossBreakdown), ModelError> {
    let c = &model.config;
    let mut fp = model.forward(&inputs.batch, dropout_rng)?;
    let mask = vec![true; inputs.word_targets.len()];
    let word = fp.graph.cross_entropy(fp.logits, &inputs.word_targets, &mask)?;
    let word_value = fp.graph.value(word).item();
    let mut out = LossBreakdown { total: word_value, word: word_value, entity: 0.0, linked: 0 };
    if !c.mode.uses_entity_loss() || inputs.entity_targets.is_empty() {
        return Ok((fp, word, out));
    }
    let entity = entity_margin_loss(model, &mut fp, &inputs.entity_targets)?;
    out.entity = fp.graph.value(entity).item();
    out.linked = inputs.entity_targets.len();
    if c.entity_loss_weight == 0.0 {
        return Ok((fp, word, out));
    }
    let weighted = fp.graph.scale(entity, c.entity_loss_weight)?;
    let total = fp.graph.add(word, weighted)?;
    out.total = fp.graph.value(total).item();
    Ok((fp, total, out))
}

/// Mean hinge over `targets`, recorded on the pass's graph.
pub fn entity_margin_loss(model: &KalmModel, fp: &mut ForwardPass, targets: &[EntityTarget]) -> Result<Var, ModelError> {
    let c = &model.config;
    let positions: Vec<u32> = targets.iter().map(|t| t.position as u32).collect();
    let pos_ids: Vec<u32> = targets.iter().map(|t| t.positive).collect();
    let neg_ids: Vec<u32> = targets.iter().map(|t| t.negative).collect();
    let w_out = fp.param(model, "entity.out")?;
    let table = fp.param(model, "entity.table")?;
    let g = &mut fp.graph;
    let h = g.embedding_gather(fp.hidden, &positions)?;
    let proj = g.matmul(h, w_out)?;
    let pos = g.embedding_gather(table, &pos_ids)?;
    let neg = g.embedding_gather(table, &neg_ids)?;
    let s_pos = g.cosine_sim(proj, pos)?;
    let s_neg = g.cosine_sim(proj, neg)?;
    let diff = match c.margin_convention {
        MarginConvention::PositiveAbove => g.sub(s_neg, s_pos)?,
        MarginConvention::Literal => g.sub(s_pos, s_neg)?,
    };
    let shifted = g.add_scalar(diff, c.margin)?;
    let hinge = g.relu(shifted)?;
    Ok(g.mean(hinge)?)
}
