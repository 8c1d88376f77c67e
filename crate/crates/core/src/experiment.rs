//! Desk-scale comparison of the three model modes on a synthetic world:
//! identical training except for the mode, scored by held-out cloze P@1.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::dictionary::{DictionaryError, EntityDictionary, Thresholds};
use crate::evaluation::{cloze_p_at_1, ClozeItem, ClozeReport, EvalError};
use crate::model::{KalmModel, ModelConfig, ModelError, ModelMode};
use crate::pretraining::{MetricRow, TrainConfig, TrainError, Trainer};
use crate::synthetic::{generate_kb, SyntheticKb, WorldError, WorldSplit};
use crate::tokenizer::{DuetSequence, DuetTokenizer, SubwordVocab, TokenizerError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Dictionary(#[from] DictionaryError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone)]
pub struct DeskSetup {
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_triples: usize,
    pub n_sentences: usize,
    pub holdout_fraction: f64,
    pub alias_noise: f64,
    /// Model shape; `mode`, `vocab_size` and `entity_vocab_size` are filled in per arm.
    pub model: ModelConfig,
    /// Shared by every arm; `seed` is replaced by the run seed.
    pub train: TrainConfig,
}

impl Default for DeskSetup {
    fn default() -> Self {
        Self {
            n_entities: 2000,
            n_relations: 8,
            n_triples: 20_000,
            n_sentences: 200_000,
            holdout_fraction: 0.2,
            alias_noise: 1.0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Everything derived from the world seed, shared by the arms of one seed.
pub struct World {
    pub kb: SyntheticKb,
    pub split: WorldSplit,
    pub tokenizer: DuetTokenizer,
    pub corpus: Vec<DuetSequence>,
    pub cloze: Vec<ClozeItem>,
}

pub fn build_world(seed: u64, setup: &DeskSetup) -> Result<World, ExperimentError> {
    let kb = generate_kb(seed, setup.n_entities, setup.n_relations, setup.n_triples)?;
    let split = kb.split(setup.holdout_fraction)?;
    let text = kb.render_corpus(&split, setup.n_sentences, setup.alias_noise);
    let lines: Vec<String> = text.lines().map(|l| format!("{l}\n")).collect();
    let vocab = SubwordVocab::train(&lines, setup.model.vocab_size)?;
    let dict = EntityDictionary::build(kb.render_dictionary(), Thresholds::default())?;
    let tokenizer = DuetTokenizer::new(vocab, dict);
    let corpus = lines.iter().map(|l| tokenizer.tokenize(l)).collect();
    let cloze = kb.render_cloze(&split);
    Ok(World { kb, split, tokenizer, corpus, cloze })
}

/// Trains one arm from scratch and scores it on the world's cloze set.
pub fn run_arm(
    world: &World,
    mode: ModelMode,
    seed: u64,
    setup: &DeskSetup,
    on_step: impl FnMut(&Trainer, &MetricRow) -> Result<(), TrainError>,
) -> Result<ClozeReport, ExperimentError> {
    let config = ModelConfig {
        mode,
        vocab_size: world.tokenizer.vocab.len(),
        entity_vocab_size: world.kb.entity_vocab_size(),
        ..setup.model.clone()
    };
    let model = KalmModel::new(config, seed)?;
    let mut trainer = Trainer::new(model, TrainConfig { seed, ..setup.train.clone() }, &world.corpus)?;
    trainer.run(on_step)?;
    Ok(cloze_p_at_1(&trainer.model, &world.tokenizer, &world.cloze)?)
}

/// Cloze P@1 of each mode for one seed.
pub fn run_seed(
    seed: u64,
    setup: &DeskSetup,
    mut log: impl FnMut(ModelMode, &MetricRow),
) -> Result<BTreeMap<ModelMode, ClozeReport>, ExperimentError> {
    let world = build_world(seed, setup)?;
    let mut out = BTreeMap::new();
    for mode in [ModelMode::Baseline, ModelMode::InputOnly, ModelMode::FullKalm] {
        let report = run_arm(&world, mode, seed, setup, |_, row| {
            log(mode, row);
            Ok(())
        })?;
        out.insert(mode, report);
    }
    Ok(out)
}

/// Outcome of the directional test over several seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub seeds: usize,
    /// Seeds where full-kalm strictly beats the baseline.
    pub wins: usize,
    pub mean: BTreeMap<ModelMode, f64>,
}

impl Verdict {
    pub fn from_runs(runs: &[BTreeMap<ModelMode, f64>]) -> Self {
        let wins = runs.iter().filter(|r| r[&ModelMode::FullKalm] > r[&ModelMode::Baseline]).count();
        let mut mean = BTreeMap::new();
        for mode in [ModelMode::Baseline, ModelMode::InputOnly, ModelMode::FullKalm] {
            let m = runs.iter().map(|r| r[&mode]).sum::<f64>() / runs.len().max(1) as f64;
            mean.insert(mode, m);
        }
        Self { seeds: runs.len(), wins, mean }
    }

    /// Full-kalm wins on all but at most one seed and the mean ordering is
    /// baseline <= input-only <= full-kalm.
    pub fn passes(&self) -> bool {
        let m = |k| self.mean[&k];
        self.seeds > 0
            && self.wins + 1 >= self.seeds
            && m(ModelMode::Baseline) <= m(ModelMode::InputOnly)
            && m(ModelMode::InputOnly) <= m(ModelMode::FullKalm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(b: f64, i: f64, f: f64) -> BTreeMap<ModelMode, f64> {
        [(ModelMode::Baseline, b), (ModelMode::InputOnly, i), (ModelMode::FullKalm, f)].into()
    }

    #[test]
    fn verdict_rules() {
        let good = vec![run(0.1, 0.2, 0.3), run(0.1, 0.15, 0.2), run(0.2, 0.2, 0.2), run(0.0, 0.1, 0.1), run(0.1, 0.1, 0.4)];
        let v = Verdict::from_runs(&good);
        assert_eq!(v.wins, 4);
        assert!(v.passes());
        let mut two_losses = good.clone();
        two_losses[0] = run(0.3, 0.3, 0.3);
        assert!(!Verdict::from_runs(&two_losses).passes());
        let misordered = vec![run(0.1, 0.5, 0.3); 5];
        assert!(!Verdict::from_runs(&misordered).passes());
    }

    #[test]
    fn tiny_world_runs_all_arms() {
        let mut setup = DeskSetup {
            n_entities: 30,
            n_relations: 3,
            n_triples: 60,
            n_sentences: 300,
            ..DeskSetup::default()
        };
        setup.model = ModelConfig { layers: 1, d_model: 16, heads: 2, d_entity: 8, vocab_size: 300, context_length: 16, ..ModelConfig::default() };
        setup.train = TrainConfig {
            max_steps: 3,
            warmup_steps: 1,
            total_decay_steps: 10,
            batch_sequences: 2,
            seq_length: 16,
            hard_neighbors: 4,
            ..TrainConfig::default()
        };
        let mut rows = 0;
        let out = run_seed(1, &setup, |_, _| rows += 1).unwrap();
        assert_eq!(rows, 9);
        assert_eq!(out.len(), 3);
        for r in out.values() {
            assert_eq!(r.total, 12);
            assert_eq!(r.filtered + r.overall.evaluated, 12);
        }
    }
}
