use crate::autodiff::Tensor;
use crate::tokenizer::DuetTokenizer;

use super::ModelError;

/// What evaluation and decoding need from a model. Implementations must be
/// safe to query concurrently from evaluation threads.
pub trait LanguageModel: Sync {
    fn vocab_size(&self) -> usize;
    fn context_length(&self) -> usize;
    /// Whether the entity channel influences word logits.
    fn uses_entities(&self) -> bool;
    /// Word logits `[T, V]` for one duet sequence.
    fn word_logits(&self, words: &[u32], entities: &[u32]) -> Result<Tensor, ModelError>;
}

/// Greedy decoding from the word head. The returned ids start with `prompt`.
/// When the model reads entities and a tokenizer is given, the entity channel
/// is recomputed by relinking the decoded text before every step; otherwise it
/// is all null. Inputs longer than the context keep their rightmost tokens.
pub fn generate(
    model: &dyn LanguageModel,
    relinker: Option<&DuetTokenizer>,
    prompt: &[u32],
    max_new_tokens: usize,
    stop_token: Option<u32>,
) -> Result<Vec<u32>, ModelError> {
    let mut ids = prompt.to_vec();
    let ctx = model.context_length();
    for _ in 0..max_new_tokens {
        if ids.is_empty() {
            break;
        }
        let entities = match relinker {
            Some(tok) if model.uses_entities() => tok.entities_for_ids(&ids)?,
            _ => vec![0; ids.len()],
        };
        let start = ids.len().saturating_sub(ctx);
        let logits = model.word_logits(&ids[start..], &entities[start..])?;
        let last = logits.row(logits.rows() - 1);
        let next = argmax(last) as u32;
        ids.push(next);
        if stop_token == Some(next) {
            break;
        }
    }
    Ok(ids)
}

/// Index of the largest value; the first wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{KalmModel, ModelConfig, ModelMode};

    /// Next token is a fixed function of the current one.
    struct Table {
        next: Vec<Vec<f64>>,
        scale: fn(f64) -> f64,
    }

    impl LanguageModel for Table {
        fn vocab_size(&self) -> usize {
            self.next.len()
        }
        fn context_length(&self) -> usize {
            4
        }
        fn uses_entities(&self) -> bool {
            false
        }
        fn word_logits(&self, words: &[u32], _: &[u32]) -> Result<Tensor, ModelError> {
            let v = self.next.len();
            let data = words.iter().flat_map(|&w| self.next[w as usize].iter().map(|&x| (self.scale)(x))).collect();
            Ok(Tensor::new(vec![words.len(), v], data)?)
        }
    }

    fn toy(scale: fn(f64) -> f64) -> Table {
        // 0 -> 2, 1 -> 0, 2 -> 1 (with a tie broken toward the lower id)
        Table { next: vec![vec![0.1, 0.2, 0.9], vec![0.5, 0.3, 0.1], vec![0.2, 0.7, 0.7]], scale }
    }

    #[test]
    fn hand_argmax_chain() {
        let out = generate(&toy(|x| x), None, &[0], 5, None).unwrap();
        assert_eq!(out, vec![0, 2, 1, 0, 2, 1]);
        assert_eq!(generate(&toy(|x| x), None, &[0], 5, Some(1)).unwrap(), vec![0, 2, 1]);
        assert_eq!(generate(&toy(|x| x), None, &[2, 1], 0, None).unwrap(), vec![2, 1]);
    }

    #[test]
    fn monotone_rescaling_keeps_output() {
        let a = generate(&toy(|x| x), None, &[1, 2], 7, None).unwrap();
        let b = generate(&toy(|x| 3.0 * x.powi(3) - 1.0), None, &[1, 2], 7, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deterministic_and_independent_of_entity_head() {
        let cfg = ModelConfig {
            mode: ModelMode::FullKalm,
            layers: 1,
            d_model: 8,
            heads: 2,
            d_entity: 4,
            vocab_size: 300,
            entity_vocab_size: 4,
            context_length: 6,
            ..ModelConfig::default()
        };
        let mut m = KalmModel::new(cfg, 3).unwrap();
        let a = generate(&m, None, &[104, 105, 32], 8, None).unwrap();
        assert_eq!(a, generate(&m, None, &[104, 105, 32], 8, None).unwrap());
        assert_eq!(a.len(), 11);
        m.params.shift_remove("entity.out");
        assert_eq!(a, generate(&m, None, &[104, 105, 32], 8, None).unwrap());
    }
}
