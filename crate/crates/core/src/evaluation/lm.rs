use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::model::{generate, LanguageModel};
use crate::tokenizer::{DuetSequence, DuetTokenizer};

use super::{ClozeItem, EvalError};

/// exp of the mean next-token negative log-likelihood, scoring the stream in
/// consecutive non-overlapping windows of the model's context length. The
/// first token of each window is context only.
pub fn perplexity(model: &dyn LanguageModel, words: &[u32], entities: &[u32]) -> Result<f64, EvalError> {
    if words.len() < 2 {
        return Err(EvalError::Empty("perplexity needs at least two tokens"));
    }
    let ctx = model.context_length();
    let uses = model.uses_entities();
    let nulls = vec![0; ctx];
    let windows: Vec<(usize, usize)> =
        (0..words.len()).step_by(ctx).map(|s| (s, (s + ctx).min(words.len()))).filter(|(s, e)| e - s >= 2).collect();
    let parts: Vec<(f64, usize)> = windows
        .par_iter()
        .map(|&(s, e)| {
            let ents = if uses { &entities[s..e] } else { &nulls[..e - s] };
            let logits = model.word_logits(&words[s..e], ents)?;
            let mut nll = 0.0;
            for i in 0..e - s - 1 {
                nll += neg_log_prob(logits.row(i), words[s + i + 1] as usize);
            }
            Ok((nll, e - s - 1))
        })
        .collect::<Result<_, EvalError>>()?;
    let (nll, n) = parts.iter().fold((0.0, 0), |(a, b), (x, y)| (a + x, b + y));
    Ok((nll / n as f64).exp())
}

fn neg_log_prob(row: &[f64], target: usize) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
    lse - row[target]
}

/// Prompt duet for free text; an empty context becomes a lone end-of-text token.
fn prompt_duet(tok: &DuetTokenizer, context: &str) -> DuetSequence {
    let d = tok.tokenize(context.trim_end());
    if d.is_empty() {
        DuetSequence::words_only(vec![tok.vocab.end_of_text()])
    } else {
        d
    }
}

/// Fraction of items whose final word is reproduced exactly by greedy
/// decoding of as many subwords as the gold word has.
pub fn last_word_accuracy(
    model: &dyn LanguageModel,
    tok: &DuetTokenizer,
    items: &[(String, String)],
) -> Result<f64, EvalError> {
    if items.is_empty() {
        return Err(EvalError::Empty("no last-word items"));
    }
    let hits: Vec<bool> = items
        .par_iter()
        .map(|(context, word)| {
            let gold = tok.vocab.encode(&format!(" {}", word.trim()));
            let prompt = prompt_duet(tok, context).word_ids;
            let out = generate(model, Some(tok), &prompt, gold.len(), None)?;
            Ok(out[prompt.len()..] == gold[..])
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / items.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RelationScore {
    pub evaluated: usize,
    pub hits: usize,
}

impl RelationScore {
    pub fn p_at_1(&self) -> Option<f64> {
        (self.evaluated > 0).then(|| self.hits as f64 / self.evaluated as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClozeReport {
    pub total: usize,
    /// Items whose gold answer is not a single subword; excluded.
    pub filtered: usize,
    pub overall: RelationScore,
    pub per_relation: BTreeMap<String, RelationScore>,
}

impl ClozeReport {
    /// Micro average over all evaluated items.
    pub fn micro(&self) -> Option<f64> {
        self.overall.p_at_1()
    }

    /// Mean of per-relation precision over relations with evaluated items.
    pub fn macro_avg(&self) -> Option<f64> {
        let v: Vec<f64> = self.per_relation.values().filter_map(RelationScore::p_at_1).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Single-token cloze precision: an item counts when the argmax of the word
/// logits after the context is the gold token. Gold answers are encoded with
/// a leading space, as they occur mid-sentence.
pub fn cloze_p_at_1(model: &dyn LanguageModel, tok: &DuetTokenizer, items: &[ClozeItem]) -> Result<ClozeReport, EvalError> {
    let ctx = model.context_length();
    let outcomes: Vec<Option<bool>> = items
        .par_iter()
        .map(|item| {
            let gold = tok.vocab.encode(&format!(" {}", item.answer.trim()));
            if gold.len() != 1 {
                return Ok(None);
            }
            let d = prompt_duet(tok, item.context());
            let start = d.len().saturating_sub(ctx);
            let ents = if model.uses_entities() { d.entity_ids[start..].to_vec() } else { vec![0; d.len() - start] };
            let logits = model.word_logits(&d.word_ids[start..], &ents)?;
            let last = logits.row(logits.rows() - 1);
            Ok(Some(crate::model::argmax(last) == gold[0] as usize))
        })
        .collect::<Result<_, EvalError>>()?;
    let mut report = ClozeReport { total: items.len(), ..ClozeReport::default() };
    for (item, outcome) in items.iter().zip(outcomes) {
        let Some(hit) = outcome else {
            report.filtered += 1;
            continue;
        };
        let rel = report.per_relation.entry(item.relation.clone()).or_default();
        for s in [rel, &mut report.overall] {
            s.evaluated += 1;
            s.hits += usize::from(hit);
        }
    }
    Ok(report)
}
