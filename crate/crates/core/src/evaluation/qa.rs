use rayon::prelude::*;

use crate::model::{generate, LanguageModel, ModelError};
use crate::tokenizer::DuetTokenizer;

use super::{EvalError, QaItem};

/// The example pairs prepended to every question, verbatim, including their
/// irregular spacing.
pub const QA_TEMPLATE: [&str; 9] = [
    "question: where is the Lincoln Memorial located?  \n  answer: Washington, DC, USA  \n  \n ",
    "question: How long is the Nile river  \n  answer: 6250 miles  \n  \n ",
    "question: who was elected president of the united states in 1928?  \n  answer: Herbert Hoover  \n  \n ",
    "question: what year did the September 11th attack occur? \n answer: 2001  \n  \n ",
    "question: what elements of the periodic table are liquid at room temperature? \n answer: bromine, mercury \n  \n ",
    "question: which pigment helps plant absorb energy from light? \n answer: chlorophyll \n  \n ",
    "question: who was the commander of the japanese navy for the majority of World War II? \n answer: Isoroku Yamamoto \n  \n ",
    "question: name of a famous highway without speed limits? \n answer: Autobahn \n  \n ",
    "question: how many wheels does a semi truck have? \n answer: 18 \n  \n ",
];

pub const ANSWER_CUE: &str = "answer:";

/// Template pairs followed by the test question and the answer cue.
pub fn build_qa_prompt(question: &str, template: &[&str]) -> String {
    let mut s: String = template.concat();
    s.push_str("question: ");
    s.push_str(question);
    s.push_str(" \n ");
    s.push_str(ANSWER_CUE);
    s
}

/// Text after the last answer cue (case-insensitive), up to the first newline,
/// trimmed. Text without a cue is read from the start.
pub fn extract_answer(text: &str) -> &str {
    let start = text.to_ascii_lowercase().rfind(ANSWER_CUE).map_or(0, |i| i + ANSWER_CUE.len());
    let rest = &text[start..];
    rest.split('\n').next().unwrap_or("").trim()
}

/// `(exact match, cover match)` after lowercasing both sides.
pub fn score_answer(extracted: &str, golds: &[String]) -> (bool, bool) {
    let pred = extracted.trim().to_lowercase();
    let em = golds.iter().any(|g| g.trim().to_lowercase() == pred);
    let cover = golds.iter().any(|g| pred.contains(&g.trim().to_lowercase()));
    (em, cover)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaRecord {
    pub question: String,
    pub generated: String,
    pub extracted: String,
    pub em: bool,
    pub cover_em: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QaReport {
    pub records: Vec<QaRecord>,
    /// Items dropped by the answer-length filter.
    pub skipped: usize,
}

impl QaReport {
    pub fn em(&self) -> Option<f64> {
        self.rate(|r| r.em)
    }

    pub fn cover_em(&self) -> Option<f64> {
        self.rate(|r| r.cover_em)
    }

    fn rate(&self, f: impl Fn(&QaRecord) -> bool) -> Option<f64> {
        let n = self.records.len();
        (n > 0).then(|| 100.0 * self.records.iter().filter(|r| f(r)).count() as f64 / n as f64)
    }
}

/// Greedy zero-shot QA. With `max_answer_words`, items whose gold answers
/// all exceed that many whitespace-separated words are skipped.
pub fn zero_shot_qa(
    model: &dyn LanguageModel,
    tok: &DuetTokenizer,
    items: &[QaItem],
    max_new_tokens: usize,
    max_answer_words: Option<usize>,
) -> Result<QaReport, EvalError> {
    let keep = |it: &QaItem| match max_answer_words {
        Some(n) => it.answers.iter().any(|a| a.split_whitespace().count() <= n),
        None => true,
    };
    let kept: Vec<&QaItem> = items.iter().filter(|it| keep(it)).collect();
    let newline = tok.vocab.end_of_text();
    let records = kept
        .par_iter()
        .map(|it| {
            let prompt = tok.tokenize(&build_qa_prompt(&it.question, &QA_TEMPLATE)).word_ids;
            let ids = generate(model, Some(tok), &prompt, max_new_tokens, Some(newline))?;
            let generated = tok.vocab.decode(&ids[prompt.len()..]).map_err(ModelError::from)?;
            let full = tok.vocab.decode(&ids).map_err(ModelError::from)?;
            let extracted = extract_answer(&full).to_string();
            let (em, cover_em) = score_answer(&extracted, &it.answers);
            Ok(QaRecord { question: it.question.clone(), generated, extracted, em, cover_em })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(QaReport { records, skipped: items.len() - kept.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_pair_and_empty_question() {
        let p = build_qa_prompt("", &QA_TEMPLATE);
        assert!(p.starts_with("question: where is the Lincoln Memorial located?  \n  answer: Washington, DC, USA"));
        assert!(p.ends_with("question:  \n answer:"));
        assert_eq!(extract_answer(&p), "");
    }

    #[test]
    fn extraction_rules() {
        assert_eq!(extract_answer("question: q \n answer: paris\nquestion"), "paris");
        assert_eq!(extract_answer("answer: a \n Answer:  b c "), "b c");
        assert_eq!(extract_answer("no cue\nmore"), "no cue");
    }

    #[test]
    fn scoring() {
        let g = |s: &[&str]| s.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert_eq!(score_answer("washington, dc, usa", &g(&["Washington, DC, USA"])), (true, true));
        assert_eq!(score_answer("the answer is paris france", &g(&["paris"])), (false, true));
        assert_eq!(score_answer("lyon", &g(&["paris", "Lyon"])), (true, true));
        assert_eq!(score_answer("", &g(&["x"])), (false, false));
    }
}
