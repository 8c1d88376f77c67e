//! Measurement harnesses: perplexity, last-word accuracy, single-token cloze
//! precision, zero-shot QA and linear span probes.

mod lm;
mod probe;
mod qa;

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;

pub use lm::{cloze_p_at_1, last_word_accuracy, perplexity, ClozeReport, RelationScore};
pub use probe::{
    micro_f1, probe_features, span_token_range, train_probe, write_probe_tsv, LinearProbe, ProbeConfig, ProbePoint,
    ProbeSplit,
};
pub use qa::{build_qa_prompt, extract_answer, score_answer, zero_shot_qa, QaRecord, QaReport, ANSWER_CUE, QA_TEMPLATE};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate: {0}")]
    Empty(&'static str),
    #[error("line {line}: {reason}")]
    Dataset { line: usize, reason: String },
    #[error("probe: {0}")]
    Probe(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClozeItem {
    /// Text whose final word is the blank, written `[MASK]`.
    pub statement: String,
    pub answer: String,
    #[serde(default)]
    pub relation: String,
}

pub const BLANK: &str = "[MASK]";

impl ClozeItem {
    /// Text preceding the terminal blank. Statements without a blank marker
    /// are used whole.
    pub fn context(&self) -> &str {
        let s = self.statement.trim_end();
        let s = s.strip_suffix('.').unwrap_or(s).trim_end();
        s.strip_suffix(BLANK).unwrap_or(s).trim_end()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub question: String,
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub text: String,
    /// Half-open whitespace-word ranges `[start, end)`.
    pub spans: Vec<(usize, usize)>,
    pub label: String,
}

/// Reads one JSON object per non-blank line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| EvalError::Dataset { line: i + 1, reason: e.to_string() }))
        .collect()
}

pub fn load_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, EvalError> {
    read_jsonl(&fs::read_to_string(path)?)
}

pub fn write_jsonl<T: Serialize, W: Write>(mut w: W, items: &[T]) -> io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_cloze(path: &Path) -> Result<Vec<ClozeItem>, EvalError> {
    let items: Vec<ClozeItem> = load_jsonl(path)?;
    for (i, it) in items.iter().enumerate() {
        if it.answer.trim().is_empty() {
            return Err(EvalError::Dataset { line: i + 1, reason: "empty answer".into() });
        }
    }
    Ok(items)
}

pub fn load_qa(path: &Path) -> Result<Vec<QaItem>, EvalError> {
    let items: Vec<QaItem> = load_jsonl(path)?;
    for (i, it) in items.iter().enumerate() {
        if it.answers.is_empty() {
            return Err(EvalError::Dataset { line: i + 1, reason: "no gold answers".into() });
        }
    }
    Ok(items)
}

pub fn load_probe(path: &Path) -> Result<Vec<ProbeRecord>, EvalError> {
    load_jsonl(path)
}

pub const REPORT_HEADER: &str = "#kalm-eval v1";

/// Tab-separated report: header line, column names, rows.
pub fn write_report<W: Write>(mut w: W, columns: &[&str], rows: &[Vec<String>]) -> io::Result<()> {
    writeln!(w, "{REPORT_HEADER}")?;
    writeln!(w, "{}", columns.join("\t"))?;
    for r in rows {
        writeln!(w, "{}", r.join("\t"))?;
    }
    Ok(())
}
