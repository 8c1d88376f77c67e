//! Word/entity duet sequences.

use crate::dictionary::{EntityDictionary, NULL_ENTITY};

use super::linker::{Linker, MentionSpan};
use super::vocab::SubwordVocab;
use super::TokenizerError;

/// Subword ids with a position-aligned entity channel.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DuetSequence {
    pub word_ids: Vec<u32>,
    pub entity_ids: Vec<u32>,
    /// Byte offset in the source text where each subword starts.
    pub word_starts: Vec<usize>,
}

impl DuetSequence {
    pub fn len(&self) -> usize {
        self.word_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word_ids.is_empty()
    }

    /// A sequence with an all-null entity channel.
    pub fn words_only(word_ids: Vec<u32>) -> Self {
        let n = word_ids.len();
        Self { word_ids, entity_ids: vec![NULL_ENTITY; n], word_starts: Vec::new() }
    }
}

/// Byte ranges of whitespace-delimited words.
pub fn word_ranges(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push((s, i));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((s, text.len()));
    }
    out
}

/// Subword vocabulary plus entity dictionary.
#[derive(Debug, Clone)]
pub struct DuetTokenizer {
    pub vocab: SubwordVocab,
    pub dict: EntityDictionary,
    pub linker: Linker,
}

impl DuetTokenizer {
    pub fn new(vocab: SubwordVocab, dict: EntityDictionary) -> Self {
        Self { vocab, dict, linker: Linker::default() }
    }

    /// Links mentions in `text` and returns them with their byte ranges.
    pub fn mentions(&self, text: &str) -> Vec<(MentionSpan, (usize, usize))> {
        let ranges = word_ranges(text);
        let words: Vec<&str> = ranges.iter().map(|&(s, e)| &text[s..e]).collect();
        self.linker
            .link(&words, &self.dict)
            .into_iter()
            .map(|span| {
                let range = (ranges[span.start_word].0, ranges[span.end_word - 1].1);
                (span, range)
            })
            .collect()
    }

    pub fn tokenize(&self, text: &str) -> DuetSequence {
        let (word_ids, word_starts) = self.vocab.encode_with_offsets(text);
        let ends: Vec<usize> = word_starts.iter().skip(1).copied().chain(std::iter::once(text.len())).collect();
        let entity_ids = self.label_positions(text, &word_starts, &ends);
        DuetSequence { word_ids, entity_ids, word_starts }
    }

    /// Entity channel for an existing id sequence, found by linking its decoded
    /// text. Used when the word ids did not come from `tokenize` (generation).
    pub fn entities_for_ids(&self, ids: &[u32]) -> Result<Vec<u32>, TokenizerError> {
        let mut bytes = Vec::new();
        let mut starts = Vec::with_capacity(ids.len());
        for &id in ids {
            starts.push(bytes.len());
            bytes.extend_from_slice(
                self.vocab.token_bytes(id).ok_or(TokenizerError::IdOutOfRange { id, size: self.vocab.len() })?,
            );
        }
        // Linking needs &str; invalid UTF-8 fragments become spaces so byte
        // offsets stay aligned.
        let text: String = match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => {
                let raw = e.into_bytes();
                let mut out = String::with_capacity(raw.len());
                let mut rest = &raw[..];
                while !rest.is_empty() {
                    match std::str::from_utf8(rest) {
                        Ok(s) => {
                            out.push_str(s);
                            break;
                        }
                        Err(err) => {
                            let good = err.valid_up_to();
                            out.push_str(std::str::from_utf8(&rest[..good]).unwrap());
                            let bad = err.error_len().unwrap_or(rest.len() - good);
                            out.extend(std::iter::repeat_n(' ', bad));
                            rest = &rest[good + bad..];
                        }
                    }
                }
                out
            }
        };
        let ends: Vec<usize> = starts.iter().skip(1).copied().chain(std::iter::once(text.len())).collect();
        Ok(self.label_positions(&text, &starts, &ends))
    }

    fn label_positions(&self, text: &str, starts: &[usize], ends: &[usize]) -> Vec<u32> {
        let mut entity_ids = vec![NULL_ENTITY; starts.len()];
        let mentions = self.mentions(text);
        if mentions.is_empty() {
            return entity_ids;
        }
        // Mentions are sorted and disjoint; sweep both lists together.
        let mut m = 0;
        for (pos, (&s, &e)) in starts.iter().zip(ends).enumerate() {
            while m < mentions.len() && mentions[m].1 .1 <= s {
                m += 1;
            }
            if m == mentions.len() {
                break;
            }
            let (lo, hi) = mentions[m].1;
            if s < hi && lo < e {
                entity_ids[pos] = mentions[m].0.entity;
            }
        }
        entity_ids
    }
}
