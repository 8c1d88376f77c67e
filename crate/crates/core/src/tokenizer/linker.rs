//! Forward-greedy entity linking over space-delimited words.

use crate::dictionary::{variant_forms, EntityDictionary, MAX_SURFACE_WORDS};

/// A linked mention in word space: words `start_word..end_word`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MentionSpan {
    pub start_word: usize,
    pub end_word: usize,
    pub entity: u32,
    /// The variant string that hit the dictionary.
    pub surface: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkStats {
    pub queries: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Linker {
    pub max_window: usize,
}

impl Default for Linker {
    fn default() -> Self {
        Self { max_window: MAX_SURFACE_WORDS }
    }
}

impl Linker {
    pub fn new(max_window: usize) -> Self {
        assert!(max_window >= 1, "window must cover at least one word");
        Self { max_window }
    }

    pub fn link<S: AsRef<str>>(&self, words: &[S], dict: &EntityDictionary) -> Vec<MentionSpan> {
        self.link_with_stats(words, dict).0
    }

    /// Scans left to right. At each position the window shrinks from
    /// `max_window` to 1 word; every variant of a window is tried before the
    /// window shrinks. A hit links the whole window and moves past it.
    pub fn link_with_stats<S: AsRef<str>>(&self, words: &[S], dict: &EntityDictionary) -> (Vec<MentionSpan>, LinkStats) {
        let mut spans = Vec::new();
        let mut stats = LinkStats::default();
        if dict.is_empty() {
            return (spans, stats);
        }
        let mut i = 0;
        'scan: while i < words.len() {
            let widest = self.max_window.min(words.len() - i);
            for size in (1..=widest).rev() {
                for variant in variant_forms(&words[i..i + size]) {
                    stats.queries += 1;
                    if let Some((entity, _)) = dict.lookup(&variant) {
                        spans.push(MentionSpan { start_word: i, end_word: i + size, entity, surface: variant });
                        i += size;
                        continue 'scan;
                    }
                }
            }
            i += 1;
        }
        (spans, stats)
    }
}

/// Links with the default 4-word window.
pub fn link_entities<S: AsRef<str>>(words: &[S], dict: &EntityDictionary) -> Vec<MentionSpan> {
    Linker::default().link(words, dict)
}
