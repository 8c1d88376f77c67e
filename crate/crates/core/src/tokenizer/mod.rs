//! Subword tokenization and the parallel entity channel.

mod corpus_file;
mod duet;
mod linker;
mod vocab;

pub use corpus_file::{read_corpus, write_corpus, CORPUS_MAGIC};
pub use duet::{word_ranges, DuetSequence, DuetTokenizer};
pub use linker::{link_entities, LinkStats, Linker, MentionSpan};
pub use vocab::SubwordVocab;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot train a vocabulary on an empty corpus")]
    EmptyCorpus,
    #[error("token id {id} out of range for vocabulary of {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("invalid vocabulary: {0}")]
    Vocab(String),
    #[error("invalid corpus file: {0}")]
    Corpus(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
