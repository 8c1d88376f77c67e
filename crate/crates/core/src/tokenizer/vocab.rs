//! Byte-level subword vocabulary.
//!
//! Training is ordinary byte-pair merging over whitespace-led chunks (a chunk
//! is a word together with the whitespace before it), so learned tokens look
//! like `" Paris"`. Encoding is greedy longest-match over the token set with
//! byte fallback, which makes every input encodable.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::TokenizerError;

const HEADER_TAG: &str = "#kalm-vocab";
const FORMAT_VERSION: &str = "v1";

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: Vec<(u8, u32)>,
    token: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct SubwordVocab {
    id_to_token: Vec<Vec<u8>>,
    token_to_id: HashMap<Vec<u8>, u32>,
    trie: Vec<TrieNode>,
}

impl PartialEq for SubwordVocab {
    fn eq(&self, other: &Self) -> bool {
        self.id_to_token == other.id_to_token
    }
}

/// Splits text into chunks that begin at a whitespace→non-whitespace boundary.
fn chunks(text: &str) -> impl Iterator<Item = &str> {
    let bytes = text.as_bytes();
    let mut start = 0;
    std::iter::from_fn(move || {
        if start >= bytes.len() {
            return None;
        }
        let mut i = start;
        // Leading whitespace belongs to the chunk.
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let chunk = &text[start..i];
        start = i;
        Some(chunk)
    })
}

impl SubwordVocab {
    /// The 256 single-byte tokens.
    pub fn bytes_only() -> Self {
        Self::from_tokens((0u8..=255).map(|b| vec![b]).collect()).expect("byte tokens are valid")
    }

    /// Builds a vocabulary from an explicit token list. The first 256 entries
    /// must be the single bytes in order.
    pub fn from_tokens(tokens: Vec<Vec<u8>>) -> Result<Self, TokenizerError> {
        if tokens.len() < 256 || tokens.iter().take(256).enumerate().any(|(i, t)| t.as_slice() != [i as u8]) {
            return Err(TokenizerError::Vocab("first 256 tokens must be the single bytes".into()));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        let mut trie = vec![TrieNode::default()];
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(TokenizerError::Vocab(format!("token {id} is empty")));
            }
            if token_to_id.insert(tok.clone(), id as u32).is_some() {
                return Err(TokenizerError::Vocab(format!("duplicate token {id}")));
            }
            let mut node = 0usize;
            for &b in tok {
                node = match trie[node].children.binary_search_by_key(&b, |&(c, _)| c) {
                    Ok(pos) => trie[node].children[pos].1 as usize,
                    Err(pos) => {
                        let next = trie.len() as u32;
                        trie.push(TrieNode::default());
                        trie[node].children.insert(pos, (b, next));
                        next as usize
                    }
                };
            }
            trie[node].token = Some(id as u32);
        }
        Ok(Self { id_to_token: tokens, token_to_id, trie })
    }

    /// Learns `target_size - 256` merges from the corpus. Pair counts are taken
    /// over distinct chunks weighted by frequency; ties go to the
    /// lexicographically smallest (left bytes, right bytes) pair.
    pub fn train<I, S>(corpus: I, target_size: usize) -> Result<Self, TokenizerError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if target_size < 256 {
            return Err(TokenizerError::Vocab(format!("target size {target_size} < 256")));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut any = false;
        for text in corpus {
            let text = text.as_ref();
            if !text.is_empty() {
                any = true;
            }
            for c in chunks(text) {
                *counts.entry(c.to_string()).or_default() += 1;
            }
        }
        if !any {
            return Err(TokenizerError::EmptyCorpus);
        }

        let mut tokens: Vec<Vec<u8>> = (0u8..=255).map(|b| vec![b]).collect();
        // Sorted for determinism independent of hash order.
        let mut words: Vec<(Vec<u32>, u64)> = {
            let mut v: Vec<_> = counts.into_iter().collect();
            v.sort_unstable();
            v.into_iter().map(|(w, c)| (w.bytes().map(u32::from).collect(), c)).collect()
        };

        while tokens.len() < target_size {
            let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
            for (w, c) in &words {
                for p in w.windows(2) {
                    *pair_counts.entry((p[0], p[1])).or_default() += c;
                }
            }
            let best = pair_counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&tokens[pa.0 as usize], &tokens[pa.1 as usize]);
                    let kb = (&tokens[pb.0 as usize], &tokens[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            });
            let Some(((left, right), _)) = best else { break };
            let mut merged = tokens[left as usize].clone();
            merged.extend_from_slice(&tokens[right as usize]);
            let new_id = tokens.len() as u32;
            if tokens.contains(&merged) {
                // Same byte string reachable through a different split; keep the
                // id space dense by reusing the existing token.
                let existing = tokens.iter().position(|t| *t == merged).unwrap() as u32;
                merge_in_place(&mut words, left, right, existing);
                continue;
            }
            tokens.push(merged);
            merge_in_place(&mut words, left, right, new_id);
        }
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    /// Document separator: the newline byte token.
    pub fn end_of_text(&self) -> u32 {
        u32::from(b'\n')
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.id_to_token.get(id as usize).map(Vec::as_slice)
    }

    pub fn token_id(&self, bytes: &[u8]) -> Option<u32> {
        self.token_to_id.get(bytes).copied()
    }

    /// Greedy longest-match encoding. Returns token ids with the byte offset
    /// where each token starts.
    pub fn encode_with_offsets(&self, text: &str) -> (Vec<u32>, Vec<usize>) {
        let bytes = text.as_bytes();
        let mut ids = Vec::with_capacity(bytes.len() / 3 + 1);
        let mut offsets = Vec::with_capacity(bytes.len() / 3 + 1);
        let mut pos = 0;
        while pos < bytes.len() {
            let mut node = 0usize;
            let mut best = (u32::from(bytes[pos]), 1usize);
            let mut i = pos;
            while i < bytes.len() {
                match self.trie[node].children.binary_search_by_key(&bytes[i], |&(c, _)| c) {
                    Ok(p) => node = self.trie[node].children[p].1 as usize,
                    Err(_) => break,
                }
                i += 1;
                if let Some(t) = self.trie[node].token {
                    best = (t, i - pos);
                }
            }
            ids.push(best.0);
            offsets.push(pos);
            pos += best.1;
        }
        (ids, offsets)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_with_offsets(text).0
    }

    /// Concatenated token bytes, decoded lossily as UTF-8.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::new();
        for &id in ids {
            let tok = self.token_bytes(id).ok_or(TokenizerError::IdOutOfRange { id, size: self.len() })?;
            out.extend_from_slice(tok);
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER_TAG} {FORMAT_VERSION} {}\n", self.len());
        for tok in &self.id_to_token {
            for b in tok {
                write!(s, "{b:02x}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or_default().split(' ').collect();
        if header.first() != Some(&HEADER_TAG) {
            return Err(TokenizerError::Vocab("missing #kalm-vocab header".into()));
        }
        if header.get(1) != Some(&FORMAT_VERSION) {
            return Err(TokenizerError::Vocab(format!("unsupported version {:?}", header.get(1))));
        }
        let size: usize = header
            .get(2)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TokenizerError::Vocab("bad size field".into()))?;
        let mut tokens = Vec::with_capacity(size);
        for (i, line) in lines.enumerate() {
            if line.len() % 2 != 0 || line.is_empty() {
                return Err(TokenizerError::Vocab(format!("token line {i} is not hex bytes")));
            }
            let tok = (0..line.len())
                .step_by(2)
                .map(|j| u8::from_str_radix(&line[j..j + 2], 16))
                .collect::<Result<Vec<u8>, _>>()
                .map_err(|_| TokenizerError::Vocab(format!("token line {i} is not hex bytes")))?;
            tokens.push(tok);
        }
        if tokens.len() != size {
            return Err(TokenizerError::Vocab(format!("header says {size} tokens, found {}", tokens.len())));
        }
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

fn merge_in_place(words: &mut [(Vec<u32>, u64)], left: u32, right: u32, new_id: u32) {
    for (w, _) in words.iter_mut() {
        if w.len() < 2 {
            continue;
        }
        let mut out = Vec::with_capacity(w.len());
        let mut i = 0;
        while i < w.len() {
            if i + 1 < w.len() && w[i] == left && w[i + 1] == right {
                out.push(new_id);
                i += 2;
            } else {
                out.push(w[i]);
                i += 1;
            }
        }
        *w = out;
    }
}
