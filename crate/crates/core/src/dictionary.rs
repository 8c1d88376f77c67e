//! Frequency-based surface-form dictionary.
//!
//! Each retained surface (a 1..4 word n-gram) maps to exactly one entity: the
//! one it was most often linked to in the source annotations. Entity id 0 is
//! the null entity and never appears in a dictionary.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use thiserror::Error;

/// Entity id reserved for "no entity".
pub const NULL_ENTITY: u32 = 0;

/// Longest surface form, in space-delimited words.
pub const MAX_SURFACE_WORDS: usize = 4;

const HEADER_TAG: &str = "#kalm-dict";
const FORMAT_VERSION: &str = "v1";
const CRC_TAG: &str = "#crc32 ";

/// Characters removed by the punctuation-stripped variant.
pub const STRIPPED_PUNCTUATION: &[char] = &['.', ',', '\'', '"', '!', '?', ';', ':', '(', ')', '-'];

#[derive(Debug, Error)]
pub enum DictionaryError {
    #[error("record {index}: {reason}")]
    MalformedRecord { index: usize, reason: String },
    #[error("record {index}: surface {surface:?} has {words} words (max {MAX_SURFACE_WORDS})")]
    SurfaceTooLong { index: usize, surface: String, words: usize },
    #[error("unsupported dictionary format version {0:?}")]
    Version(String),
    #[error("dictionary checksum mismatch")]
    Checksum,
    #[error("malformed dictionary file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One raw annotation record: `surface` was linked to `entity` `frequency` times.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SurfaceEntry {
    pub surface: String,
    pub entity: u32,
    pub frequency: u64,
}

impl SurfaceEntry {
    pub fn new(surface: impl Into<String>, entity: u32, frequency: u64) -> Self {
        Self { surface: surface.into(), entity, frequency }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Thresholds {
    pub min_surface_freq: u64,
    pub min_entity_links: u64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { min_surface_freq: 1000, min_entity_links: 100 }
    }
}

/// Immutable surface → (entity, frequency) map.
///
/// Equality compares entries, thresholds and entity count. Raw per-entity link
/// totals are build-time metadata: a dictionary read back from disk carries the
/// totals of its retained entries instead.
#[derive(Debug, Clone)]
pub struct EntityDictionary {
    entries: HashMap<String, (u32, u64)>,
    entity_link_counts: BTreeMap<u32, u64>,
    thresholds: Thresholds,
    entity_count: usize,
}

impl PartialEq for EntityDictionary {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
            && self.thresholds == other.thresholds
            && self.entity_count == other.entity_count
    }
}

fn word_count(surface: &str) -> usize {
    surface.split(' ').filter(|w| !w.is_empty()).count()
}

impl EntityDictionary {
    /// Builds a dictionary from raw records.
    ///
    /// Entities whose total link count is below `min_entity_links` are dropped
    /// first; then each surface keeps its most frequent remaining entity
    /// (smaller id on ties) if that frequency reaches `min_surface_freq`.
    pub fn build<I>(records: I, thresholds: Thresholds) -> Result<Self, DictionaryError>
    where
        I: IntoIterator<Item = SurfaceEntry>,
    {
        let mut per_surface: HashMap<String, BTreeMap<u32, u64>> = HashMap::new();
        let mut links: BTreeMap<u32, u64> = BTreeMap::new();
        for (index, rec) in records.into_iter().enumerate() {
            if rec.surface.trim().is_empty() {
                return Err(DictionaryError::MalformedRecord { index, reason: "empty surface".into() });
            }
            if rec.entity == NULL_ENTITY {
                return Err(DictionaryError::MalformedRecord {
                    index,
                    reason: "entity id 0 is reserved for null".into(),
                });
            }
            let words = word_count(&rec.surface);
            if words > MAX_SURFACE_WORDS {
                return Err(DictionaryError::SurfaceTooLong { index, surface: rec.surface, words });
            }
            *links.entry(rec.entity).or_default() += rec.frequency;
            *per_surface.entry(rec.surface).or_default().entry(rec.entity).or_default() += rec.frequency;
        }

        let mut entries = HashMap::new();
        for (surface, candidates) in per_surface {
            // BTreeMap iterates ascending ids, so strict `>` keeps the smaller id on ties.
            let mut best: Option<(u32, u64)> = None;
            for (&entity, &freq) in &candidates {
                if links[&entity] < thresholds.min_entity_links {
                    continue;
                }
                if best.is_none_or(|(_, f)| freq > f) {
                    best = Some((entity, freq));
                }
            }
            if let Some((entity, freq)) = best {
                if freq >= thresholds.min_surface_freq {
                    entries.insert(surface, (entity, freq));
                }
            }
        }

        let entity_link_counts: BTreeMap<u32, u64> =
            entries.values().map(|&(e, _)| (e, links[&e])).collect();
        let entity_count = entity_link_counts.len();
        Ok(Self { entries, entity_link_counts, thresholds, entity_count })
    }

    /// Parses raw 3-column TSV records (`surface<TAB>entity<TAB>frequency`).
    pub fn parse_records<R: BufRead>(reader: R) -> Result<Vec<SurfaceEntry>, DictionaryError> {
        let mut out = Vec::new();
        for (index, line) in reader.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            out.push(parse_record_line(&line, index)?);
        }
        Ok(out)
    }

    pub fn lookup(&self, surface: &str) -> Option<(u32, u64)> {
        self.entries.get(surface).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entity_count(&self) -> usize {
        self.entity_count
    }

    /// Largest entity id referenced by any entry (0 when empty).
    pub fn max_entity_id(&self) -> u32 {
        self.entries.values().map(|&(e, _)| e).max().unwrap_or(NULL_ENTITY)
    }

    pub fn thresholds(&self) -> Thresholds {
        self.thresholds
    }

    pub fn entity_link_counts(&self) -> &BTreeMap<u32, u64> {
        &self.entity_link_counts
    }

    /// Entries sorted by surface.
    pub fn sorted_entries(&self) -> Vec<(&str, u32, u64)> {
        let mut v: Vec<_> = self.entries.iter().map(|(s, &(e, f))| (s.as_str(), e, f)).collect();
        v.sort_unstable();
        v
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = format!(
            "{HEADER_TAG} {FORMAT_VERSION} {} {} {}\n",
            self.thresholds.min_surface_freq, self.thresholds.min_entity_links, self.entity_count
        );
        for (surface, entity, freq) in self.sorted_entries() {
            body.push_str(&format!("{surface}\t{entity}\t{freq}\n"));
        }
        let crc = crc32fast::hash(body.as_bytes());
        body.push_str(&format!("{CRC_TAG}{crc:08x}\n"));
        body.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DictionaryError> {
        let text = std::str::from_utf8(bytes).map_err(|_| DictionaryError::Format("not UTF-8".into()))?;
        let header_end = text.find('\n').ok_or(DictionaryError::Checksum)?;
        let header: Vec<&str> = text[..header_end].split(' ').collect();
        if header.first() != Some(&HEADER_TAG) {
            return Err(DictionaryError::Format("missing #kalm-dict header".into()));
        }
        match header.get(1) {
            Some(&FORMAT_VERSION) => {}
            Some(v) => return Err(DictionaryError::Version(v.to_string())),
            None => return Err(DictionaryError::Format("missing version".into())),
        }

        // The checksum line is the last line; anything else is truncation or corruption.
        let trimmed = text.strip_suffix('\n').ok_or(DictionaryError::Checksum)?;
        let crc_start = trimmed.rfind('\n').map(|i| i + 1).ok_or(DictionaryError::Checksum)?;
        let crc_line = &trimmed[crc_start..];
        let stored = crc_line
            .strip_prefix(CRC_TAG)
            .and_then(|h| u32::from_str_radix(h, 16).ok())
            .ok_or(DictionaryError::Checksum)?;
        let body = &text[..crc_start];
        if crc32fast::hash(body.as_bytes()) != stored {
            return Err(DictionaryError::Checksum);
        }

        let parse_num = |s: Option<&&str>, what: &str| -> Result<u64, DictionaryError> {
            s.and_then(|v| v.parse().ok())
                .ok_or_else(|| DictionaryError::Format(format!("bad header field {what}")))
        };
        let thresholds = Thresholds {
            min_surface_freq: parse_num(header.get(2), "min_surface_freq")?,
            min_entity_links: parse_num(header.get(3), "min_entity_links")?,
        };
        let entity_count = parse_num(header.get(4), "entity_count")? as usize;

        let mut entries = HashMap::new();
        let mut entity_link_counts: BTreeMap<u32, u64> = BTreeMap::new();
        for (index, line) in body[header_end + 1..].lines().enumerate() {
            let rec = parse_record_line(line, index)?;
            *entity_link_counts.entry(rec.entity).or_default() += rec.frequency;
            entries.insert(rec.surface, (rec.entity, rec.frequency));
        }
        if entity_link_counts.len() != entity_count {
            return Err(DictionaryError::Format(format!(
                "header declares {entity_count} entities, body has {}",
                entity_link_counts.len()
            )));
        }
        Ok(Self { entries, entity_link_counts, thresholds, entity_count })
    }

    pub fn save(&self, path: &Path) -> Result<(), DictionaryError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DictionaryError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Reads raw records from a TSV file.
    pub fn read_records(path: &Path) -> Result<Vec<SurfaceEntry>, DictionaryError> {
        Self::parse_records(BufReader::new(fs::File::open(path)?))
    }
}

fn parse_record_line(line: &str, index: usize) -> Result<SurfaceEntry, DictionaryError> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 {
        return Err(DictionaryError::MalformedRecord {
            index,
            reason: format!("expected 3 tab-separated fields, found {}", fields.len()),
        });
    }
    let entity: u32 = fields[1].parse().map_err(|_| DictionaryError::MalformedRecord {
        index,
        reason: format!("entity id {:?} is not an integer", fields[1]),
    })?;
    let frequency: u64 = fields[2].parse().map_err(|_| DictionaryError::MalformedRecord {
        index,
        reason: format!("frequency {:?} is not a non-negative integer", fields[2]),
    })?;
    let surface = fields[0].to_string();
    let words = word_count(&surface);
    if words > MAX_SURFACE_WORDS {
        return Err(DictionaryError::SurfaceTooLong { index, surface, words });
    }
    Ok(SurfaceEntry { surface, entity, frequency })
}

fn capital_case(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars.flat_map(char::to_lowercase)).collect(),
        None => String::new(),
    }
}

/// Candidate surface strings for a window of words, in lookup priority order:
/// original, lowercase, capital case, uppercase, punctuation-stripped lowercase.
/// Duplicates and empty strings are dropped.
pub fn variant_forms<S: AsRef<str>>(window: &[S]) -> Vec<String> {
    let original = window.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ");
    let lower = original.to_lowercase();
    let capital = window.iter().map(|w| capital_case(w.as_ref())).collect::<Vec<_>>().join(" ");
    let upper = original.to_uppercase();
    let stripped = window
        .iter()
        .map(|w| w.as_ref().chars().filter(|c| !STRIPPED_PUNCTUATION.contains(c)).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();

    let mut out: Vec<String> = Vec::with_capacity(5);
    for v in [original, lower, capital, upper, stripped] {
        if !v.is_empty() && !out.contains(&v) {
            out.push(v);
        }
    }
    out
}
