//! Deterministic toy world: a knowledge base of pronounceable entities,
//! templated relations, a corpus rendered from training facts, a surface-form
//! dictionary, and held-out cloze and QA sets.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dictionary::SurfaceEntry;
use crate::evaluation::{ClozeItem, QaItem, BLANK};

#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("infeasible world: {0}")]
    Infeasible(String),
    #[error("holdout fraction must be in (0, 1), got {0}")]
    Holdout(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RelationShape {
    #[serde(rename = "1-1")]
    OneToOne,
    #[serde(rename = "N-1")]
    ManyToOne,
    #[serde(rename = "N-M")]
    ManyToMany,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldEntity {
    /// Entity id; ids start at 1 because 0 is the null entity.
    pub id: u32,
    /// Canonical name followed by further aliases.
    pub aliases: Vec<String>,
}

impl WorldEntity {
    pub fn name(&self) -> &str {
        &self.aliases[0]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldRelation {
    pub name: String,
    pub shape: RelationShape,
    /// Sentence with `{h}` and a final `{t}`.
    pub template: String,
    /// Question about the tail with `{h}`.
    pub question: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub head: u32,
    pub relation: usize,
    pub tail: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticKb {
    pub seed: u64,
    pub entities: Vec<WorldEntity>,
    pub relations: Vec<WorldRelation>,
    pub triples: Vec<Triple>,
}

const RELATIONS: [(&str, &str, &str); 12] = [
    ("located_in", "{h} is located in {t}.", "where is {h} located?"),
    ("born_in", "{h} was born in {t}.", "where was {h} born?"),
    ("works_for", "{h} works for {t}.", "who does {h} work for?"),
    ("member_of", "{h} is a member of {t}.", "what is {h} a member of?"),
    ("married_to", "{h} is married to {t}.", "who is {h} married to?"),
    ("founded_by", "{h} was founded by {t}.", "who founded {h}?"),
    ("language", "{h} speaks the language of {t}.", "what language does {h} speak?"),
    ("capital_of", "{h} is the capital of {t}.", "what is {h} the capital of?"),
    ("plays_for", "{h} plays for {t}.", "who does {h} play for?"),
    ("named_after", "{h} is named after {t}.", "who is {h} named after?"),
    ("borders", "{h} shares a border with {t}.", "what does {h} share a border with?"),
    ("written_by", "{h} was written by {t}.", "who wrote {h}?"),
];

const ONSETS: [&str; 21] =
    ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kr", "tr", "st", "sh", "th"];
const VOWELS: [&str; 8] = ["a", "e", "i", "o", "u", "ai", "ei", "ou"];
const CODAS: [&str; 7] = ["", "", "n", "r", "l", "s", "m"];

/// Tail groups per N-1 relation: members of a group share their tails, so a
/// held-out N-1 fact can be inferred from the head's other N-1 facts.
const GROUP_SIZE: usize = 20;

fn syllable_word(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(2..=3);
    let mut w = String::new();
    for _ in 0..n {
        w.push_str(ONSETS.choose(rng).unwrap());
        w.push_str(VOWELS.choose(rng).unwrap());
        w.push_str(CODAS.choose(rng).unwrap());
    }
    let mut c = w.chars();
    let first = c.next().unwrap().to_ascii_uppercase();
    std::iter::once(first).chain(c).collect()
}

fn template_words() -> HashSet<String> {
    RELATIONS
        .iter()
        .flat_map(|(_, t, q)| t.split_whitespace().chain(q.split_whitespace()).map(str::to_string).collect::<Vec<_>>())
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .collect()
}

/// Builds a KB as a pure function of its arguments. Relation shapes cycle
/// 1-1, N-1, N-M; triples are spread evenly, with what 1-1 and N-1 relations
/// cannot hold moved to the N-M relations.
pub fn generate_kb(seed: u64, n_entities: usize, n_relations: usize, n_triples: usize) -> Result<SyntheticKb, WorldError> {
    if n_entities < 2 {
        return Err(WorldError::Infeasible("need at least two entities".into()));
    }
    if n_relations == 0 || n_relations > RELATIONS.len() {
        return Err(WorldError::Infeasible(format!("between 1 and {} relations supported", RELATIONS.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reserved = template_words();
    let mut used: HashSet<String> = HashSet::new();
    let mut fresh = |rng: &mut ChaCha8Rng| loop {
        let w = syllable_word(rng);
        let key = w.to_lowercase();
        if !reserved.contains(&key) && used.insert(key) {
            return w;
        }
    };
    let entities: Vec<WorldEntity> = (1..=n_entities as u32)
        .map(|id| {
            let n_alias = rng.random_range(1..=3);
            let mut aliases = vec![fresh(&mut rng)];
            for _ in 1..n_alias {
                let alias = if rng.random_bool(0.5) {
                    format!("{} {}", fresh(&mut rng), fresh(&mut rng))
                } else {
                    fresh(&mut rng)
                };
                aliases.push(alias);
            }
            WorldEntity { id, aliases }
        })
        .collect();
    let shapes = [RelationShape::OneToOne, RelationShape::ManyToOne, RelationShape::ManyToMany];
    let relations: Vec<WorldRelation> = (0..n_relations)
        .map(|r| WorldRelation {
            name: RELATIONS[r].0.to_string(),
            shape: shapes[r % 3],
            template: RELATIONS[r].1.to_string(),
            question: RELATIONS[r].2.to_string(),
        })
        .collect();

    let n = n_entities;
    let groups = (n / GROUP_SIZE).max(2);
    let group_of: Vec<usize> = (0..n).map(|_| rng.random_range(0..groups)).collect();
    let capacity = |shape: RelationShape| match shape {
        RelationShape::OneToOne | RelationShape::ManyToOne => n - 1,
        RelationShape::ManyToMany => n * (n - 1),
    };
    let mut quota: Vec<usize> = (0..n_relations).map(|r| n_triples / n_relations + usize::from(r < n_triples % n_relations)).collect();
    let mut overflow = 0;
    for (r, q) in quota.iter_mut().enumerate() {
        let cap = capacity(relations[r].shape);
        if *q > cap {
            overflow += *q - cap;
            *q = cap;
        }
    }
    for (r, q) in quota.iter_mut().enumerate() {
        if relations[r].shape == RelationShape::ManyToMany && overflow > 0 {
            let add = overflow.min(capacity(RelationShape::ManyToMany) - *q);
            *q += add;
            overflow -= add;
        }
    }
    if overflow > 0 {
        return Err(WorldError::Infeasible(format!("{n_triples} triples do not fit {n_entities} entities")));
    }

    let mut triples = Vec::with_capacity(n_triples);
    for (r, &q) in quota.iter().enumerate() {
        let mut heads: Vec<usize> = (0..n).collect();
        heads.shuffle(&mut rng);
        match relations[r].shape {
            RelationShape::OneToOne => {
                // a random cyclic shift of a shuffled order: heads and tails
                // distinct, nobody maps to itself
                let shift = rng.random_range(1..n);
                for i in 0..q {
                    let (h, t) = (heads[i], heads[(i + shift) % n]);
                    triples.push(Triple { head: h as u32 + 1, relation: r, tail: t as u32 + 1 });
                }
            }
            RelationShape::ManyToOne => {
                let hubs: Vec<usize> = (0..groups).map(|_| rng.random_range(0..n)).collect();
                let mut placed = 0;
                for &h in &heads {
                    if placed == q {
                        break;
                    }
                    let mut t = hubs[group_of[h]];
                    if t == h {
                        t = (h + 1) % n;
                    }
                    triples.push(Triple { head: h as u32 + 1, relation: r, tail: t as u32 + 1 });
                    placed += 1;
                }
            }
            RelationShape::ManyToMany => {
                let mut seen = HashSet::new();
                let mut placed = 0;
                let mut cursor = 0;
                while placed < q {
                    let h = heads[cursor % n];
                    cursor += 1;
                    let fanout = rng.random_range(2..=4).min(q - placed);
                    for _ in 0..fanout {
                        let t = loop {
                            let t = rng.random_range(0..n);
                            if t != h && !seen.contains(&(h, t)) {
                                break t;
                            }
                            if seen.iter().filter(|&&(sh, _)| sh == h).count() >= n - 1 {
                                break usize::MAX;
                            }
                        };
                        if t == usize::MAX {
                            break;
                        }
                        seen.insert((h, t));
                        triples.push(Triple { head: h as u32 + 1, relation: r, tail: t as u32 + 1 });
                        placed += 1;
                    }
                }
            }
        }
    }
    Ok(SyntheticKb { seed, entities, relations, triples })
}

/// Observed shape of each relation's triples: N-M when some head has several
/// tails, N-1 when some tail has several heads, 1-1 otherwise.
pub fn observed_shape(kb: &SyntheticKb, relation: usize) -> Option<RelationShape> {
    let mut out_deg: HashMap<u32, usize> = HashMap::new();
    let mut in_deg: HashMap<u32, usize> = HashMap::new();
    for t in kb.triples.iter().filter(|t| t.relation == relation) {
        *out_deg.entry(t.head).or_default() += 1;
        *in_deg.entry(t.tail).or_default() += 1;
    }
    if out_deg.is_empty() {
        return None;
    }
    Some(if out_deg.values().any(|&d| d > 1) {
        RelationShape::ManyToMany
    } else if in_deg.values().any(|&d| d > 1) {
        RelationShape::ManyToOne
    } else {
        RelationShape::OneToOne
    })
}

/// Number of relations per observed shape.
pub fn shape_census(kb: &SyntheticKb) -> BTreeMap<RelationShape, usize> {
    let mut m = BTreeMap::new();
    for r in 0..kb.relations.len() {
        if let Some(s) = observed_shape(kb, r) {
            *m.entry(s).or_default() += 1;
        }
    }
    m
}

/// Training and held-out triple indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorldSplit {
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
}

impl SyntheticKb {
    fn entity(&self, id: u32) -> &WorldEntity {
        &self.entities[id as usize - 1]
    }

    pub fn entity_vocab_size(&self) -> usize {
        self.entities.len() + 1
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(stream);
        r
    }

    pub fn split(&self, holdout_fraction: f64) -> Result<WorldSplit, WorldError> {
        if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
            return Err(WorldError::Holdout(holdout_fraction));
        }
        let mut idx: Vec<usize> = (0..self.triples.len()).collect();
        idx.shuffle(&mut self.rng(1));
        let cut = (self.triples.len() as f64 * holdout_fraction).round() as usize;
        let mut heldout = idx[..cut].to_vec();
        let mut train = idx[cut..].to_vec();
        heldout.sort_unstable();
        train.sort_unstable();
        Ok(WorldSplit { train, heldout })
    }

    pub fn sentence(&self, t: &Triple, head_alias: &str, tail_alias: &str) -> String {
        self.relations[t.relation].template.replace("{h}", head_alias).replace("{t}", tail_alias)
    }

    /// `n_sentences` lines, each a training fact with aliases chosen
    /// uniformly with probability `alias_noise` and canonical otherwise.
    pub fn render_corpus(&self, split: &WorldSplit, n_sentences: usize, alias_noise: f64) -> String {
        let mut rng = self.rng(2);
        let mut out = String::new();
        if split.train.is_empty() {
            return out;
        }
        let pick = |e: &WorldEntity, rng: &mut ChaCha8Rng| -> String {
            if rng.random_bool(alias_noise.clamp(0.0, 1.0)) {
                e.aliases.choose(rng).unwrap().clone()
            } else {
                e.name().to_string()
            }
        };
        for _ in 0..n_sentences {
            let t = &self.triples[*split.train.choose(&mut rng).unwrap()];
            let h = pick(self.entity(t.head), &mut rng);
            let tl = pick(self.entity(t.tail), &mut rng);
            out.push_str(&self.sentence(t, &h, &tl));
            out.push('\n');
        }
        out
    }

    /// Every alias, lowercased, mapped to its entity with frequencies well
    /// above the default dictionary thresholds. Lowercase surfaces are what
    /// the linker's variants reach for both "Name" and a sentence-final
    /// "Name.".
    pub fn render_dictionary(&self) -> Vec<SurfaceEntry> {
        self.entities
            .iter()
            .flat_map(|e| {
                let k = e.aliases.len() as u64;
                e.aliases.iter().enumerate().map(move |(i, a)| SurfaceEntry::new(a.to_lowercase(), e.id, 1000 * (k - i as u64 + 1)))
            })
            .collect()
    }

    /// Held-out facts as cloze statements whose final word is the blank.
    pub fn render_cloze(&self, split: &WorldSplit) -> Vec<ClozeItem> {
        split
            .heldout
            .iter()
            .map(|&i| {
                let t = &self.triples[i];
                ClozeItem {
                    statement: self.sentence(t, self.entity(t.head).name(), BLANK),
                    answer: self.entity(t.tail).name().to_string(),
                    relation: self.relations[t.relation].name.clone(),
                }
            })
            .collect()
    }

    pub fn render_qa(&self, split: &WorldSplit) -> Vec<QaItem> {
        split
            .heldout
            .iter()
            .map(|&i| {
                let t = &self.triples[i];
                QaItem {
                    question: self.relations[t.relation].question.replace("{h}", self.entity(t.head).name()),
                    answers: self.entity(t.tail).aliases.clone(),
                }
            })
            .collect()
    }

    /// Held-out renderings (any alias pair) that occur as a corpus line.
    pub fn audit_holdout(&self, split: &WorldSplit, corpus: &str) -> Vec<String> {
        let lines: HashSet<&str> = corpus.lines().collect();
        let mut leaks = Vec::new();
        for &i in &split.heldout {
            let t = &self.triples[i];
            for h in &self.entity(t.head).aliases {
                for tl in &self.entity(t.tail).aliases {
                    let s = self.sentence(t, h, tl);
                    if lines.contains(s.as_str()) {
                        leaks.push(s);
                    }
                }
            }
        }
        leaks
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::{EntityDictionary, Thresholds};
    use crate::tokenizer::{DuetTokenizer, SubwordVocab};

    #[test]
    fn deterministic() {
        let a = generate_kb(3, 60, 6, 150).unwrap();
        let b = generate_kb(3, 60, 6, 150).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_ne!(a, generate_kb(4, 60, 6, 150).unwrap());
        let s = a.split(0.2).unwrap();
        assert_eq!(a.render_corpus(&s, 100, 1.0), b.render_corpus(&s, 100, 1.0));
    }

    #[test]
    fn triples_reference_entities_and_aliases_unique() {
        let kb = generate_kb(1, 100, 8, 400).unwrap();
        assert_eq!(kb.triples.len(), 400);
        let mut seen = HashSet::new();
        for e in &kb.entities {
            assert!((1..=3).contains(&e.aliases.len()));
            for a in &e.aliases {
                assert!(seen.insert(a.to_lowercase()), "alias {a} reused");
                assert!(a.split_whitespace().count() <= 4);
            }
        }
        for t in &kb.triples {
            assert!(t.head >= 1 && t.head as usize <= 100 && t.tail >= 1 && t.tail as usize <= 100);
            assert_ne!(t.head, t.tail);
        }
    }

    #[test]
    fn census_matches_requested_shapes() {
        let kb = generate_kb(9, 200, 8, 1600).unwrap();
        let census = shape_census(&kb);
        assert_eq!(census[&RelationShape::OneToOne], 3);
        assert_eq!(census[&RelationShape::ManyToOne], 3);
        assert_eq!(census[&RelationShape::ManyToMany], 2);
        for r in 0..8 {
            assert_eq!(observed_shape(&kb, r), Some(kb.relations[r].shape));
        }
    }

    #[test]
    fn overflow_moves_to_many_to_many() {
        let kb = generate_kb(2, 50, 3, 600).unwrap();
        let count = |r| kb.triples.iter().filter(|t| t.relation == r).count();
        assert_eq!((count(0), count(1), count(2)), (49, 49, 502));
        assert!(matches!(generate_kb(2, 3, 2, 100), Err(WorldError::Infeasible(_))));
        assert!(generate_kb(0, 1, 1, 0).is_err());
    }

    #[test]
    fn empty_world_and_split_errors() {
        let kb = generate_kb(5, 10, 2, 0).unwrap();
        assert!(kb.triples.is_empty());
        let s = kb.split(0.2).unwrap();
        assert_eq!(kb.render_corpus(&s, 10, 1.0), "");
        assert_eq!(kb.split(0.0), Err(WorldError::Holdout(0.0)));
        assert!(kb.split(1.0).is_err());
    }

    #[test]
    fn holdout_discipline_and_cloze_shape() {
        let kb = generate_kb(7, 80, 8, 300).unwrap();
        let split = kb.split(0.2).unwrap();
        assert_eq!(split.heldout.len(), 60);
        let corpus = kb.render_corpus(&split, 5000, 1.0);
        assert!(kb.audit_holdout(&split, &corpus).is_empty());
        // the audit does find a planted leak
        let t = &kb.triples[split.heldout[0]];
        let planted = format!("{corpus}{}\n", kb.sentence(t, kb.entity(t.head).name(), kb.entity(t.tail).name()));
        assert_eq!(kb.audit_holdout(&split, &planted).len(), 1);
        for item in kb.render_cloze(&split) {
            assert!(item.statement.ends_with(&format!("{BLANK}.")));
            let filled = item.statement.replace(BLANK, &item.answer);
            assert_eq!(filled.trim_end_matches('.').split_whitespace().last().unwrap(), item.answer);
        }
        assert_eq!(kb.render_qa(&split).len(), 60);
    }

    #[test]
    fn dictionary_keeps_every_alias() {
        let kb = generate_kb(8, 50, 4, 100).unwrap();
        let recs = kb.render_dictionary();
        let loose = EntityDictionary::build(recs.clone(), Thresholds { min_surface_freq: 1, min_entity_links: 1 }).unwrap();
        let strict = EntityDictionary::build(recs, Thresholds::default()).unwrap();
        for e in &kb.entities {
            for a in &e.aliases {
                assert_eq!(loose.lookup(&a.to_lowercase()).map(|x| x.0), Some(e.id));
                assert_eq!(strict.lookup(&a.to_lowercase()).map(|x| x.0), Some(e.id));
            }
        }
    }

    #[test]
    fn corpus_sentences_link_head_and_tail() {
        let kb = generate_kb(8, 50, 4, 100).unwrap();
        let dict = EntityDictionary::build(kb.render_dictionary(), Thresholds::default()).unwrap();
        let tok = DuetTokenizer::new(SubwordVocab::bytes_only(), dict);
        let split = kb.split(0.2).unwrap();
        for &i in split.train.iter().take(30) {
            let t = &kb.triples[i];
            let e = |id| kb.entity(id).aliases.last().unwrap().clone();
            let line = kb.sentence(t, &e(t.head), &e(t.tail));
            let linked: Vec<u32> = tok.mentions(&line).iter().map(|(m, _)| m.entity).collect();
            assert_eq!(linked, vec![t.head, t.tail], "{line}");
        }
    }
}
