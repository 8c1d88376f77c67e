//! Acceptance suite: one line per criterion. Criterion 7 (the multi-hour
//! desk experiment) runs only when `KALM_DESK_EXPERIMENT=1`.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Instant;

use kalm::autodiff::Tensor;
use kalm::dictionary::{EntityDictionary, SurfaceEntry, Thresholds};
use kalm::evaluation::{
    build_qa_prompt, cloze_p_at_1, perplexity, probe_features, zero_shot_qa, ClozeItem, ProbeConfig, ProbeRecord,
    ProbeSplit, QaItem, QA_TEMPLATE,
};
use kalm::experiment::{run_seed, DeskSetup, Verdict};
use kalm::model::{Batch, KalmModel, LanguageModel, ModelConfig, ModelError, ModelMode};
use kalm::pretraining::{
    kalm_loss, lr_schedule, sample_negative, Checkpoint, EntityTarget, LossInputs, NegativeBranch, NegativeMixture,
    NeighborTable, TrainConfig, Trainer,
};
use kalm::tokenizer::{link_entities, DuetSequence, DuetTokenizer, SubwordVocab};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    NotRun(String),
}

type Check = fn() -> Outcome;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

// ---------------------------------------------------------------- 1

const LEXICON: [&str; 16] = [
    "new", "york", "city", "paris", "U.S.", "the", "bank", "of", "america", "hall", "o'neil", "river", "nile", "st.",
    "louis", "(band)",
];

fn mangle(w: &str, rng: &mut ChaCha8Rng) -> String {
    let w = match rng.random_range(0..4) {
        0 => w.to_uppercase(),
        1 => {
            let mut c = w.chars();
            c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
        }
        _ => w.to_string(),
    };
    match rng.random_range(0..6) {
        0 => format!("{w}."),
        1 => format!("{w},"),
        _ => w,
    }
}

fn reference_variants(window: &[&str]) -> Vec<String> {
    let joined = window.join(" ");
    let capital: Vec<String> = window
        .iter()
        .map(|w| {
            let lower = w.to_lowercase();
            let mut c = lower.chars();
            c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
        })
        .collect();
    let stripped: Vec<String> = window
        .iter()
        .map(|w| w.chars().filter(|c| !".,'\"!?;:()-".contains(*c)).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect();
    let mut out: Vec<String> = Vec::new();
    for v in [joined.clone(), joined.to_lowercase(), capital.join(" "), joined.to_uppercase(), stripped.join(" ").to_lowercase()] {
        if !v.is_empty() && !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

/// Enumerates every window at every position; emits the first hit.
fn reference_link(words: &[&str], table: &HashMap<String, u32>) -> Vec<(usize, usize, u32, String)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let mut hit = None;
        for size in [4, 3, 2, 1] {
            if i + size > words.len() || hit.is_some() {
                continue;
            }
            for v in reference_variants(&words[i..i + size]) {
                if let Some(&e) = table.get(&v) {
                    hit = Some((i, i + size, e, v));
                    break;
                }
            }
        }
        match hit {
            Some(h) => {
                i = h.1;
                out.push(h);
            }
            None => i += 1,
        }
    }
    out
}

fn tokenizer_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut matches = 0;
    for _ in 0..1000 {
        let mut records = Vec::new();
        for _ in 0..rng.random_range(1..=200) {
            let n = rng.random_range(1..=4);
            let surface: Vec<String> = (0..n).map(|_| mangle(LEXICON.choose(&mut rng).unwrap(), &mut rng)).collect();
            records.push(SurfaceEntry::new(surface.join(" "), rng.random_range(1..40), rng.random_range(1..5)));
        }
        // most frequent entity per surface, smaller id on ties
        let mut counts: HashMap<String, BTreeMap<u32, u64>> = HashMap::new();
        for r in &records {
            *counts.entry(r.surface.clone()).or_default().entry(r.entity).or_default() += r.frequency;
        }
        let table: HashMap<String, u32> = counts
            .into_iter()
            .map(|(s, m)| {
                let best = m.iter().fold((0, 0), |b, (&e, &f)| if f > b.1 { (e, f) } else { b });
                (s, best.0)
            })
            .collect();
        let dict = EntityDictionary::build(records, Thresholds { min_surface_freq: 1, min_entity_links: 1 }).unwrap();
        let words: Vec<String> = (0..rng.random_range(0..=100)).map(|_| mangle(LEXICON.choose(&mut rng).unwrap(), &mut rng)).collect();
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        let got: Vec<(usize, usize, u32, String)> =
            link_entities(&refs, &dict).into_iter().map(|m| (m.start_word, m.end_word, m.entity, m.surface)).collect();
        if got == reference_link(&refs, &table) {
            matches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(matches == 1000 && secs < 10.0, format!("{matches}/1000 pairs match the brute-force reference in {secs:.2}s"))
}

// ---------------------------------------------------------------- 2

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let config = ModelConfig {
        mode: ModelMode::FullKalm,
        layers: 2,
        d_model: 16,
        heads: 2,
        d_entity: 8,
        vocab_size: 64,
        entity_vocab_size: 16,
        context_length: 6,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let mut model = KalmModel::new(config, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // break the exact zeros of the initialization so every path carries gradient
    for t in model.params.values_mut() {
        Arc::make_mut(t).data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.05..0.05));
    }
    let (bs, seq) = (2, 6);
    let words: Vec<u32> = (0..bs * seq).map(|_| rng.random_range(0..64)).collect();
    let entities: Vec<u32> = (0..bs * seq).map(|i| if i % 3 == 0 { rng.random_range(1..16) } else { 0 }).collect();
    let inputs = LossInputs {
        batch: Batch { words: words.clone(), entities, batch: bs, seq },
        word_targets: words.iter().map(|w| (w * 7 + 3) % 64).collect(),
        entity_targets: vec![
            EntityTarget { position: 0, positive: 3, negative: 9 },
            EntityTarget { position: 4, positive: 11, negative: 0 },
            EntityTarget { position: 7, positive: 5, negative: 2 },
            EntityTarget { position: 10, positive: 14, negative: 6 },
        ],
    };
    let loss = |m: &KalmModel| kalm_loss(m, &inputs, None).unwrap().2.total;
    let (mut fp, var, _) = kalm_loss(&model, &inputs, None).unwrap();
    fp.graph.backward(var).unwrap();
    let analytic: HashMap<usize, Vec<f64>> = fp.param_grads().into_iter().map(|(i, g)| (i, g.to_vec())).collect();
    drop(fp);

    let h = 1e-5;
    let names: Vec<String> = model.params.keys().cloned().collect();
    let mut worst = (0.0f64, String::new());
    let mut zero = 0;
    for (idx, name) in names.iter().enumerate() {
        let n = model.params[idx].numel();
        let mut numeric = vec![0.0; n];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = model.params[idx].data()[k];
            Arc::make_mut(&mut model.params[idx]).data_mut()[k] = orig + h;
            let up = loss(&model);
            Arc::make_mut(&mut model.params[idx]).data_mut()[k] = orig - h;
            let down = loss(&model);
            Arc::make_mut(&mut model.params[idx]).data_mut()[k] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let a = analytic.get(&idx).cloned().unwrap_or_else(|| vec![0.0; n]);
        let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(numeric.iter().map(|x| x * x).sum::<f64>().sqrt());
        // key biases have an identically zero gradient (softmax ignores a
        // shift shared by all keys); the floor keeps 0/0 from reading as 1
        let rel = diff / norm.max(1e-8);
        if norm < 1e-12 {
            zero += 1;
        }
        if rel >= worst.0 {
            worst = (rel, name.clone());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst.0 <= 1e-4 && secs < 60.0,
        format!(
            "{} tensors ({zero} with zero gradient), worst relative error {:.2e} ({}) in {secs:.1}s",
            names.len(),
            worst.0,
            worst.1
        ),
    )
}

// ---------------------------------------------------------------- 3

fn small_config(mode: ModelMode) -> ModelConfig {
    ModelConfig {
        mode,
        layers: 2,
        d_model: 16,
        heads: 2,
        d_entity: 8,
        vocab_size: 64,
        entity_vocab_size: 16,
        context_length: 16,
        dropout: 0.1,
        ..ModelConfig::default()
    }
}

fn small_train(seed: u64, steps: u64) -> TrainConfig {
    TrainConfig {
        seed,
        max_steps: steps,
        warmup_steps: 10,
        max_lr: 1e-2,
        min_lr: 1e-3,
        total_decay_steps: 500,
        batch_sequences: 4,
        seq_length: 8,
        hard_neighbors: 4,
        neighbor_refresh: 13,
        ..TrainConfig::default()
    }
}

fn small_corpus(linked: bool) -> Vec<DuetSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    (0..30)
        .map(|_| {
            let words: Vec<u32> = (0..16).map(|_| rng.random_range(0..64)).collect();
            let entity_ids = words.iter().map(|&w| if linked && w % 4 == 0 { 1 + w % 15 } else { 0 }).collect();
            DuetSequence { word_ids: words, entity_ids, word_starts: Vec::new() }
        })
        .collect()
}

fn loss_curve(mode: ModelMode, corpus: &[DuetSequence], steps: u64) -> Vec<f64> {
    let mut t = Trainer::new(KalmModel::new(small_config(mode), 4).unwrap(), small_train(9, steps), corpus).unwrap();
    t.run(|_, _| Ok(())).unwrap();
    t.metrics.iter().map(|m| m.loss_w).collect()
}

fn reductions() -> Outcome {
    // (a) zeroed entity table, no entity loss
    let base = KalmModel::new(small_config(ModelMode::Baseline), 2).unwrap();
    let mut full = KalmModel::new(ModelConfig { entity_loss_weight: 0.0, ..small_config(ModelMode::FullKalm) }, 2).unwrap();
    Arc::make_mut(full.params.get_mut("entity.table").unwrap()).data_mut().fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let words: Vec<u32> = (0..16).map(|_| rng.random_range(0..64)).collect();
    let ents: Vec<u32> = (0..16).map(|_| rng.random_range(0..16)).collect();
    let a = full.infer(&words, &ents).unwrap().0;
    let b = base.infer(&words, &[0; 16]).unwrap().0;
    let logit_gap = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);

    // (b) all-null entity channel over 50 steps
    let nulls = small_corpus(false);
    let reference = loss_curve(ModelMode::Baseline, &nulls, 50);
    let mut curve_gap = 0.0f64;
    for mode in [ModelMode::InputOnly, ModelMode::FullKalm] {
        let c = loss_curve(mode, &nulls, 50);
        curve_gap = c.iter().zip(&reference).map(|(x, y)| (x - y).abs()).fold(curve_gap, f64::max);
    }
    verdict(
        logit_gap <= 1e-12 && curve_gap <= 1e-12 && reference.len() == 50,
        format!("logit gap {logit_gap:.1e}, 50-step loss curve gap {curve_gap:.1e}"),
    )
}

// ---------------------------------------------------------------- 4

fn schedule() -> Outcome {
    let c = TrainConfig::default();
    let (w, t) = (c.warmup_steps, c.total_decay_steps);
    let at_w = lr_schedule(w, &c);
    let at_t = lr_schedule(t, &c);
    let jump_w = (lr_schedule(w - 1, &c) - at_w).abs().max((lr_schedule(w + 1, &c) - at_w).abs());
    let jump_t = (lr_schedule(t - 1, &c) - at_t).abs().max((lr_schedule(t + 1, &c) - at_t).abs());
    // one warmup step moves the rate by max_lr / warmup; anything larger is a jump
    let step_size = c.max_lr / w as f64;
    let ok = (at_w - 1.5e-4).abs() <= 1e-12 && (at_t - 1e-5).abs() <= 1e-12 && jump_w <= step_size && jump_t <= 1e-12;
    verdict(ok, format!("lr({w})={at_w:e}, lr({t})={at_t:e}, adjacent steps differ by {jump_w:.1e} and {jump_t:.1e}"))
}

// ---------------------------------------------------------------- 5

fn negative_mixture() -> Outcome {
    let e = 50usize;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let table = NeighborTable { lists: (0..e as u32).map(|i| vec![1 + (i % 49), 1 + ((i + 7) % 49)]).collect(), step: 0 };
    let mix = NegativeMixture { null: 0.01, random: 0.49, hard: 0.50 };
    let mut counts = [0usize; 3];
    for _ in 0..100_000 {
        let pos = rng.random_range(1..e as u32);
        match sample_negative(pos, &table, e, &mix, &mut rng).1 {
            NegativeBranch::Null => counts[0] += 1,
            NegativeBranch::Random => counts[1] += 1,
            NegativeBranch::Hard | NegativeBranch::HardFallback => counts[2] += 1,
        }
    }
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / 100_000.0).collect();
    let within = freq.iter().zip([0.01, 0.49, 0.50]).all(|(f, n)| (f - n).abs() <= 0.01);
    // collisions are most likely with a tiny vocabulary and self-including lists
    let tiny = NeighborTable { lists: vec![vec![], vec![1, 2], vec![2, 1]], step: 0 };
    let mut collisions = 0;
    for i in 0..1_000_000u32 {
        let pos = 1 + i % 2;
        if sample_negative(pos, &tiny, 3, &mix, &mut rng).0 == pos {
            collisions += 1;
        }
    }
    verdict(
        within && collisions == 0,
        format!("branch frequencies {:.4}/{:.4}/{:.4}, {collisions} positive collisions in 10^6 draws", freq[0], freq[1], freq[2]),
    )
}

// ---------------------------------------------------------------- 6

fn untrained_sanity() -> Outcome {
    let v = 256;
    let config = ModelConfig { vocab_size: v, context_length: 32, ..small_config(ModelMode::FullKalm) };
    let model = KalmModel::new(config.clone(), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let words: Vec<u32> = (0..640).map(|_| rng.random_range(0..v as u32)).collect();
    let ppl = perplexity(&model, &words, &vec![0; words.len()]).unwrap();
    let corpus: Vec<DuetSequence> = (0..10)
        .map(|_| DuetSequence::words_only((0..64).map(|_| rng.random_range(0..v as u32)).collect()))
        .collect();
    let mut t = Trainer::new(KalmModel::new(config, 6).unwrap(), TrainConfig { seq_length: 32, ..small_train(2, 1) }, &corpus).unwrap();
    let loss0 = t.train_step().unwrap().loss_w;
    let ln_v = (v as f64).ln();
    verdict(
        (ppl / v as f64 - 1.0).abs() <= 0.05 && (loss0 / ln_v - 1.0).abs() <= 0.05,
        format!("perplexity {ppl:.1} vs V={v}, step-0 word loss {loss0:.4} vs ln V={ln_v:.4}"),
    )
}

// ---------------------------------------------------------------- 7

fn desk_experiment() -> Outcome {
    if std::env::var("KALM_DESK_EXPERIMENT").as_deref() != Ok("1") {
        return Outcome::NotRun(
            "15 training runs of 5,000 steps at 64x128 tokens; set KALM_DESK_EXPERIMENT=1 to run".into(),
        );
    }
    let setup = DeskSetup::default();
    let mut runs = Vec::new();
    for seed in 1..=5u64 {
        let reports = match run_seed(seed, &setup, |mode, row| {
            if row.step % 500 == 0 {
                eprintln!("seed {seed} {mode} step {} loss_w {:.4}", row.step, row.loss_w);
            }
        }) {
            Ok(r) => r,
            Err(e) => return Outcome::Fail(format!("seed {seed}: {e}")),
        };
        let scores: BTreeMap<ModelMode, f64> = reports.iter().map(|(m, r)| (*m, r.micro().unwrap_or(0.0))).collect();
        eprintln!("seed {seed}: {scores:?}");
        runs.push(scores);
    }
    let v = Verdict::from_runs(&runs);
    verdict(v.passes(), format!("full-kalm beats baseline on {}/{} seeds, means {:?}", v.wins, v.seeds, v.mean))
}

// ---------------------------------------------------------------- 8

/// Answers each test question with a fixed string, one byte per step.
struct Scripted {
    replies: HashMap<String, String>,
}

impl LanguageModel for Scripted {
    fn vocab_size(&self) -> usize {
        256
    }
    fn context_length(&self) -> usize {
        4096
    }
    fn uses_entities(&self) -> bool {
        false
    }
    fn word_logits(&self, words: &[u32], _: &[u32]) -> Result<Tensor, ModelError> {
        let text: String = words.iter().map(|&b| b as u8 as char).collect();
        let q_start = text.rfind("question: ").unwrap() + "question: ".len();
        let question = &text[q_start..text[q_start..].find(" \n").map(|i| q_start + i).unwrap()];
        let cue = text.rfind("answer:").unwrap() + "answer:".len();
        let so_far = text.len() - cue;
        let reply = self.replies[question].as_bytes();
        let next = reply.get(so_far).copied().unwrap_or(b'\n');
        let mut logits = Tensor::zeros(&[words.len(), 256]);
        logits.data_mut()[(words.len() - 1) * 256 + next as usize] = 1.0;
        Ok(logits)
    }
}

fn qa_harness() -> Outcome {
    let golden = include_str!("golden/qa_prompt.txt");
    let prompt_ok = build_qa_prompt("who wrote hamlet?", &QA_TEMPLATE) == golden;
    let cases: [(&str, &[&str], &str); 10] = [
        ("capital of france?", &["Paris"], " paris"),
        ("where is the white house?", &["Washington, DC, USA"], " washington, dc, usa"),
        ("city of light?", &["paris"], " the answer is paris france"),
        ("port city?", &["Lyon", "Marseille"], " MARSEILLE"),
        ("year of election?", &["1928"], " 1929"),
        ("president in 1928?", &["Herbert Hoover"], " hoover"),
        ("liquid element?", &["bromine"], " bromine, mercury"),
        ("wheels on a semi?", &["18"], " 18 wheels"),
        ("plant pigment?", &["chlorophyll"], ""),
        ("fast highway?", &["Autobahn"], " autobahn "),
    ];
    let model = Scripted { replies: cases.iter().map(|(q, _, r)| (q.to_string(), r.to_string())).collect() };
    let items: Vec<QaItem> =
        cases.iter().map(|(q, a, _)| QaItem { question: q.to_string(), answers: a.iter().map(|s| s.to_string()).collect() }).collect();
    let tok = DuetTokenizer::new(SubwordVocab::bytes_only(), EntityDictionary::build(Vec::new(), Thresholds::default()).unwrap());
    let report = zero_shot_qa(&model, &tok, &items, 40, None).unwrap();
    let (em, cover) = (report.em().unwrap(), report.cover_em().unwrap());
    // hand-scored: exact on items 1, 2, 4, 10; containment adds 3, 7, 8
    let scored_ok = (em - 40.0).abs() < 1e-9 && (cover - 70.0).abs() < 1e-9;
    let per_item_ok = report.records.iter().all(|r| !r.em || r.cover_em);
    let mut sets_ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let subset: Vec<QaItem> = items.iter().filter(|_| rng.random_bool(0.5)).cloned().collect();
        if let Ok(r) = zero_shot_qa(&model, &tok, &subset, 40, None) {
            sets_ok &= r.cover_em().unwrap_or(0.0) >= r.em().unwrap_or(0.0);
        }
    }
    verdict(
        prompt_ok && scored_ok && per_item_ok && sets_ok,
        format!("golden prompt {}, EM {em:.0}% (hand 40%), cover-EM {cover:.0}% (hand 70%)", if prompt_ok { "byte-equal" } else { "DIFFERS" }),
    )
}

// ---------------------------------------------------------------- 9

fn cloze_filter() -> Outcome {
    let mut tokens: Vec<Vec<u8>> = (0u8..=255).map(|b| vec![b]).collect();
    for t in [" Paris", " Rome", " Oslo", " Lima", " Kyiv", " Bern"] {
        tokens.push(t.as_bytes().to_vec());
    }
    let vocab = SubwordVocab::from_tokens(tokens).unwrap();
    let v = vocab.len();
    let tok = DuetTokenizer::new(vocab, EntityDictionary::build(Vec::new(), Thresholds::default()).unwrap());
    let answers = ["Paris", "Rome", "Oslo", "Lima", "Kyiv", "Bern", "Reykjavik", "Ulaanbaatar", "Canberra", "Quito"];
    let items: Vec<ClozeItem> = answers
        .iter()
        .enumerate()
        .map(|(i, a)| ClozeItem {
            statement: "The capital is [MASK].".into(),
            answer: a.to_string(),
            relation: if i % 2 == 0 { "even" } else { "odd" }.into(),
        })
        .collect();
    let model = KalmModel::new(ModelConfig { vocab_size: v, context_length: 32, ..small_config(ModelMode::Baseline) }, 1).unwrap();
    let r = cloze_p_at_1(&model, &tok, &items).unwrap();
    verdict(
        r.overall.evaluated == 6 && r.filtered == 4 && r.total == 10,
        format!("denominator {}, filtered {}, total {}", r.overall.evaluated, r.filtered, r.total),
    )
}

// ---------------------------------------------------------------- 10

fn resume_determinism() -> Outcome {
    let data = small_corpus(true);
    let (split, after) = (20u64, 100u64);
    let new_trainer = |steps| {
        Trainer::new(KalmModel::new(small_config(ModelMode::FullKalm), 7).unwrap(), small_train(3, steps), &data).unwrap()
    };
    let mut straight = new_trainer(split + after);
    straight.run(|_, _| Ok(())).unwrap();

    let mut first = new_trainer(split);
    first.run(|_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.kalmck");
    first.checkpoint().save(&path).unwrap();
    drop(first);
    let mut ck = Checkpoint::load(&path).unwrap();
    ck.train_config.max_steps = split + after;
    let mut resumed = Trainer::from_checkpoint(ck, &data).unwrap();
    resumed.run(|_, _| Ok(())).unwrap();

    let bits = |t: &Trainer| t.metrics[split as usize..].iter().map(|m| (m.loss_w.to_bits(), m.loss_e.to_bits())).collect::<Vec<_>>();
    let same = bits(&straight) == bits(&resumed) && bits(&resumed).len() == after as usize;
    let weights_same = straight.model.checksum() == resumed.model.checksum();
    verdict(same && weights_same, format!("{after} steps after resuming at step {split}: bit-identical losses {same}, weights {weights_same}"))
}

// ---------------------------------------------------------------- 11

const PREFIXES: [&str; 3] = ["the", "one small", "we saw a"];
const NOUNS: [(&str, &str); 6] =
    [("cat", "animal"), ("dog", "animal"), ("oak", "plant"), ("fern", "plant"), ("rock", "mineral"), ("quartz", "mineral")];

fn probe_records(n: usize, rng: &mut ChaCha8Rng) -> Vec<ProbeRecord> {
    (0..n)
        .map(|_| {
            let prefix = *PREFIXES.choose(rng).unwrap();
            let (noun, label) = *NOUNS.choose(rng).unwrap();
            let k = prefix.split_whitespace().count();
            ProbeRecord { text: format!("{prefix} {noun} is here"), spans: vec![(k, k + 1)], label: label.into() }
        })
        .collect()
}

fn probe_harness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tok = DuetTokenizer::new(SubwordVocab::bytes_only(), EntityDictionary::build(Vec::new(), Thresholds::default()).unwrap());
    let config = ModelConfig { vocab_size: 256, context_length: 32, ..small_config(ModelMode::FullKalm) };
    let model = KalmModel::new(config.clone(), 5).unwrap();
    let before = model.checksum();
    let cfg = ProbeConfig::default();
    let records = probe_records(300, &mut rng);
    let features = probe_features(&model, &tok, &records).unwrap();
    let split = ProbeSplit::new(&records, &cfg).unwrap();
    let separable = split.evaluate(&features, &cfg);

    // label-shuffled copies: expected accuracy 1/K
    let repeats = 10;
    let mut shuffled_sum = 0.0;
    for r in 0..repeats {
        let mut labels: Vec<String> = records.iter().map(|x| x.label.clone()).collect();
        rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(100 + r));
        let shuffled: Vec<ProbeRecord> =
            records.iter().zip(labels).map(|(x, l)| ProbeRecord { label: l, ..x.clone() }).collect();
        let s = ProbeSplit::new(&shuffled, &cfg).unwrap();
        shuffled_sum += s.evaluate(&features, &cfg);
    }
    let mean = shuffled_sum / repeats as f64;
    let p = 1.0 / 3.0;
    let sd = (p * (1.0 - p) / (split.test.len() * repeats as usize) as f64).sqrt();
    let unchanged = model.checksum() == before;

    // F1 against step for checkpoints every 1,000 steps, through the CLI
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus: Vec<DuetSequence> = records.iter().map(|r| tok.tokenize(&format!("{}\n", r.text))).collect();
    let mut trainer =
        Trainer::new(model, TrainConfig { seq_length: 16, batch_sequences: 2, ..small_train(1, 3000) }, &corpus).unwrap();
    let mut paths = Vec::new();
    trainer
        .run(|t, _| {
            if t.step % 1000 == 0 {
                let p = d.join(format!("step-{}.kalmck", t.step));
                t.checkpoint().save(&p)?;
                paths.push(p.to_str().unwrap().to_string());
            }
            Ok(())
        })
        .unwrap();
    std::fs::write(d.join("vocab.txt"), tok.vocab.to_text()).unwrap();
    std::fs::write(d.join("dict.kdict"), tok.dict.to_bytes()).unwrap();
    let mut jsonl = Vec::new();
    kalm::evaluation::write_jsonl(&mut jsonl, &records).unwrap();
    std::fs::write(d.join("probe.jsonl"), jsonl).unwrap();
    let ds = d.to_str().unwrap();
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_kalm"))
        .args(["probe", "--out", ds, "--checkpoints", &paths.join(","), "--vocab", &format!("{ds}/vocab.txt")])
        .args(["--dict", &format!("{ds}/dict.kdict"), "--data", &format!("{ds}/probe.jsonl")])
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false);
    let tsv = std::fs::read_to_string(d.join("probe.tsv")).unwrap_or_default();
    let steps: Vec<&str> = tsv.lines().skip(2).filter_map(|l| l.split('\t').next()).collect();
    let tsv_ok = status && steps == ["1000", "2000", "3000"];

    verdict(
        separable == 1.0 && (mean - p).abs() <= 3.0 * sd && unchanged && tsv_ok,
        format!(
            "separable F1 {separable:.3}, shuffled mean F1 {mean:.3} vs {p:.3} (3 sd = {:.3}), checksum unchanged {unchanged}, TSV steps {steps:?}",
            3.0 * sd
        ),
    )
}

fn main() {
    let checks: [(&str, Check); 11] = [
        ("tokenizer oracle equivalence", tokenizer_oracle),
        ("gradient fidelity", gradient_fidelity),
        ("reduction identities", reductions),
        ("schedule exactness", schedule),
        ("negative-mixture frequencies", negative_mixture),
        ("untrained-model sanity", untrained_sanity),
        ("desk-scale KALM vs baseline", desk_experiment),
        ("zero-shot QA harness", qa_harness),
        ("cloze filter", cloze_filter),
        ("checkpoint determinism", resume_determinism),
        ("probe harness", probe_harness),
    ];
    let (mut passed, mut failed, mut not_run) = (0, 0, 0);
    for (i, (name, check)) in checks.iter().enumerate() {
        let (tag, detail) = match check() {
            Outcome::Pass(d) => {
                passed += 1;
                ("PASS", d)
            }
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::NotRun(d) => {
                not_run += 1;
                ("NOT RUN", d)
            }
        };
        println!("[{tag}] {:>2}. {name}: {detail}", i + 1);
    }
    println!("acceptance: {passed} passed, {failed} failed, {not_run} not run");
    if failed > 0 {
        std::process::exit(1);
    }
}
