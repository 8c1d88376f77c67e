use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};

use anyhow::Context;

use crate::dictionary::{EntityDictionary, Thresholds};
use crate::evaluation::{
    cloze_p_at_1, last_word_accuracy, load_cloze, load_probe, load_qa, perplexity, probe_features, write_probe_tsv,
    write_report, zero_shot_qa, EvalError, ProbeConfig, ProbePoint, ProbeSplit, RelationScore,
};
use crate::kv::KvMap;
use crate::model::{KalmModel, ModelConfig};
use crate::pretraining::{config_hash, config_text, Checkpoint, TrainConfig, TrainError, Trainer, METRIC_HEADER};
use crate::synthetic::{generate_kb, shape_census};
use crate::tokenizer::{read_corpus, write_corpus, DuetTokenizer, SubwordVocab};

use super::{path, CliError, Command, Run};

pub(super) fn dispatch(cmd: &Command, run: &mut Run) -> Result<(), CliError> {
    match cmd {
        Command::GenWorld { .. } => gen_world(run),
        Command::BuildDict { .. } => build_dict(run),
        Command::TrainVocab { .. } => train_vocab(run),
        Command::Tokenize { .. } => tokenize(run),
        Command::Train { .. } => train(run),
        Command::EvalLm { .. } => eval_lm(run),
        Command::EvalLambada { .. } => eval_lambada(run),
        Command::EvalCloze { .. } => eval_cloze(run),
        Command::EvalQa { .. } => eval_qa(run),
        Command::Probe { .. } => probe(run),
        Command::InspectCheckpoint { .. } => inspect(run),
    }
}

fn read_text(p: &str) -> anyhow::Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {p}"))
}

fn gen_world(run: &mut Run) -> Result<(), CliError> {
    let kb = generate_kb(run.seed()?, run.get("entities")?, run.get("relations")?, run.get("triples")?)
        .context("generating knowledge base")?;
    let split = kb.split(run.get("holdout")?).map_err(|e| CliError::Usage(e.to_string()))?;
    let corpus = kb.render_corpus(&split, run.get("sentences")?, run.get("alias-noise")?);
    run.write("kb.json", serde_json::to_string(&kb).context("serializing KB")? + "\n")?;
    run.write("corpus.txt", &corpus)?;
    let mut records = String::new();
    for r in kb.render_dictionary() {
        let _ = writeln!(records, "{}\t{}\t{}", r.surface, r.entity, r.frequency);
    }
    run.write("dict-records.tsv", records)?;
    let mut cloze = Vec::new();
    crate::evaluation::write_jsonl(&mut cloze, &kb.render_cloze(&split)).context("writing cloze")?;
    run.write("cloze.jsonl", cloze)?;
    let mut qa = Vec::new();
    crate::evaluation::write_jsonl(&mut qa, &kb.render_qa(&split)).context("writing QA")?;
    run.write("qa.jsonl", qa)?;
    let census: Vec<String> = shape_census(&kb).iter().map(|(s, n)| format!("{s:?}={n}")).collect();
    println!(
        "entities {} triples {} (train {}, held out {}) relation shapes {}",
        kb.entities.len(),
        kb.triples.len(),
        split.train.len(),
        split.heldout.len(),
        census.join(" ")
    );
    Ok(())
}

fn build_dict(run: &mut Run) -> Result<(), CliError> {
    let records_path = run.need("records")?;
    let records = EntityDictionary::read_records(path(&records_path)).with_context(|| format!("reading {records_path}"))?;
    let thresholds = Thresholds { min_surface_freq: run.get("min-surface-freq")?, min_entity_links: run.get("min-entity-links")? };
    let dict = EntityDictionary::build(records, thresholds).context("building dictionary")?;
    run.write("dict.kdict", dict.to_bytes())?;
    println!("{} surfaces for {} entities", dict.len(), dict.entity_count());
    Ok(())
}

fn lines_with_newline(text: &str) -> Vec<String> {
    text.lines().map(|l| format!("{l}\n")).collect()
}

fn train_vocab(run: &mut Run) -> Result<(), CliError> {
    let text = read_text(&run.need("corpus")?)?;
    let vocab = SubwordVocab::train(lines_with_newline(&text), run.get("vocab-size")?).context("training vocabulary")?;
    run.write("vocab.txt", vocab.to_text())?;
    println!("{} subwords", vocab.len());
    Ok(())
}

fn load_tokenizer(run: &Run) -> Result<DuetTokenizer, CliError> {
    let (v, d) = (run.need("vocab")?, run.need("dict")?);
    let vocab = SubwordVocab::load(path(&v)).with_context(|| format!("loading {v}"))?;
    let dict = EntityDictionary::load(path(&d)).with_context(|| format!("loading {d}"))?;
    Ok(DuetTokenizer::new(vocab, dict))
}

fn tokenize(run: &mut Run) -> Result<(), CliError> {
    let text = read_text(&run.need("corpus")?)?;
    let tok = load_tokenizer(run)?;
    let records: Vec<_> = lines_with_newline(&text).iter().map(|l| tok.tokenize(l)).collect();
    let p = run.output("corpus.kduet");
    let f = fs::File::create(&p).with_context(|| format!("creating {}", p.display()))?;
    write_corpus(BufWriter::new(f), &records).context("writing corpus")?;
    let tokens: usize = records.iter().map(|r| r.len()).sum();
    let linked: usize = records.iter().flat_map(|r| &r.entity_ids).filter(|&&e| e != 0).count();
    println!("{} records, {tokens} tokens, {linked} linked", records.len());
    Ok(())
}

fn train(run: &mut Run) -> Result<(), CliError> {
    let tok = load_tokenizer(run)?;
    let data = run.need("data")?;
    let corpus = read_corpus(fs::File::open(&data).with_context(|| format!("opening {data}"))?)
        .with_context(|| format!("reading {data}"))?;
    let mut trainer = match run.kv.get_str("resume").map(str::to_string) {
        Some(ck_path) => {
            let mut ck = Checkpoint::load(path(&ck_path)).with_context(|| format!("loading {ck_path}"))?;
            ck.train_config.max_steps = run.get("max-steps")?;
            // the manifest records the configuration actually used
            let used = KvMap::parse(&config_text(&ck.model_config, &ck.train_config)).context("checkpoint config")?;
            run.kv.0.extend(used.0);
            Trainer::from_checkpoint(ck, &corpus).context("resuming")?
        }
        None => {
            if run.kv.get_str("vocab-size").is_none() {
                run.kv.set("vocab-size", tok.vocab.len());
            }
            if run.kv.get_str("entity-vocab-size").is_none() {
                run.kv.set("entity-vocab-size", tok.dict.max_entity_id() + 1);
            }
            let mc = ModelConfig::from_kv(&run.kv)?;
            mc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let tc = TrainConfig::from_kv(&run.kv)?;
            tc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let model = KalmModel::new(mc, tc.seed).context("initializing model")?;
            Trainer::new(model, tc, &corpus).context("preparing training")?
        }
    };
    let mc = &trainer.model.config;
    let bad_word = corpus.iter().flat_map(|d| &d.word_ids).find(|&&w| w as usize >= mc.vocab_size);
    let bad_entity = corpus.iter().flat_map(|d| &d.entity_ids).find(|&&e| e as usize >= mc.entity_vocab_size);
    if let Some(w) = bad_word {
        return Err(anyhow::anyhow!("corpus word id {w} outside vocab-size {}", mc.vocab_size).into());
    }
    if let Some(e) = bad_entity {
        return Err(anyhow::anyhow!("corpus entity id {e} outside entity-vocab-size {}", mc.entity_vocab_size).into());
    }
    let counts = trainer.model.param_counts();
    println!("{} network + {} embedding parameters", counts.network, counts.embedding);

    let metrics_path = run.output("metrics.tsv");
    let mut log = BufWriter::new(fs::File::create(&metrics_path).context("creating metrics log")?);
    writeln!(log, "{METRIC_HEADER}").map_err(anyhow::Error::from)?;
    for r in &trainer.metrics {
        writeln!(log, "{}", r.tsv()).map_err(anyhow::Error::from)?;
    }
    let ck_dir = run.out.join("checkpoints");
    fs::create_dir_all(&ck_dir).context("creating checkpoint directory")?;
    let every = trainer.config.checkpoint_every;
    let report_every = (trainer.config.max_steps / 20).max(1);
    let mut saved = Vec::new();
    let outcome = trainer.run(|t, row| {
        writeln!(log, "{}", row.tsv())?;
        log.flush()?;
        if t.step % every == 0 {
            let p = ck_dir.join(format!("step-{:06}.kalmck", t.step));
            t.checkpoint().save(&p)?;
            saved.push(p);
        }
        if t.step % report_every == 0 {
            println!("step {} lr {:.3e} loss_w {:.4} loss_e {:.4}", row.step, row.lr, row.loss_w, row.loss_e);
        }
        Ok(())
    });
    run.outputs.extend(saved);
    if let Err(e) = outcome {
        if let Some(dump) = e.batch_dump() {
            let TrainError::NonFinite { step, .. } = &e else { unreachable!() };
            let p = run.write(&format!("nonfinite-step{step}.txt"), dump)?;
            eprintln!("batch written to {}", p.display());
        }
        return Err(anyhow::Error::from(e).context("training").into());
    }
    let final_path = run.output("final.kalmck");
    trainer.checkpoint().save(&final_path).context("saving final checkpoint")?;
    println!("checkpoint {}", final_path.display());
    Ok(())
}

fn load_checkpoint(p: &str) -> anyhow::Result<(Checkpoint, KalmModel)> {
    let ck = Checkpoint::load(path(p)).with_context(|| format!("loading {p}"))?;
    let model = ck.model().with_context(|| format!("rebuilding model from {p}"))?;
    Ok((ck, model))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("nan".to_string(), |x| format!("{x:.6}"))
}

fn report(run: &mut Run, name: &str, columns: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut buf = Vec::new();
    write_report(&mut buf, columns, rows).map_err(anyhow::Error::from)?;
    print!("{}", String::from_utf8_lossy(&buf));
    run.write(name, buf)?;
    Ok(())
}

fn eval_lm(run: &mut Run) -> Result<(), CliError> {
    let (_, model) = load_checkpoint(&run.need("checkpoint")?)?;
    let tok = load_tokenizer(run)?;
    let d = tok.tokenize(&read_text(&run.need("data")?)?);
    let ppl = perplexity(&model, &d.word_ids, &d.entity_ids).context("perplexity")?;
    report(run, "perplexity.tsv", &["metric", "value"], &[
        vec!["tokens".into(), d.len().to_string()],
        vec!["perplexity".into(), format!("{ppl:.6}")],
    ])
}

fn eval_lambada(run: &mut Run) -> Result<(), CliError> {
    let (_, model) = load_checkpoint(&run.need("checkpoint")?)?;
    let tok = load_tokenizer(run)?;
    let text = read_text(&run.need("data")?)?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (context, word) = line.trim().rsplit_once(char::is_whitespace).ok_or_else(|| {
            anyhow::Error::from(EvalError::Dataset { line: i + 1, reason: "needs a context and a final word".into() })
        })?;
        items.push((context.to_string(), word.to_string()));
    }
    let acc = last_word_accuracy(&model, &tok, &items).context("last-word accuracy")?;
    report(run, "lambada.tsv", &["metric", "value"], &[
        vec!["items".into(), items.len().to_string()],
        vec!["accuracy".into(), format!("{acc:.6}")],
    ])
}

fn eval_cloze(run: &mut Run) -> Result<(), CliError> {
    let (_, model) = load_checkpoint(&run.need("checkpoint")?)?;
    let tok = load_tokenizer(run)?;
    let data = run.need("data")?;
    let items = load_cloze(path(&data)).with_context(|| format!("reading {data}"))?;
    let r = cloze_p_at_1(&model, &tok, &items).context("cloze")?;
    let row = |name: &str, s: &RelationScore| vec![name.to_string(), s.evaluated.to_string(), s.hits.to_string(), fmt_opt(s.p_at_1())];
    let mut rows: Vec<Vec<String>> = r.per_relation.iter().map(|(k, s)| row(k, s)).collect();
    rows.push(row("micro", &r.overall));
    rows.push(vec!["macro".into(), "-".into(), "-".into(), fmt_opt(r.macro_avg())]);
    rows.push(vec!["filtered".into(), r.filtered.to_string(), "-".into(), "-".into()]);
    rows.push(vec!["total".into(), r.total.to_string(), "-".into(), "-".into()]);
    report(run, "cloze.tsv", &["relation", "evaluated", "hits", "p_at_1"], &rows)
}

fn eval_qa(run: &mut Run) -> Result<(), CliError> {
    let (_, model) = load_checkpoint(&run.need("checkpoint")?)?;
    let tok = load_tokenizer(run)?;
    let data = run.need("data")?;
    let items = load_qa(path(&data)).with_context(|| format!("reading {data}"))?;
    let limit: usize = run.get("max-answer-tokens")?;
    let r = zero_shot_qa(&model, &tok, &items, run.get("max-new-tokens")?, (limit > 0).then_some(limit)).context("QA")?;
    let mut lines = String::new();
    for rec in &r.records {
        let v = serde_json::json!({
            "question": rec.question, "generated": rec.generated, "extracted": rec.extracted,
            "em": rec.em, "cover_em": rec.cover_em,
        });
        lines.push_str(&v.to_string());
        lines.push('\n');
    }
    run.write("qa-records.jsonl", lines)?;
    report(run, "qa.tsv", &["metric", "value"], &[
        vec!["evaluated".into(), r.records.len().to_string()],
        vec!["skipped".into(), r.skipped.to_string()],
        vec!["em".into(), fmt_opt(r.em())],
        vec!["cover_em".into(), fmt_opt(r.cover_em())],
    ])
}

fn probe(run: &mut Run) -> Result<(), CliError> {
    let tok = load_tokenizer(run)?;
    let data = run.need("data")?;
    let records = load_probe(path(&data)).with_context(|| format!("reading {data}"))?;
    let cfg = ProbeConfig {
        learning_rate: run.get("probe-lr")?,
        epochs: run.get("probe-epochs")?,
        l2: run.get("probe-l2")?,
        train_fraction: run.get("train-fraction")?,
        seed: run.seed()?,
    };
    let split = ProbeSplit::new(&records, &cfg).context("probe split")?;
    let mut points = Vec::new();
    for p in run.need("checkpoints")?.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (ck, model) = load_checkpoint(p)?;
        let features = probe_features(&model, &tok, &records).with_context(|| format!("features from {p}"))?;
        points.push(ProbePoint { step: ck.step, micro_f1: split.evaluate(&features, &cfg) });
    }
    points.sort_by_key(|p| p.step);
    let mut buf = Vec::new();
    write_probe_tsv(&mut buf, &points).map_err(anyhow::Error::from)?;
    print!("{}", String::from_utf8_lossy(&buf));
    run.write("probe.tsv", buf)?;
    Ok(())
}

fn inspect(run: &mut Run) -> Result<(), CliError> {
    let (ck, model) = load_checkpoint(&run.need("checkpoint")?)?;
    let counts = model.param_counts();
    let mut s = String::new();
    let _ = writeln!(s, "step\t{}", ck.step);
    let _ = writeln!(s, "config_hash\t{:08x}", config_hash(&ck.model_config, &ck.train_config));
    let _ = writeln!(s, "checksum\t{:08x}", model.checksum());
    let _ = writeln!(s, "network_params\t{}", counts.network);
    let _ = writeln!(s, "embedding_params\t{}", counts.embedding);
    let _ = writeln!(s, "neighbor_lists\t{}", ck.neighbors.lists.len());
    if let Some(m) = ck.metrics.last() {
        let _ = writeln!(s, "last_metrics\t{}", m.tsv());
    }
    s.push_str("\n[config]\n");
    s.push_str(&config_text(&ck.model_config, &ck.train_config));
    s.push_str("\n[tensors]\n");
    for (name, t) in &model.params {
        let _ = writeln!(s, "{name}\t{:?}", t.shape());
    }
    print!("{s}");
    run.write("inspect.txt", s)?;
    Ok(())
}
