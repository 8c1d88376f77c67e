//! Runs the three-mode desk experiment and prints per-seed cloze P@1.
//!
//! `cargo run --release --example desk -- [full|small] [seeds]`; `small`
//! shrinks the world, model and step count for a quick directional look.

use std::collections::BTreeMap;
use std::time::Instant;

use kalm::experiment::{run_seed, DeskSetup, Verdict};
use kalm::model::{ModelConfig, ModelMode};
use kalm::pretraining::TrainConfig;

fn small() -> DeskSetup {
    DeskSetup {
        n_entities: 300,
        n_triples: 3000,
        n_sentences: 30_000,
        model: ModelConfig { layers: 2, d_model: 64, heads: 4, d_entity: 32, vocab_size: 1024, context_length: 64, ..ModelConfig::default() },
        train: TrainConfig {
            max_steps: 1500,
            warmup_steps: 150,
            total_decay_steps: 1500,
            max_lr: 2e-3,
            min_lr: 1e-4,
            batch_sequences: 16,
            seq_length: 64,
            hard_neighbors: 20,
            neighbor_refresh: 250,
            ..TrainConfig::default()
        },
        ..DeskSetup::default()
    }
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let setup = match args.first().map(String::as_str) {
        Some("small") => small(),
        _ => DeskSetup::default(),
    };
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let mut runs = Vec::new();
    for seed in 1..=seeds {
        let started = Instant::now();
        let reports = run_seed(seed, &setup, |mode, row| {
            if row.step % 250 == 0 {
                eprintln!("seed {seed} {mode} step {} loss_w {:.4} loss_e {:.4}", row.step, row.loss_w, row.loss_e);
            }
        })
        .expect("experiment failed");
        let mut scores = BTreeMap::new();
        for (mode, r) in &reports {
            println!(
                "seed {seed}\t{mode}\tp@1 {:.4}\tevaluated {}\tfiltered {}",
                r.micro().unwrap_or(0.0),
                r.overall.evaluated,
                r.filtered
            );
            scores.insert(*mode, r.micro().unwrap_or(0.0));
        }
        println!("seed {seed} took {:.0}s", started.elapsed().as_secs_f64());
        runs.push(scores);
    }
    let v = Verdict::from_runs(&runs);
    let mean = |m| v.mean[&m];
    println!(
        "wins {}/{}\tmean baseline {:.4}\tinput-only {:.4}\tfull-kalm {:.4}\tpasses {}",
        v.wins,
        v.seeds,
        mean(ModelMode::Baseline),
        mean(ModelMode::InputOnly),
        mean(ModelMode::FullKalm),
        v.passes()
    );
}
