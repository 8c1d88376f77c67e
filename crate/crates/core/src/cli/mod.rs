//! Command-line front end. Every flag has a config-file key of the same name;
//! values resolve as flag, then config file, then default.

mod commands;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::kv::{KvError, KvMap};
use crate::model::{MarginConvention, ModelConfig, ModelMode};
use crate::pretraining::TrainConfig;

pub const SEED_ENV: &str = "KALM_SEED";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl From<KvError> for CliError {
    fn from(e: KvError) -> Self {
        CliError::Usage(e.to_string())
    }
}

/// Declares a flag group: every field is optional so that an absent flag
/// falls through to the config file.
macro_rules! flag_group {
    ($name:ident { $( $(#[$m:meta])* $field:ident : $ty:ty = $key:literal ),* $(,)? }) => {
        #[derive(Debug, Clone, Default, Args)]
        pub struct $name {
            $( $(#[$m])* #[arg(long = $key)] pub $field: Option<$ty>, )*
        }

        impl $name {
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            fn provided(&self, out: &mut Vec<(&'static str, String)>) {
                $( if let Some(v) = &self.$field { out.push(($key, v.to_string())); } )*
            }
        }
    };
}

flag_group!(CommonFlags {
    /// Run directory for all outputs
    out: String = "out",
    /// Worker threads (0: one per core)
    threads: usize = "threads",
    /// Random seed (default from KALM_SEED, else 0)
    seed: u64 = "seed",
});

flag_group!(ModelFlags {
    /// baseline, input-only or full-kalm
    mode: ModelMode = "mode",
    layers: usize = "layers",
    d_model: usize = "d-model",
    heads: usize = "heads",
    d_entity: usize = "d-entity",
    /// Subword vocabulary size (train: defaults to the --vocab file)
    vocab_size: usize = "vocab-size",
    /// Entity ids including null (train: defaults to the --dict file)
    entity_vocab_size: usize = "entity-vocab-size",
    context_length: usize = "context-length",
    dropout: f64 = "dropout",
    /// Hinge margin of the entity loss
    margin: f64 = "margin",
    /// Weight of the entity loss
    entity_loss_weight: f64 = "entity-loss-weight",
    /// positive-above or literal
    margin_convention: MarginConvention = "margin-convention",
    tied_head: bool = "tied-head",
    ln_eps: f64 = "ln-eps",
});

flag_group!(TrainFlags {
    max_steps: u64 = "max-steps",
    warmup_steps: u64 = "warmup-steps",
    max_lr: f64 = "max-lr",
    min_lr: f64 = "min-lr",
    total_decay_steps: u64 = "total-decay-steps",
    batch_sequences: usize = "batch-sequences",
    seq_length: usize = "seq-length",
    weight_decay: f64 = "weight-decay",
    beta1: f64 = "beta1",
    beta2: f64 = "beta2",
    adam_eps: f64 = "adam-eps",
    entity_dropout: f64 = "entity-dropout",
    neg_null: f64 = "neg-null",
    neg_random: f64 = "neg-random",
    neg_hard: f64 = "neg-hard",
    hard_neighbors: usize = "hard-neighbors",
    /// Steps between hard-negative neighbor rebuilds
    neighbor_refresh: u64 = "neighbor-refresh",
    checkpoint_every: u64 = "checkpoint-every",
});

flag_group!(WorldFlags {
    entities: usize = "entities",
    relations: usize = "relations",
    triples: usize = "triples",
    sentences: usize = "sentences",
    /// Fraction of triples held out for cloze and QA
    holdout: f64 = "holdout",
    /// Probability of a uniformly chosen alias instead of the canonical name
    alias_noise: f64 = "alias-noise",
});

flag_group!(DictFlags {
    /// Raw surface<TAB>entity<TAB>frequency records
    records: String = "records",
    min_surface_freq: u64 = "min-surface-freq",
    min_entity_links: u64 = "min-entity-links",
});

flag_group!(VocabFlags {
    /// Text corpus, one record per line
    corpus: String = "corpus",
    vocab_size: usize = "vocab-size",
});

flag_group!(TokenizeFlags {
    corpus: String = "corpus",
    vocab: String = "vocab",
    dict: String = "dict",
});

flag_group!(TrainPaths {
    /// Tokenized corpus
    data: String = "data",
    vocab: String = "vocab",
    dict: String = "dict",
    /// Checkpoint to continue from; its configuration is used, except max-steps
    resume: String = "resume",
});

flag_group!(EvalFlags {
    checkpoint: String = "checkpoint",
    vocab: String = "vocab",
    dict: String = "dict",
    data: String = "data",
});

flag_group!(QaFlags {
    max_new_tokens: usize = "max-new-tokens",
    /// Skip questions whose answers all exceed this many words (0: keep all)
    max_answer_tokens: usize = "max-answer-tokens",
});

flag_group!(ProbeFlags {
    /// Comma-separated checkpoints
    checkpoints: String = "checkpoints",
    vocab: String = "vocab",
    dict: String = "dict",
    data: String = "data",
    probe_lr: f64 = "probe-lr",
    probe_epochs: usize = "probe-epochs",
    probe_l2: f64 = "probe-l2",
    train_fraction: f64 = "train-fraction",
});

flag_group!(InspectFlags {
    checkpoint: String = "checkpoint",
});

#[derive(Debug, Parser)]
#[command(name = "kalm", version, about = "Knowledge-aware language model pretraining at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct Base {
    /// key=value file; keys are flag names without dashes in front
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonFlags,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world: KB, corpus, dictionary records, cloze and QA sets
    GenWorld {
        #[command(flatten)]
        base: Base,
        #[command(flatten)]
        world: WorldFlags,
    },
    /// Build an entity dictionary from raw surface records
    BuildDict {
        #[command(flatten)]
        base: Base,
        #[command(flatten)]
        dict: DictFlags,
    },
    /// Learn a byte-level subword vocabulary
    TrainVocab {
        #[command(flatten)]
        base: Base,
        #[command(flatten)]
        vocab: VocabFlags,
    },
    /// Convert text into a duet corpus file
    Tokenize {
        #[command(flatten)]
        base: Base,
        #[command(flatten)]
        files: TokenizeFlags,
    },
    /// Pretrain a model
    Train {
        #[command(flatten)]
        base: Base,
        #[command(flatten)]
        paths: TrainPaths,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Perplexity on a text file
    EvalLm {
        #[command(flatten)]
        base: Base,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Last-word accuracy; each line's final word is the target
    EvalLambada {
        #[command(flatten)]
        base: Base,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Single-token cloze P@1
    EvalCloze {
        #[command(flatten)]
        base: Base,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Zero-shot QA with the fixed example prompt
    EvalQa {
        #[command(flatten)]
        base: Base,
        #[command(flatten)]
        eval: EvalFlags,
        #[command(flatten)]
        qa: QaFlags,
    },
    /// Linear span probe over one or more checkpoints
    Probe {
        #[command(flatten)]
        base: Base,
        #[command(flatten)]
        probe: ProbeFlags,
    },
    /// Summarize a checkpoint
    InspectCheckpoint {
        #[command(flatten)]
        base: Base,
        #[command(flatten)]
        inspect: InspectFlags,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenWorld { .. } => "gen-world",
            Command::BuildDict { .. } => "build-dict",
            Command::TrainVocab { .. } => "train-vocab",
            Command::Tokenize { .. } => "tokenize",
            Command::Train { .. } => "train",
            Command::EvalLm { .. } => "eval-lm",
            Command::EvalLambada { .. } => "eval-lambada",
            Command::EvalCloze { .. } => "eval-cloze",
            Command::EvalQa { .. } => "eval-qa",
            Command::Probe { .. } => "probe",
            Command::InspectCheckpoint { .. } => "inspect-checkpoint",
        }
    }

    fn base(&self) -> &Base {
        match self {
            Command::GenWorld { base, .. }
            | Command::BuildDict { base, .. }
            | Command::TrainVocab { base, .. }
            | Command::Tokenize { base, .. }
            | Command::Train { base, .. }
            | Command::EvalLm { base, .. }
            | Command::EvalLambada { base, .. }
            | Command::EvalCloze { base, .. }
            | Command::EvalQa { base, .. }
            | Command::Probe { base, .. }
            | Command::InspectCheckpoint { base, .. } => base,
        }
    }

    /// Defaults for every key the subcommand reads; keys without a default
    /// (input paths, mostly) are listed in `optional`.
    fn defaults(&self) -> (KvMap, &'static [&'static str]) {
        let mut kv = KvMap::new();
        kv.set("out", "out");
        kv.set("threads", 0);
        kv.set("seed", 0);
        let optional: &'static [&'static str] = match self {
            Command::GenWorld { .. } => {
                for (k, v) in [("entities", "2000"), ("relations", "8"), ("triples", "20000"), ("sentences", "200000")] {
                    kv.set(k, v);
                }
                kv.set("holdout", 0.2);
                kv.set("alias-noise", 1.0);
                &[]
            }
            Command::BuildDict { .. } => {
                kv.set("min-surface-freq", 1000);
                kv.set("min-entity-links", 100);
                &["records"]
            }
            Command::TrainVocab { .. } => {
                kv.set("vocab-size", 2048);
                &["corpus"]
            }
            Command::Tokenize { .. } => TokenizeFlags::KEYS,
            Command::Train { .. } => {
                let mut mk = KvMap::new();
                ModelConfig::default().to_kv(&mut mk);
                TrainConfig::default().to_kv(&mut mk);
                for (k, v) in mk.0 {
                    if k != "vocab-size" && k != "entity-vocab-size" && k != "seed" {
                        kv.0.insert(k, v);
                    }
                }
                &["data", "vocab", "dict", "resume", "vocab-size", "entity-vocab-size"]
            }
            Command::EvalLm { .. } | Command::EvalLambada { .. } | Command::EvalCloze { .. } => EvalFlags::KEYS,
            Command::EvalQa { .. } => {
                kv.set("max-new-tokens", 20);
                kv.set("max-answer-tokens", 0);
                EvalFlags::KEYS
            }
            Command::Probe { .. } => {
                let p = crate::evaluation::ProbeConfig::default();
                kv.set("probe-lr", p.learning_rate);
                kv.set("probe-epochs", p.epochs);
                kv.set("probe-l2", p.l2);
                kv.set("train-fraction", p.train_fraction);
                &["checkpoints", "vocab", "dict", "data"]
            }
            Command::InspectCheckpoint { .. } => InspectFlags::KEYS,
        };
        (kv, optional)
    }

    fn provided(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        self.base().common.provided(&mut v);
        match self {
            Command::GenWorld { world, .. } => world.provided(&mut v),
            Command::BuildDict { dict, .. } => dict.provided(&mut v),
            Command::TrainVocab { vocab, .. } => vocab.provided(&mut v),
            Command::Tokenize { files, .. } => files.provided(&mut v),
            Command::Train { paths, model, train, .. } => {
                paths.provided(&mut v);
                model.provided(&mut v);
                train.provided(&mut v);
            }
            Command::EvalLm { eval, .. } | Command::EvalLambada { eval, .. } | Command::EvalCloze { eval, .. } => {
                eval.provided(&mut v)
            }
            Command::EvalQa { eval, qa, .. } => {
                eval.provided(&mut v);
                qa.provided(&mut v);
            }
            Command::Probe { probe, .. } => probe.provided(&mut v),
            Command::InspectCheckpoint { inspect, .. } => inspect.provided(&mut v),
        }
        v
    }
}

/// Layers defaults, then the config file, then explicit flags. Config keys
/// the subcommand does not read are reported in the returned list.
pub fn resolve(
    defaults: KvMap,
    optional: &[&str],
    seed_env: Option<&str>,
    config: Option<&KvMap>,
    flags: &[(&str, String)],
) -> Result<(KvMap, Vec<String>), CliError> {
    let mut kv = defaults;
    if let Some(s) = seed_env {
        let seed: u64 = s.trim().parse().map_err(|_| CliError::Usage(format!("{SEED_ENV}={s:?} is not a seed")))?;
        kv.set("seed", seed);
    }
    let mut ignored = Vec::new();
    if let Some(cfg) = config {
        for (k, v) in &cfg.0 {
            if kv.0.contains_key(k) || optional.contains(&k.as_str()) {
                kv.0.insert(k.clone(), v.clone());
            } else {
                ignored.push(k.clone());
            }
        }
    }
    for (k, v) in flags {
        kv.set(k, v);
    }
    Ok((kv, ignored))
}

/// Everything needed to reproduce one invocation.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Resolved settings for one run plus the files it produced.
pub struct Run {
    pub kv: KvMap,
    pub out: PathBuf,
    pub outputs: Vec<PathBuf>,
}

impl Run {
    pub fn need(&self, key: &str) -> Result<String, CliError> {
        self.kv.get_str(key).map(str::to_string).ok_or_else(|| CliError::Usage(format!("missing --{key} (or {key}= in the config file)")))
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError> {
        Ok(self.kv.get(key)?)
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.get("seed")
    }

    /// Path inside the run directory, recorded as an output.
    pub fn output(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(p.clone());
        p
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> anyhow::Result<PathBuf> {
        let p = self.output(name);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&p, bytes)?;
        Ok(p)
    }
}

const INPUT_KEYS: &[&str] = &["records", "corpus", "vocab", "dict", "data", "resume", "checkpoint", "checkpoints"];

fn execute(cmd: &Command) -> Result<(), CliError> {
    let started = unix_now();
    let base = cmd.base();
    let config = match &base.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            Some(KvMap::parse(&text)?)
        }
        None => None,
    };
    let (defaults, optional) = cmd.defaults();
    let env_seed = std::env::var(SEED_ENV).ok();
    let (kv, ignored) = resolve(defaults, optional, env_seed.as_deref(), config.as_ref(), &cmd.provided())?;
    for k in ignored {
        eprintln!("warning: config key {k:?} is not used by {}", cmd.name());
    }
    let threads: usize = kv.get("threads")?;
    if threads > 0 {
        // a pool can only be installed once per process; later runs in the
        // same process keep the first one
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let out = PathBuf::from(kv.get_str("out").unwrap_or("out"));
    let mut run = Run { kv, out, outputs: Vec::new() };
    fs::create_dir_all(&run.out).map_err(|e| anyhow::anyhow!("cannot create {}: {e}", run.out.display()))?;
    let result = commands::dispatch(cmd, &mut run);

    let manifest = RunManifest {
        subcommand: cmd.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: run.seed().unwrap_or(0),
        config: run.kv.0.clone(),
        inputs: run.kv.0.iter().filter(|(k, _)| INPUT_KEYS.contains(&k.as_str())).map(|(k, v)| (k.clone(), v.clone())).collect(),
        outputs: run.outputs.iter().map(|p| p.display().to_string()).collect(),
        started_unix: started,
        finished_unix: unix_now(),
    };
    let name = cmd.name();
    fs::write(run.out.join(format!("{name}.cfg")), run.kv.render()).map_err(anyhow::Error::from)?;
    let json = serde_json::to_string_pretty(&manifest).map_err(anyhow::Error::from)?;
    fs::write(run.out.join(format!("{name}.manifest.json")), json + "\n").map_err(anyhow::Error::from)?;
    result
}

/// Parses `args` (program name first) and runs the subcommand. Returns the
/// process exit code: 0 on success, 2 on usage errors, 1 otherwise.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try 'kalm {} --help'.", cli.command.name());
            2
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn path(s: &str) -> &Path {
    Path::new(s)
}
