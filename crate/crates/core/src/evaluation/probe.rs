use std::collections::BTreeMap;
use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::softmax_in_place;
use crate::model::KalmModel;
use crate::tokenizer::{word_ranges, DuetTokenizer};

use super::{EvalError, ProbeRecord, REPORT_HEADER};

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    /// Fraction of records used for training; the rest are scored.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { learning_rate: 0.5, epochs: 300, l2: 1e-4, train_fraction: 0.8, seed: 0 }
    }
}

/// Token positions `[start, end)` whose byte extent overlaps `bytes`.
pub fn span_token_range(starts: &[usize], text_len: usize, bytes: (usize, usize)) -> (usize, usize) {
    let end_of = |i: usize| starts.get(i + 1).copied().unwrap_or(text_len);
    let first = (0..starts.len()).find(|&i| end_of(i) > bytes.0).unwrap_or(starts.len());
    let last = (first..starts.len()).take_while(|&i| starts[i] < bytes.1).last().map_or(first, |i| i + 1);
    (first, last)
}

/// Mean-pooled final hidden states over each span, concatenated. The model
/// is only read.
pub fn probe_features(model: &KalmModel, tok: &DuetTokenizer, records: &[ProbeRecord]) -> Result<Vec<Vec<f64>>, EvalError> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let bad = |m: String| EvalError::Probe(format!("record {}: {m}", i + 1));
            if r.spans.is_empty() {
                return Err(bad("no spans".into()));
            }
            let words = word_ranges(&r.text);
            let duet = tok.tokenize(&r.text);
            let ents = if model.config.mode.uses_entity_input() { duet.entity_ids.clone() } else { vec![0; duet.len()] };
            let (_, hidden) = model.infer(&duet.word_ids, &ents)?;
            let mut feat = Vec::new();
            for &(ws, we) in &r.spans {
                if ws >= we || we > words.len() {
                    return Err(bad(format!("span [{ws}, {we}) invalid for {} words", words.len())));
                }
                let (ts, te) = span_token_range(&duet.word_starts, r.text.len(), (words[ws].0, words[we - 1].1));
                if ts >= te {
                    return Err(bad("span covers no tokens".into()));
                }
                let mut pooled = vec![0.0; hidden.cols()];
                for t in ts..te {
                    pooled.iter_mut().zip(hidden.row(t)).for_each(|(p, h)| *p += h);
                }
                pooled.iter_mut().for_each(|p| *p /= (te - ts) as f64);
                feat.extend(pooled);
            }
            Ok(feat)
        })
        .collect()
}

/// Multinomial logistic regression on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Vec<f64>,
    bias: Vec<f64>,
    classes: usize,
}

impl LinearProbe {
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let d = self.mean.len();
        let z: Vec<f64> = x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect();
        (0..self.classes)
            .map(|c| self.bias[c] + self.weights[c * d..(c + 1) * d].iter().zip(&z).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        crate::model::argmax(&self.logits(x))
    }
}

/// Full-batch gradient descent on mean cross-entropy plus L2 on weights.
pub fn train_probe(features: &[Vec<f64>], labels: &[usize], classes: usize, cfg: &ProbeConfig) -> LinearProbe {
    let n = features.len().max(1) as f64;
    let d = features.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; d];
    for f in features {
        mean.iter_mut().zip(f).for_each(|(m, v)| *m += v / n);
    }
    let mut scale = vec![0.0; d];
    for f in features {
        scale.iter_mut().zip(f.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m).powi(2) / n);
    }
    scale.iter_mut().for_each(|s| *s = if *s > 1e-24 { s.sqrt() } else { 1.0 });
    let mut probe = LinearProbe { mean, scale, weights: vec![0.0; classes * d], bias: vec![0.0; classes], classes };
    for _ in 0..cfg.epochs {
        let mut gw = vec![0.0; classes * d];
        let mut gb = vec![0.0; classes];
        for (x, &y) in features.iter().zip(labels) {
            let z: Vec<f64> = x.iter().zip(&probe.mean).zip(&probe.scale).map(|((v, m), s)| (v - m) / s).collect();
            let mut p = probe.logits(x);
            softmax_in_place(&mut p);
            p[y] -= 1.0;
            for c in 0..classes {
                gb[c] += p[c] / n;
                gw[c * d..(c + 1) * d].iter_mut().zip(&z).for_each(|(g, v)| *g += p[c] * v / n);
            }
        }
        for (w, g) in probe.weights.iter_mut().zip(&gw) {
            *w -= cfg.learning_rate * (g + cfg.l2 * *w);
        }
        for (b, g) in probe.bias.iter_mut().zip(&gb) {
            *b -= cfg.learning_rate * g;
        }
    }
    probe
}

/// Micro-averaged F1 over classes; for single-label data this is accuracy.
pub fn micro_f1(predicted: &[usize], gold: &[usize]) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    let tp = predicted.iter().zip(gold).filter(|(p, g)| p == g).count() as f64;
    // every error is one false positive and one false negative
    let fp = gold.len() as f64 - tp;
    2.0 * tp / (2.0 * tp + fp + fp)
}

/// Deterministic train/test partition of record indices with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub labels: Vec<usize>,
    pub label_names: Vec<String>,
}

impl ProbeSplit {
    pub fn new(records: &[ProbeRecord], cfg: &ProbeConfig) -> Result<Self, EvalError> {
        let names: BTreeMap<&str, usize> = records.iter().map(|r| (r.label.as_str(), 0)).collect();
        if names.len() < 2 {
            return Err(EvalError::Probe("dataset needs at least two labels".into()));
        }
        let label_names: Vec<String> = names.keys().map(|s| s.to_string()).collect();
        let labels = records.iter().map(|r| label_names.binary_search(&r.label).unwrap()).collect();
        let mut idx: Vec<usize> = (0..records.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
        let cut = ((records.len() as f64 * cfg.train_fraction).round() as usize).clamp(1, records.len().saturating_sub(1));
        let test = idx.split_off(cut);
        if test.is_empty() {
            return Err(EvalError::Probe("not enough records for a test split".into()));
        }
        Ok(Self { train: idx, test, labels, label_names })
    }

    /// Trains on the train split and returns test micro-F1.
    pub fn evaluate(&self, features: &[Vec<f64>], cfg: &ProbeConfig) -> f64 {
        let pick = |ix: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
            (ix.iter().map(|&i| features[i].clone()).collect(), ix.iter().map(|&i| self.labels[i]).collect())
        };
        let (xtr, ytr) = pick(&self.train);
        let probe = train_probe(&xtr, &ytr, self.label_names.len(), cfg);
        let (xte, yte) = pick(&self.test);
        let pred: Vec<usize> = xte.iter().map(|x| probe.predict(x)).collect();
        micro_f1(&pred, &yte)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbePoint {
    pub step: u64,
    pub micro_f1: f64,
}

/// F1 against pretraining step, one row per checkpoint.
pub fn write_probe_tsv<W: Write>(mut w: W, points: &[ProbePoint]) -> io::Result<()> {
    writeln!(w, "{REPORT_HEADER}")?;
    writeln!(w, "step\tmicro_f1")?;
    for p in points {
        writeln!(w, "{}\t{:.6}", p.step, p.micro_f1)?;
    }
    Ok(())
}
