//! Word-overlap metrics (BLEU-1..3, ROUGE-L) and their aggregation over
//! prediction records.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{InstanceRecord, Mode};
use crate::hybrid::{Prediction, OVERALL};

pub const MAX_ORDER: usize = 3;
pub const ROUGE_BETA: f64 = 1.2;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("BLEU order must be in 1..={MAX_ORDER}, got {0}")]
    InvalidOrder(usize),
    #[error("reference is empty")]
    EmptyReference,
    #[error("ROUGE-L needs non-empty hypothesis and reference")]
    EmptyInput,
    #[error("ROUGE-L beta must be positive and finite, got {0}")]
    InvalidBeta(f64),
    #[error("prediction {0} has no gold instance")]
    UnknownInstance(String),
    #[error("duplicate prediction for ({system}, {id})")]
    DuplicatePrediction { system: String, id: String },
    #[error("duplicate gold instance {0}")]
    DuplicateGold(String),
}

/// Whitespace tokenization; runs of whitespace count as one separator.
pub fn tokenize(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

fn ngram_counts<'a, 'b>(tokens: &'a [&'b str], n: usize) -> HashMap<&'a [&'b str], usize> {
    let mut counts = HashMap::new();
    for g in tokens.windows(n) {
        *counts.entry(g).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram matches and hypothesis n-gram totals for orders 1..=3,
/// plus lengths for the brevity penalty.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn new(hyp: &[&str], reference: &[&str]) -> Self {
        let mut s = BleuStats {
            hyp_len: hyp.len(),
            ref_len: reference.len(),
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            s.matches[n - 1] = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
            s.totals[n - 1] = hyp.len().saturating_sub(n - 1);
        }
        s
    }

    fn add(&mut self, other: &BleuStats) {
        for k in 0..MAX_ORDER {
            self.matches[k] += other.matches[k];
            self.totals[k] += other.totals[k];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        }
    }

    /// Geometric mean of the order precisions times the brevity penalty.
    /// `smooth` adds one to numerator and denominator of orders above 1.
    pub fn score(&self, n: usize, smooth: bool) -> Result<f64, EvalError> {
        if !(1..=MAX_ORDER).contains(&n) {
            return Err(EvalError::InvalidOrder(n));
        }
        let mut log_sum = 0.0;
        for k in 0..n {
            let (m, t) = if smooth && k > 0 {
                (self.matches[k] + 1, self.totals[k] + 1)
            } else {
                (self.matches[k], self.totals[k])
            };
            if m == 0 {
                return Ok(0.0);
            }
            log_sum += (m as f64 / t as f64).ln();
        }
        Ok(self.brevity_penalty() * (log_sum / n as f64).exp())
    }
}

/// Sentence-level smoothed BLEU-n against a single reference.
pub fn bleu_n(hyp: &[&str], reference: &[&str], n: usize) -> Result<f64, EvalError> {
    if !(1..=MAX_ORDER).contains(&n) {
        return Err(EvalError::InvalidOrder(n));
    }
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    BleuStats::new(hyp, reference).score(n, true)
}

/// Unsmoothed corpus BLEU-n: counts are summed over pairs before the
/// precisions are taken.
pub fn corpus_bleu(pairs: &[(Vec<&str>, Vec<&str>)], n: usize) -> Result<f64, EvalError> {
    if !(1..=MAX_ORDER).contains(&n) {
        return Err(EvalError::InvalidOrder(n));
    }
    let mut total = BleuStats::default();
    for (h, r) in pairs {
        if r.is_empty() {
            return Err(EvalError::EmptyReference);
        }
        total.add(&BleuStats::new(h, r));
    }
    total.score(n, false)
}

pub fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_beta(hyp: &[&str], reference: &[&str], beta: f64) -> Result<f64, EvalError> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(EvalError::InvalidBeta(beta));
    }
    if hyp.is_empty() || reference.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let lcs = lcs_len(hyp, reference);
    if lcs == 0 {
        return Ok(0.0);
    }
    let p = lcs as f64 / hyp.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = beta * beta;
    Ok((1.0 + b2) * p * r / (r + b2 * p))
}

/// LCS F-measure with beta 1.2.
pub fn rouge_l(hyp: &[&str], reference: &[&str]) -> Result<f64, EvalError> {
    rouge_l_beta(hyp, reference, ROUGE_BETA)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub rouge_beta: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { rouge_beta: ROUGE_BETA }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub instance_id: String,
    pub system: String,
    pub mode: Mode,
    pub domain: String,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub rouge_l: f64,
    #[serde(skip)]
    stats: BleuStats,
}

/// Sentence-level scores for one prediction. An empty hypothesis scores 0.
pub fn score_instance(pred: &Prediction, gold: &str, cfg: &EvalConfig) -> Result<InstanceScore, EvalError> {
    let hyp = tokenize(&pred.final_text);
    let reference = tokenize(gold);
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let stats = BleuStats::new(&hyp, &reference);
    let rouge = if hyp.is_empty() {
        0.0
    } else {
        rouge_l_beta(&hyp, &reference, cfg.rouge_beta)?
    };
    Ok(InstanceScore {
        instance_id: pred.instance_id.clone(),
        system: pred.system.clone(),
        mode: pred.mode,
        domain: pred.domain.clone(),
        bleu1: stats.score(1, true)?,
        bleu2: stats.score(2, true)?,
        bleu3: stats.score(3, true)?,
        rouge_l: rouge,
        stats,
    })
}

/// Means of sentence scores for one (system, mode, domain) cell; the
/// `corpus_bleu*` fields pool counts across the cell instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub system: String,
    pub mode: Mode,
    pub domain: String,
    pub count: usize,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub rouge_l: f64,
    pub corpus_bleu1: f64,
    pub corpus_bleu2: f64,
    pub corpus_bleu3: f64,
}

impl EvalRow {
    fn from_scores(system: &str, mode: Mode, domain: &str, scores: &[&InstanceScore]) -> Result<Self, EvalError> {
        let n = scores.len() as f64;
        let mean = |f: fn(&InstanceScore) -> f64| scores.iter().map(|s| f(s)).sum::<f64>() / n;
        let mut pooled = BleuStats::default();
        for s in scores {
            pooled.add(&s.stats);
        }
        Ok(EvalRow {
            system: system.to_string(),
            mode,
            domain: domain.to_string(),
            count: scores.len(),
            bleu1: mean(|s| s.bleu1),
            bleu2: mean(|s| s.bleu2),
            bleu3: mean(|s| s.bleu3),
            rouge_l: mean(|s| s.rouge_l),
            corpus_bleu1: pooled.score(1, false)?,
            corpus_bleu2: pooled.score(2, false)?,
            corpus_bleu3: pooled.score(3, false)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Per-domain rows followed by an overall row for each (system, mode).
    pub rows: Vec<EvalRow>,
    /// Sorted by (system, instance id).
    pub instances: Vec<InstanceScore>,
}

impl EvalReport {
    pub fn row(&self, system: &str, mode: Mode, domain: &str) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.system == system && r.mode == mode && r.domain == domain)
    }

    pub fn render(&self) -> String {
        let sw = self.rows.iter().map(|r| r.system.len()).max().unwrap_or(6).max(6);
        let dw = self.rows.iter().map(|r| r.domain.len()).max().unwrap_or(6).max(6);
        let mut out = format!(
            "{:<sw$}  {:<5}  {:<dw$}  {:>5}  {:>7}  {:>7}  {:>7}  {:>7}\n",
            "system", "mode", "domain", "n", "BLEU-1", "BLEU-2", "BLEU-3", "ROUGE-L"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<sw$}  {:<5}  {:<dw$}  {:>5}  {:>7.4}  {:>7.4}  {:>7.4}  {:>7.4}\n",
                r.system,
                r.mode.to_string(),
                r.domain,
                r.count,
                r.bleu1,
                r.bleu2,
                r.bleu3,
                r.rouge_l
            ));
        }
        out
    }
}

/// Scores every prediction against its gold response and aggregates per
/// (system, mode, domain) and per (system, mode) overall. Predictions from
/// several systems may share instance ids.
pub fn evaluate_run(
    predictions: &[Prediction],
    gold: &[InstanceRecord],
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    if !(cfg.rouge_beta > 0.0 && cfg.rouge_beta.is_finite()) {
        return Err(EvalError::InvalidBeta(cfg.rouge_beta));
    }
    let mut gold_by_id: HashMap<&str, &str> = HashMap::new();
    for g in gold {
        if gold_by_id.insert(&g.id, &g.gold_response).is_some() {
            return Err(EvalError::DuplicateGold(g.id.clone()));
        }
    }
    let mut seen = HashSet::new();
    for p in predictions {
        if !gold_by_id.contains_key(p.instance_id.as_str()) {
            return Err(EvalError::UnknownInstance(p.instance_id.clone()));
        }
        if !seen.insert((p.system.as_str(), p.instance_id.as_str())) {
            return Err(EvalError::DuplicatePrediction {
                system: p.system.clone(),
                id: p.instance_id.clone(),
            });
        }
    }
    let mut instances: Vec<InstanceScore> = predictions
        .par_iter()
        .map(|p| score_instance(p, gold_by_id[p.instance_id.as_str()], cfg))
        .collect::<Result<_, _>>()?;
    instances.sort_by(|a, b| (&a.system, &a.instance_id).cmp(&(&b.system, &b.instance_id)));

    let mut cells: BTreeMap<(&str, Mode), BTreeMap<&str, Vec<&InstanceScore>>> = BTreeMap::new();
    for s in &instances {
        cells
            .entry((&s.system, s.mode))
            .or_default()
            .entry(&s.domain)
            .or_default()
            .push(s);
    }
    let mut rows = Vec::new();
    for ((system, mode), domains) in &cells {
        for (domain, scores) in domains {
            rows.push(EvalRow::from_scores(system, *mode, domain, scores)?);
        }
        let all: Vec<&InstanceScore> = domains.values().flatten().copied().collect();
        rows.push(EvalRow::from_scores(system, *mode, OVERALL, &all)?);
    }
    Ok(EvalReport { rows, instances })
}
