//! Hybrid prediction: fine-tune on the support set, generate a candidate,
//! retrieve the response of the nearest support context, and keep whichever
//! candidate the NSP head prefers.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AdaptationInstance, Dialogue, Mode, Turn};
use crate::decoding::{generate_response, DecodeConfig, DecodeError};
use crate::nnet::{forward, nsp_logits, restore, Checkpoint, ModelState, NnetError, Real, RunMode};
use crate::seed::derive_seed;
use crate::tokenizer::{encode_context, EncodeLimits, TokenizerError, Vocab};
use crate::training::{finetune_support, nsp_positive_prob, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum HybridError {
    #[error("support set is empty")]
    EmptySupport,
    #[error("no predictions to summarize")]
    NoPredictions,
    #[error("prior checkpoint changed during prediction")]
    PriorModified,
    #[error("could not build worker pool: {0}")]
    Workers(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// Last-layer hidden state at the final position of an encoded context.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEmbedding {
    pub vector: Vec<f32>,
    /// Turns that survived length truncation.
    pub context_len: usize,
}

pub fn embed_context(
    state: &ModelState,
    context: &[Turn],
    vocab: &Vocab,
    limits: EncodeLimits,
) -> Result<ContextEmbedding, HybridError> {
    let seq = encode_context(context, vocab, 0, limits)?;
    let out = forward(state, &seq, RunMode::Eval)?;
    Ok(ContextEmbedding {
        vector: out.last_hidden().to_vec(),
        context_len: seq.kept_turns,
    })
}

/// Cosine similarity accumulated in f64; 0 when either vector is zero.
pub fn cosine<F: Real>(a: &[F], b: &[F]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64().unwrap(), y.to_f64().unwrap());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Support dialogue reduced to the context preceding `turn_index` (same
/// truncation window as the target) and the turn at `turn_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportCandidate<'a> {
    pub dialogue_id: &'a str,
    pub context: &'a [Turn],
    pub response: &'a Turn,
}

/// Support dialogues long enough to have a turn at `turn_index`, sorted by
/// id.
pub fn eligible_support<'a>(support: &'a [Dialogue], turn_index: usize, window: usize) -> Vec<SupportCandidate<'a>> {
    let mut out: Vec<SupportCandidate<'a>> = support
        .iter()
        .filter(|d| turn_index >= 1 && d.len() > turn_index)
        .map(|d| SupportCandidate {
            dialogue_id: &d.id,
            context: &d.turns()[turn_index.saturating_sub(window)..turn_index],
            response: &d.turns()[turn_index],
        })
        .collect();
    out.sort_by(|a, b| a.dialogue_id.cmp(b.dialogue_id));
    out
}

/// Index and similarity of the vector most similar to `target`; the first
/// (lowest id) wins ties.
pub fn nearest<F: Real>(target: &[F], vectors: &[Vec<F>]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in vectors.iter().enumerate() {
        let s = cosine(target, v);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    pub response: Turn,
    pub source_id: String,
    pub similarity: f64,
    /// Number of context turns the source embedding was computed from.
    pub context_len: usize,
}

/// Nearest-support retrieval with the model's context encoder. Returns
/// `None` when no support dialogue reaches `turn_index`.
pub fn retrieve_candidate(
    state: &ModelState,
    target_context: &[Turn],
    turn_index: usize,
    support: &[Dialogue],
    vocab: &Vocab,
    window: usize,
) -> Result<Option<Retrieved>, HybridError> {
    if support.is_empty() {
        return Err(HybridError::EmptySupport);
    }
    let limits = state.config.limits();
    let candidates = eligible_support(support, turn_index, window);
    if candidates.is_empty() {
        return Ok(None);
    }
    let target = embed_context(state, target_context, vocab, limits)?;
    let vectors = candidates
        .iter()
        .map(|c| embed_context(state, c.context, vocab, limits).map(|e| e.vector))
        .collect::<Result<Vec<_>, _>>()?;
    let (i, similarity) = nearest(&target.vector, &vectors).expect("candidates are non-empty");
    let c = &candidates[i];
    Ok(Some(Retrieved {
        response: c.response.clone(),
        source_id: c.dialogue_id.to_string(),
        similarity,
        context_len: c.context.len(),
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Provenance {
    Generated,
    Retrieved,
}

/// Final response for one instance with both candidates and their scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub instance_id: String,
    pub system: String,
    pub domain: String,
    pub task: String,
    pub mode: Mode,
    pub final_text: String,
    pub provenance: Provenance,
    pub generated_candidate: Option<String>,
    pub nsp_score_generated: Option<f64>,
    pub retrieved_candidate: Option<String>,
    pub retrieved_source: Option<String>,
    pub retrieved_similarity: Option<f64>,
    pub retrieved_context_len: Option<usize>,
    pub nsp_score_retrieved: Option<f64>,
    pub target_context_len: usize,
}

/// The candidate choice and scores, before instance metadata is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub final_text: String,
    pub provenance: Provenance,
    pub nsp_score_generated: f64,
    pub nsp_score_retrieved: Option<f64>,
}

pub fn nsp_score(state: &ModelState, context: &[Turn], candidate: &Turn, vocab: &Vocab) -> Result<f64, HybridError> {
    let logits = nsp_logits(state, context, candidate, vocab, state.config.limits())?;
    Ok(nsp_positive_prob([logits[0] as f64, logits[1] as f64]))
}

/// Keeps the candidate with the higher NSP probability; ties go to the
/// generated one.
pub fn rank_candidates(
    state: &ModelState,
    context: &[Turn],
    generated: &Turn,
    retrieved: Option<&Turn>,
    vocab: &Vocab,
) -> Result<Ranking, HybridError> {
    let g = nsp_score(state, context, generated, vocab)?;
    let r = retrieved.map(|t| nsp_score(state, context, t, vocab)).transpose()?;
    let (final_text, provenance) = match (retrieved, r) {
        (Some(t), Some(score)) if score > g => (t.text().to_string(), Provenance::Retrieved),
        _ => (generated.text().to_string(), Provenance::Generated),
    };
    Ok(Ranking {
        final_text,
        provenance,
        nsp_score_generated: g,
        nsp_score_retrieved: r,
    })
}

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictOptions {
    pub use_support: bool,
    pub use_retrieval: bool,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions {
            use_support: true,
            use_retrieval: true,
        }
    }
}

impl PredictOptions {
    pub fn system_name(&self) -> &'static str {
        match (self.use_support, self.use_retrieval) {
            (true, true) => "hybrid",
            (true, false) => "no-retrieval",
            (false, true) => "no-support",
            (false, false) => "prior-only",
        }
    }
}

/// Fine-tuning config with the seed specialised to one instance.
pub fn instance_train_config(tc: &TrainConfig, instance_id: &str) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(tc.seed, &["finetune", instance_id]),
        ..tc.clone()
    }
}

/// Decoding config with the seed specialised to one instance.
pub fn instance_decode_config(dc: &DecodeConfig, instance_id: &str) -> DecodeConfig {
    DecodeConfig {
        rng_seed: derive_seed(dc.rng_seed, &["decode", instance_id]),
        ..*dc
    }
}

/// Restore, adapt, generate, retrieve, rank. The adapted weights live only
/// inside this call.
pub fn predict_instance(
    prior: &Checkpoint,
    inst: &AdaptationInstance,
    vocab: &Vocab,
    tc: &TrainConfig,
    dc: &DecodeConfig,
    opts: PredictOptions,
) -> Result<Prediction, HybridError> {
    let state = if opts.use_support {
        finetune_support(prior, &inst.support, vocab, &instance_train_config(tc, &inst.id))?
    } else {
        restore(prior, &vocab.fingerprint())?
    };
    let generated = generate_response(&state, &inst.target_context, vocab, &instance_decode_config(dc, &inst.id))?;
    let retrieved = if opts.use_retrieval {
        retrieve_candidate(
            &state,
            &inst.target_context,
            inst.turn_index,
            &inst.support,
            vocab,
            tc.context_window,
        )?
    } else {
        None
    };
    let ranking = rank_candidates(
        &state,
        &inst.target_context,
        &generated,
        retrieved.as_ref().map(|r| &r.response),
        vocab,
    )?;
    Ok(Prediction {
        instance_id: inst.id.clone(),
        system: opts.system_name().to_string(),
        domain: inst.domain.clone(),
        task: inst.task.clone(),
        mode: inst.mode,
        final_text: ranking.final_text,
        provenance: ranking.provenance,
        generated_candidate: Some(generated.text().to_string()),
        nsp_score_generated: Some(ranking.nsp_score_generated),
        retrieved_candidate: retrieved.as_ref().map(|r| r.response.text().to_string()),
        retrieved_source: retrieved.as_ref().map(|r| r.source_id.clone()),
        retrieved_similarity: retrieved.as_ref().map(|r| r.similarity),
        retrieved_context_len: retrieved.as_ref().map(|r| r.context_len),
        nsp_score_retrieved: ranking.nsp_score_retrieved,
        target_context_len: inst.target_context.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFailure {
    pub instance_id: String,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    /// Sorted by instance id.
    pub predictions: Vec<Prediction>,
    pub failures: Vec<PredictionFailure>,
    pub prior_digest: String,
}

/// Predicts every instance independently on `workers` threads. Failed
/// instances are recorded and skipped. Results are ordered by instance id
/// regardless of scheduling.
pub fn predict_batch(
    prior: &Checkpoint,
    instances: &[AdaptationInstance],
    vocab: &Vocab,
    tc: &TrainConfig,
    dc: &DecodeConfig,
    opts: PredictOptions,
    workers: usize,
) -> Result<BatchOutcome, HybridError> {
    let before = prior.digest();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HybridError::Workers(e.to_string()))?;
    let results: Vec<(String, Result<Prediction, HybridError>)> = pool.install(|| {
        instances
            .par_iter()
            .map(|inst| (inst.id.clone(), predict_instance(prior, inst, vocab, tc, dc, opts)))
            .collect()
    });
    if prior.digest() != before {
        return Err(HybridError::PriorModified);
    }
    let mut predictions = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok(p) => predictions.push(p),
            Err(e) => failures.push(PredictionFailure {
                instance_id: id,
                error: e.to_string(),
            }),
        }
    }
    predictions.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    failures.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    Ok(BatchOutcome {
        predictions,
        failures,
        prior_digest: before,
    })
}

pub const OVERALL: &str = "overall";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRetRow {
    pub domain: String,
    pub count: usize,
    pub generated: usize,
    pub retrieved: usize,
    pub generated_pct: f64,
    pub retrieved_pct: f64,
}

impl GenRetRow {
    fn new(domain: &str, generated: usize, retrieved: usize) -> Self {
        let count = generated + retrieved;
        let generated_pct = 100.0 * generated as f64 / count as f64;
        GenRetRow {
            domain: domain.to_string(),
            count,
            generated,
            retrieved,
            generated_pct,
            retrieved_pct: 100.0 - generated_pct,
        }
    }
}

/// Generated/retrieved percentages per domain plus an overall row.
pub fn gen_ret_stats(predictions: &[Prediction]) -> Result<Vec<GenRetRow>, HybridError> {
    if predictions.is_empty() {
        return Err(HybridError::NoPredictions);
    }
    let mut tally: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for p in predictions {
        let e = tally.entry(&p.domain).or_default();
        match p.provenance {
            Provenance::Generated => e.0 += 1,
            Provenance::Retrieved => e.1 += 1,
        }
    }
    let mut rows: Vec<GenRetRow> = tally.iter().map(|(d, &(g, r))| GenRetRow::new(d, g, r)).collect();
    let (g, r) = tally.values().fold((0, 0), |(a, b), &(g, r)| (a + g, b + r));
    rows.push(GenRetRow::new(OVERALL, g, r));
    Ok(rows)
}

pub fn render_gen_ret(rows: &[GenRetRow]) -> String {
    let width = rows.iter().map(|r| r.domain.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:<width$}  {:>5}  {:>11}  {:>11}\n", "domain", "n", "generated %", "retrieved %");
    for r in rows {
        out.push_str(&format!(
            "{:<width$}  {:>5}  {:>11.1}  {:>11.1}\n",
            r.domain, r.count, r.generated_pct, r.retrieved_pct
        ));
    }
    out
}
