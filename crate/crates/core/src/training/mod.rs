//! Joint LM + NSP training: base training on source dialogues and
//! per-instance fine-tuning on a support set.

mod loss;
mod optim;

pub use loss::{lm_loss, lm_loss_grad, nsp_loss, nsp_loss_grad, nsp_positive_prob, LmLoss};
pub use optim::{clip_global_norm, Adam};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Dialogue, Speaker, Turn};
use crate::nnet::{forward, restore, snapshot, Checkpoint, LossGraph, ModelState, NnetError, RunMode};
use crate::seed::{self, derive_seed};
use crate::tokenizer::{encode_dialogue, EncodeLimits, EncodedSequence, TokenizerError, Vocab};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("sequence has no response region")]
    EmptyResponseRegion,
    #[error("NSP label must be 0 or 1, got {0}")]
    InvalidLabel(usize),
    #[error("distractor pool has no utterance different from the gold text {0:?}")]
    NoDistractor(String),
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("no encodable training pairs ({skipped} skipped)")]
    NoTrainingPairs { skipped: usize },
    #[error("non-finite {what} at epoch {epoch} step {step} (lm {lm_loss}, nsp {nsp_loss}, grad norm {grad_norm})")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        step: usize,
        lm_loss: f64,
        nsp_loss: f64,
        grad_norm: f64,
    },
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub finetune_epochs: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Number of preceding turns kept as context.
    pub context_window: usize,
    /// Fraction of dialogues held out for early stopping.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 1,
            max_epochs: 5,
            patience: 1,
            finetune_epochs: 1,
            grad_clip_norm: 1.0,
            seed: 0,
            context_window: crate::corpus::DEFAULT_CONTEXT_WINDOW,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 || self.context_window == 0 {
            return bad("batch_size, max_epochs, patience and context_window must be positive");
        }
        if self.finetune_epochs == 0 {
            return bad("finetune_epochs must be at least 1");
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be positive");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// A context with a candidate next turn; label 1 when the candidate is the
/// true continuation.
#[derive(Debug, Clone, PartialEq)]
pub struct NspExample {
    pub context: Vec<Turn>,
    pub candidate: Turn,
    pub label: usize,
}

/// A context and the user turn that follows it.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponsePair {
    pub dialogue_id: String,
    pub context: Vec<Turn>,
    pub response: Turn,
}

/// One pair for every user turn with at least one preceding turn, with the
/// last `window` turns as context.
pub fn response_pairs(dialogues: &[Dialogue], window: usize) -> Vec<ResponsePair> {
    let mut out = Vec::new();
    for d in dialogues {
        let turns = d.turns();
        for (i, t) in turns.iter().enumerate().skip(1) {
            if t.speaker() == Speaker::User {
                out.push(ResponsePair {
                    dialogue_id: d.id.clone(),
                    context: turns[i.saturating_sub(window)..i].to_vec(),
                    response: t.clone(),
                });
            }
        }
    }
    out
}

/// Uniform draw from `pool` among turns whose text differs from `gold`.
pub fn sample_distractor<'a, R: Rng + ?Sized>(pool: &'a [Turn], gold: &Turn, rng: &mut R) -> Result<&'a Turn, TrainError> {
    let eligible: Vec<&Turn> = pool.iter().filter(|t| t.text() != gold.text()).collect();
    if eligible.is_empty() {
        return Err(TrainError::NoDistractor(gold.text().to_string()));
    }
    Ok(eligible[rng.random_range(0..eligible.len())])
}

/// The pair's positive and negative NSP examples. The distractor text is
/// re-tagged with the gold speaker so the speaker embedding carries no label
/// information.
pub fn nsp_examples(pair: &ResponsePair, distractor: &Turn) -> [NspExample; 2] {
    let negative = Turn::new(pair.response.speaker(), distractor.text()).expect("pool turns are non-empty");
    [
        NspExample {
            context: pair.context.clone(),
            candidate: pair.response.clone(),
            label: 1,
        },
        NspExample {
            context: pair.context.clone(),
            candidate: negative,
            label: 0,
        },
    ]
}

/// Encoded positive and negative sequences for one training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    pub positive: EncodedSequence,
    pub negative: EncodedSequence,
}

pub fn encode_pair(
    pair: &ResponsePair,
    distractor: &Turn,
    vocab: &Vocab,
    limits: EncodeLimits,
) -> Result<EncodedPair, TokenizerError> {
    let [pos, neg] = nsp_examples(pair, distractor);
    Ok(EncodedPair {
        positive: encode_dialogue(&pos.context, vocab, Some(&pos.candidate), limits)?,
        negative: encode_dialogue(&neg.context, vocab, Some(&neg.candidate), limits)?,
    })
}

/// Loss sums over a set of pairs. LM terms come from the positive sequence
/// only; NSP terms from both.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTotals {
    pub lm_sum: f64,
    pub lm_count: usize,
    pub nsp_sum: f64,
    pub nsp_count: usize,
    pub nsp_correct: usize,
}

impl LossTotals {
    pub fn lm_mean(&self) -> f64 {
        self.lm_sum / self.lm_count.max(1) as f64
    }

    pub fn nsp_mean(&self) -> f64 {
        self.nsp_sum / self.nsp_count.max(1) as f64
    }

    /// Per-token LM mean plus per-example NSP mean.
    pub fn joint(&self) -> f64 {
        self.lm_mean() + self.nsp_mean()
    }

    pub fn perplexity(&self) -> f64 {
        self.lm_mean().exp()
    }

    pub fn nsp_accuracy(&self) -> f64 {
        self.nsp_correct as f64 / self.nsp_count.max(1) as f64
    }

    fn add(&mut self, o: &LossTotals) {
        self.lm_sum += o.lm_sum;
        self.lm_count += o.lm_count;
        self.nsp_sum += o.nsp_sum;
        self.nsp_count += o.nsp_count;
        self.nsp_correct += o.nsp_correct;
    }
}

fn response_tokens(seq: &EncodedSequence) -> usize {
    seq.response_start.map_or(0, |s| seq.len().saturating_sub(s))
}

/// Losses and parameter gradients of the mean-normalized joint objective
/// over one batch. `dropout_seed` of `None` runs in eval mode.
pub fn batch_gradients(
    state: &ModelState,
    batch: &[EncodedPair],
    dropout_seed: Option<u64>,
) -> Result<(LossTotals, crate::nnet::Params<f32>), TrainError> {
    let lm_count: usize = batch.iter().map(|p| response_tokens(&p.positive)).sum();
    if batch.is_empty() || lm_count == 0 {
        return Err(TrainError::EmptyResponseRegion);
    }
    let lm_scale = 1.0 / lm_count as f32;
    let nsp_scale = 1.0 / (2 * batch.len()) as f32;
    let v = state.config.vocab_size;
    let mut graph = LossGraph::new(state);
    let mut totals = LossTotals::default();
    for (k, pair) in batch.iter().enumerate() {
        for (label, seq) in [(1usize, &pair.positive), (0, &pair.negative)] {
            let mode = match dropout_seed {
                Some(s) => RunMode::Train {
                    dropout_seed: derive_seed(s, &[&k.to_string(), &label.to_string()]),
                },
                None => RunMode::Eval,
            };
            let tape = graph.forward(seq, mode)?;
            let out = graph.output(tape)?;
            let nsp = out.nsp_logits;
            if label == 1 {
                let (l, g) = lm_loss_grad(&out.lm_logits, v, seq, lm_scale)?;
                totals.lm_sum += l.sum as f64;
                totals.lm_count += l.count;
                graph.seed_lm(tape, g)?;
            }
            let (l, g) = nsp_loss_grad(nsp, label, nsp_scale)?;
            totals.nsp_sum += l as f64;
            totals.nsp_count += 1;
            totals.nsp_correct += usize::from(predicted_label(nsp) == label);
            graph.seed_nsp(tape, g)?;
        }
    }
    Ok((totals, graph.backward()?))
}

fn predicted_label(logits: [f32; 2]) -> usize {
    usize::from(logits[1] > logits[0])
}

/// Eval-mode losses without gradients.
pub fn evaluate_pairs(state: &ModelState, pairs: &[EncodedPair]) -> Result<LossTotals, TrainError> {
    let v = state.config.vocab_size;
    let mut totals = LossTotals::default();
    for pair in pairs {
        let pos = forward(state, &pair.positive, RunMode::Eval)?;
        let l = lm_loss(&pos.lm_logits, v, &pair.positive)?;
        totals.lm_sum += l.sum as f64;
        totals.lm_count += l.count;
        let neg = forward(state, &pair.negative, RunMode::Eval)?;
        for (label, logits) in [(1, pos.nsp_logits), (0, neg.nsp_logits)] {
            totals.nsp_sum += nsp_loss(logits, label)? as f64;
            totals.nsp_count += 1;
            totals.nsp_correct += usize::from(predicted_label(logits) == label);
        }
    }
    Ok(totals)
}

/// Statistics of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub losses: LossTotals,
    /// Joint loss the step minimized.
    pub joint: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Gradient step on one batch: joint gradients, global-norm clipping, Adam.
/// Parameters are left untouched when the loss or gradient is non-finite.
pub fn train_step(
    state: &mut ModelState,
    opt: &mut Adam,
    batch: &[EncodedPair],
    tc: &TrainConfig,
    dropout_seed: u64,
    at: (usize, usize),
) -> Result<StepReport, TrainError> {
    let (losses, mut grads) = batch_gradients(state, batch, Some(dropout_seed))?;
    let joint = losses.joint();
    let (grad_norm, clipped) = clip_global_norm(&mut grads, tc.grad_clip_norm);
    let non_finite = |what| TrainError::NonFinite {
        what,
        epoch: at.0,
        step: at.1,
        lm_loss: losses.lm_mean(),
        nsp_loss: losses.nsp_mean(),
        grad_norm,
    };
    if !joint.is_finite() {
        return Err(non_finite("loss"));
    }
    if !grad_norm.is_finite() {
        return Err(non_finite("gradient"));
    }
    opt.update(&mut state.params, &grads);
    if !state.params.all_finite() {
        return Err(non_finite("parameters"));
    }
    Ok(StepReport {
        losses,
        joint,
        grad_norm,
        clipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

/// Stops once the monitored loss has failed to improve for `patience`
/// consecutive observations.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> Verdict {
        match self.best {
            Some((_, b)) if !(loss < b) => {
                self.stale += 1;
                if self.stale >= self.patience {
                    Verdict::Stop
                } else {
                    Verdict::Continue
                }
            }
            _ => {
                self.best = Some((epoch, loss));
                self.stale = 0;
                Verdict::Improved
            }
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

/// One per-epoch metrics record. Epoch 0 is the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub lm_loss: f64,
    pub nsp_loss: f64,
    pub nsp_accuracy: f64,
    pub perplexity: f64,
    pub joint_loss: f64,
    pub pairs: usize,
}

impl EpochMetrics {
    fn new(epoch: usize, split: Split, t: &LossTotals, pairs: usize) -> Self {
        EpochMetrics {
            epoch,
            split,
            lm_loss: t.lm_mean(),
            nsp_loss: t.nsp_mean(),
            nsp_accuracy: t.nsp_accuracy(),
            perplexity: t.perplexity(),
            joint_loss: t.joint(),
            pairs,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaseRun {
    /// Best-validation checkpoint (the dialogue prior).
    pub prior: Checkpoint,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub metrics: Vec<EpochMetrics>,
    pub log: Vec<String>,
    pub train_dialogues: Vec<String>,
    pub validation_dialogues: Vec<String>,
}

impl BaseRun {
    pub fn metric(&self, epoch: usize, split: Split) -> Option<&EpochMetrics> {
        self.metrics.iter().find(|m| m.epoch == epoch && m.split == split)
    }
}

/// Dialogue-level split stratified by (domain, task): groups are shuffled
/// and interleaved, and the first `ceil(fraction * n)` dialogues are held out.
pub fn split_dialogues(corpus: &Corpus, fraction: f64, seed: u64) -> (Vec<Dialogue>, Vec<Dialogue>) {
    let mut groups: BTreeMap<(&str, &str), Vec<&Dialogue>> = BTreeMap::new();
    for d in corpus.dialogues() {
        groups.entry((&d.domain, &d.task)).or_default().push(d);
    }
    let mut rng = seed::rng(derive_seed(seed, &["validation-split"]));
    let mut lists: Vec<Vec<&Dialogue>> = groups.into_values().collect();
    for l in &mut lists {
        l.shuffle(&mut rng);
    }
    let mut order = Vec::with_capacity(corpus.len());
    let longest = lists.iter().map(Vec::len).max().unwrap_or(0);
    for i in 0..longest {
        for l in &lists {
            if let Some(d) = l.get(i) {
                order.push(*d);
            }
        }
    }
    let n = order.len();
    let held = if n < 2 || fraction <= 0.0 {
        0
    } else {
        ((fraction * n as f64).ceil() as usize).min(n - 1)
    };
    let validation: Vec<Dialogue> = order[..held].iter().map(|d| (*d).clone()).collect();
    let mut train: Vec<Dialogue> = order[held..].iter().map(|d| (*d).clone()).collect();
    train.sort_by(|a, b| a.id.cmp(&b.id));
    let mut validation = validation;
    validation.sort_by(|a, b| a.id.cmp(&b.id));
    (train, validation)
}

fn turn_pool(dialogues: &[Dialogue]) -> Vec<Turn> {
    dialogues.iter().flat_map(|d| d.turns().iter().cloned()).collect()
}

/// Encodes every pair with a freshly drawn distractor; pairs that cannot be
/// encoded are skipped and counted.
fn encode_epoch(
    pairs: &[ResponsePair],
    pool: &[Turn],
    vocab: &Vocab,
    limits: EncodeLimits,
    rng: &mut seed::Rng,
) -> Result<(Vec<EncodedPair>, usize), TrainError> {
    let mut out = Vec::with_capacity(pairs.len());
    let mut skipped = 0;
    for p in pairs {
        let distractor = sample_distractor(pool, &p.response, rng)?;
        match encode_pair(p, distractor, vocab, limits) {
            Ok(e) => out.push(e),
            Err(TokenizerError::ResponseTooLong { .. } | TokenizerError::ContextTooLong { .. }) => skipped += 1,
            Err(e) => return Err(e.into()),
        }
    }
    Ok((out, skipped))
}

/// Runs one epoch of shuffled mini-batch steps.
fn run_epoch(
    state: &mut ModelState,
    opt: &mut Adam,
    encoded: &mut [EncodedPair],
    tc: &TrainConfig,
    epoch_seed: u64,
    epoch: usize,
) -> Result<LossTotals, TrainError> {
    encoded.shuffle(&mut seed::rng(derive_seed(epoch_seed, &["shuffle"])));
    let mut totals = LossTotals::default();
    for (step, batch) in encoded.chunks(tc.batch_size).enumerate() {
        let dropout_seed = derive_seed(epoch_seed, &["dropout", &step.to_string()]);
        let r = train_step(state, opt, batch, tc, dropout_seed, (epoch, step))?;
        totals.add(&r.losses);
    }
    Ok(totals)
}

/// Base training on source dialogues with early stopping on held-out joint
/// loss. Returns the best-validation checkpoint and per-epoch metrics.
pub fn train_base(corpus: &Corpus, vocab: &Vocab, model: ModelState, tc: &TrainConfig) -> Result<BaseRun, TrainError> {
    tc.validate()?;
    let limits = model.config.limits();
    let fingerprint = vocab.fingerprint();
    let (train, validation) = split_dialogues(corpus, tc.validation_fraction, tc.seed);
    let train_pairs = response_pairs(&train, tc.context_window);
    if train_pairs.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let train_pool = turn_pool(&train);
    let all_pool = turn_pool(corpus.dialogues());
    let val_pairs = response_pairs(&validation, tc.context_window);
    let mut val_rng = seed::rng(derive_seed(tc.seed, &["validation-distractors"]));
    let (val_encoded, _) = encode_epoch(&val_pairs, &all_pool, vocab, limits, &mut val_rng)?;
    let mut fixed_rng = seed::rng(derive_seed(tc.seed, &["train-eval-distractors"]));
    let (train_eval, _) = encode_epoch(&train_pairs, &train_pool, vocab, limits, &mut fixed_rng)?;
    if train_eval.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }

    let mut state = model;
    let mut opt = Adam::new(&state.params, tc.learning_rate as f32);
    let mut metrics = Vec::new();
    let mut log = vec![format!(
        "train dialogues {} ({} pairs), validation dialogues {} ({} pairs)",
        train.len(),
        train_pairs.len(),
        validation.len(),
        val_pairs.len()
    )];
    let mut stopper = EarlyStopping::new(tc.patience);
    let mut best = snapshot(&state, &fingerprint);
    let mut best_epoch = 0;
    let mut stopped_early = false;
    let mut epochs_run = 0;

    for epoch in 0..=tc.max_epochs {
        if epoch > 0 {
            let epoch_seed = derive_seed(tc.seed, &["epoch", &epoch.to_string()]);
            let mut rng = seed::rng(derive_seed(epoch_seed, &["distractors"]));
            let (mut encoded, skipped) = encode_epoch(&train_pairs, &train_pool, vocab, limits, &mut rng)?;
            let running = run_epoch(&mut state, &mut opt, &mut encoded, tc, epoch_seed, epoch)?;
            epochs_run = epoch;
            log.push(format!(
                "epoch {epoch}: running joint {:.4} (lm {:.4}, nsp {:.4}), {skipped} pairs skipped",
                running.joint(),
                running.lm_mean(),
                running.nsp_mean()
            ));
        }
        let tr = evaluate_pairs(&state, &train_eval)?;
        metrics.push(EpochMetrics::new(epoch, Split::Train, &tr, train_eval.len()));
        let watched = if val_encoded.is_empty() {
            tr
        } else {
            let va = evaluate_pairs(&state, &val_encoded)?;
            metrics.push(EpochMetrics::new(epoch, Split::Validation, &va, val_encoded.len()));
            va
        };
        log.push(format!(
            "epoch {epoch}: held-out joint {:.4}, perplexity {:.3}, nsp accuracy {:.3}",
            watched.joint(),
            watched.perplexity(),
            watched.nsp_accuracy()
        ));
        match stopper.observe(epoch, watched.joint()) {
            Verdict::Improved => {
                best = snapshot(&state, &fingerprint);
                best_epoch = epoch;
            }
            Verdict::Continue => {}
            Verdict::Stop => {
                stopped_early = epoch < tc.max_epochs;
                log.push(format!("early stop after epoch {epoch}; best epoch {best_epoch}"));
                break;
            }
        }
    }
    Ok(BaseRun {
        prior: best
            .with_meta("train_seed", &tc.seed.to_string())
            .with_meta("best_epoch", &best_epoch.to_string()),
        best_epoch,
        epochs_run,
        stopped_early,
        metrics,
        log,
        train_dialogues: train.iter().map(|d| d.id.clone()).collect(),
        validation_dialogues: validation.iter().map(|d| d.id.clone()).collect(),
    })
}

/// Restores `prior` and fine-tunes a private copy on pairs drawn from the
/// support dialogues only. The checkpoint itself is never modified.
pub fn finetune_support(
    prior: &Checkpoint,
    support: &[Dialogue],
    vocab: &Vocab,
    tc: &TrainConfig,
) -> Result<ModelState, TrainError> {
    tc.validate()?;
    let mut state = restore(prior, &vocab.fingerprint())?;
    let limits = state.config.limits();
    let pairs = response_pairs(support, tc.context_window);
    let pool = turn_pool(support);
    let mut opt = Adam::new(&state.params, tc.learning_rate as f32);
    for epoch in 1..=tc.finetune_epochs {
        let epoch_seed = derive_seed(tc.seed, &["finetune", &epoch.to_string()]);
        let mut rng = seed::rng(derive_seed(epoch_seed, &["distractors"]));
        let (mut encoded, skipped) = if pairs.is_empty() {
            (Vec::new(), 0)
        } else {
            encode_epoch(&pairs, &pool, vocab, limits, &mut rng)?
        };
        if encoded.is_empty() {
            return Err(TrainError::NoTrainingPairs { skipped });
        }
        run_epoch(&mut state, &mut opt, &mut encoded, tc, epoch_seed, epoch)?;
    }
    Ok(state)
}
