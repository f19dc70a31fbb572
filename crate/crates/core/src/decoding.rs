//! Nucleus (top-p) sampling and autoregressive response generation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Speaker, Turn};
use crate::nnet::{forward, softmax, ModelState, NnetError, RunMode};
use crate::seed;
use crate::tokenizer::{decode, encode_context, TokenizerError, Vocab, BOS, EOS, PAD, SEP, UNK};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("top_p must lie in (0, 1], got {0}")]
    InvalidTopP(f64),
    #[error("max_response_tokens must be positive")]
    NoResponseBudget,
    #[error("distribution is not normalized (sum {0})")]
    NotNormalized(f64),
    #[error("distribution has a negative or non-finite entry at {0}")]
    InvalidProbability(usize),
    #[error("context leaves no room for a response: {0}")]
    ContextTooLong(TokenizerError),
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub top_p: f64,
    pub max_response_tokens: usize,
    pub rng_seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            top_p: 0.9,
            max_response_tokens: 20,
            rng_seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(DecodeError::InvalidTopP(self.top_p));
        }
        if self.max_response_tokens == 0 {
            return Err(DecodeError::NoResponseBudget);
        }
        Ok(())
    }
}

const NORM_TOLERANCE: f64 = 1e-6;

fn check_distribution(probs: &[f64]) -> Result<(), DecodeError> {
    if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
        return Err(DecodeError::InvalidProbability(i));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > NORM_TOLERANCE {
        return Err(DecodeError::NotNormalized(sum));
    }
    Ok(())
}

/// Token ids of the nucleus: descending probability (ties by ascending id)
/// up to and including the token where the cumulative mass first reaches
/// `p`.
pub fn nucleus_set(probs: &[f64], p: f64) -> Result<Vec<usize>, DecodeError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(DecodeError::InvalidTopP(p));
    }
    check_distribution(probs)?;
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut cum = 0.0;
    let mut members = Vec::new();
    for id in order {
        if probs[id] == 0.0 && !members.is_empty() {
            break;
        }
        members.push(id);
        cum += probs[id];
        if cum >= p {
            break;
        }
    }
    Ok(members)
}

/// Zeroes everything outside the nucleus and rescales the members by their
/// total mass. `p = 1` returns the input unchanged.
pub fn nucleus_filter(probs: &[f64], p: f64) -> Result<Vec<f64>, DecodeError> {
    let members = nucleus_set(probs, p)?;
    if p >= 1.0 {
        return Ok(probs.to_vec());
    }
    let mass: f64 = members.iter().map(|&i| probs[i]).sum();
    let mut out = vec![0.0; probs.len()];
    for i in members {
        out[i] = probs[i] / mass;
    }
    Ok(out)
}

/// Inverse-CDF draw from a normalized distribution.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last = i;
            if u < cum {
                return i;
            }
        }
    }
    last
}

/// One generation step: the masked next-token distribution, the filtered
/// distribution actually sampled from, and the sampled token.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeStep {
    pub distribution: Vec<f64>,
    pub filtered: Vec<f64>,
    pub token: usize,
}

/// Next-token distribution with structural tokens removed: PAD, BOS, UNK and
/// SEP always, EOS before the first response token.
pub fn masked_distribution(logits: &[f32], step: usize) -> Vec<f64> {
    let logits: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
    let mut probs = softmax(&logits);
    for id in [PAD, BOS, UNK, SEP] {
        probs[id] = 0.0;
    }
    if step == 0 {
        probs[EOS] = 0.0;
    }
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    probs
}

/// Samples a user response to `context` and records every step.
pub fn generate_traced(
    state: &ModelState,
    context: &[Turn],
    vocab: &Vocab,
    dc: &DecodeConfig,
) -> Result<(Turn, Vec<DecodeStep>), DecodeError> {
    dc.validate()?;
    let limits = state.config.limits();
    let mut seq = encode_context(context, vocab, dc.max_response_tokens + 1, limits).map_err(|e| match e {
        TokenizerError::ContextTooLong { .. } => DecodeError::ContextTooLong(e),
        other => DecodeError::Tokenizer(other),
    })?;
    let turn = seq.kept_turns.min(limits.max_turns - 1);
    let start = seq.len();
    let mut rng = seed::rng(dc.rng_seed);
    let mut steps = Vec::new();
    for step in 0..dc.max_response_tokens {
        let out = forward(state, &seq, RunMode::Eval)?;
        let distribution = masked_distribution(out.logits_at(out.len - 1), step);
        let filtered = nucleus_filter(&distribution, dc.top_p)?;
        let token = sample_index(&filtered, &mut rng);
        steps.push(DecodeStep {
            distribution,
            filtered,
            token,
        });
        if token == EOS {
            break;
        }
        seq.push_response_token(token, Speaker::User, turn);
    }
    let text = decode(&seq.token_ids[start..], vocab)?;
    let turn = Turn::new(Speaker::User, &text).expect("at least one non-special token is always sampled");
    Ok((turn, steps))
}

pub fn generate_response(
    state: &ModelState,
    context: &[Turn],
    vocab: &Vocab,
    dc: &DecodeConfig,
) -> Result<Turn, DecodeError> {
    generate_traced(state, context, vocab, dc).map(|(t, _)| t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{init_model, ModelConfig};
    use crate::tokenizer::is_special;

    #[test]
    fn worked_example() {
        let out = nucleus_filter(&[0.5, 0.3, 0.15, 0.05], 0.8).unwrap();
        let expect = [0.625, 0.375, 0.0, 0.0];
        for (a, b) in out.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{out:?}");
        }
    }

    #[test]
    fn p_one_is_identity_and_one_hot_is_fixed() {
        let d = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(nucleus_filter(&d, 1.0).unwrap(), d.to_vec());
        for p in [0.01, 0.5, 1.0] {
            assert_eq!(nucleus_filter(&[0.0, 1.0, 0.0], p).unwrap(), vec![0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn ties_break_by_token_id() {
        assert_eq!(nucleus_set(&[0.25, 0.25, 0.25, 0.25], 0.5).unwrap(), vec![0, 1]);
        assert_eq!(nucleus_set(&[0.2, 0.4, 0.4], 0.3).unwrap(), vec![1]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(nucleus_filter(&[0.5, 0.4], 0.9), Err(DecodeError::NotNormalized(_))));
        assert!(matches!(nucleus_filter(&[1.2, -0.2], 0.9), Err(DecodeError::InvalidProbability(1))));
        assert!(matches!(nucleus_filter(&[1.0], 0.0), Err(DecodeError::InvalidTopP(_))));
        assert!(matches!(nucleus_filter(&[1.0], 1.5), Err(DecodeError::InvalidTopP(_))));
        assert!(nucleus_filter(&[0.5, 0.5 + 5e-7], 0.9).is_ok());
    }

    #[test]
    fn sampling_respects_support() {
        let mut rng = seed::rng(3);
        let d = [0.0, 0.7, 0.0, 0.3];
        for _ in 0..500 {
            let i = sample_index(&d, &mut rng);
            assert!(i == 1 || i == 3);
        }
    }

    fn setup() -> (ModelState, Vocab, Vec<Turn>) {
        let words: Vec<String> = ["hello", "hi", "book", "it", "please", "which", "one", "?"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut text = String::new();
        for t in crate::tokenizer::SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(words) {
            text.push_str(&t);
            text.push('\n');
        }
        let vocab = Vocab::from_text(&text).unwrap();
        let mut c = ModelConfig::micro(vocab.len());
        c.max_seq = 32;
        c.init_seed = 8;
        let state = init_model(&c).unwrap();
        let context = vec![Turn::wizard("hello which one ?").unwrap()];
        (state, vocab, context)
    }

    fn greedy(state: &ModelState, context: &[Turn], vocab: &Vocab, max: usize) -> String {
        let limits = state.config.limits();
        let mut seq = encode_context(context, vocab, max + 1, limits).unwrap();
        let start = seq.len();
        for step in 0..max {
            let out = forward(state, &seq, RunMode::Eval).unwrap();
            let logits = out.logits_at(out.len - 1);
            let best = (0..logits.len())
                .filter(|&i| !(is_special(i) && !(i == EOS && step > 0)))
                .fold(None, |acc: Option<usize>, i| match acc {
                    Some(b) if logits[b] >= logits[i] => Some(b),
                    _ => Some(i),
                })
                .unwrap();
            if best == EOS {
                break;
            }
            seq.push_response_token(best, Speaker::User, 1);
        }
        decode(&seq.token_ids[start..], vocab).unwrap()
    }

    #[test]
    fn tiny_top_p_is_greedy() {
        let (state, vocab, context) = setup();
        for seed in 0..5 {
            let dc = DecodeConfig {
                top_p: 1e-9,
                max_response_tokens: 6,
                rng_seed: seed,
            };
            let t = generate_response(&state, &context, &vocab, &dc).unwrap();
            assert_eq!(t.text(), greedy(&state, &context, &vocab, 6));
        }
    }

    #[test]
    fn generation_is_seeded_and_special_free() {
        let (state, vocab, context) = setup();
        let dc = DecodeConfig {
            top_p: 0.9,
            max_response_tokens: 8,
            rng_seed: 21,
        };
        let (a, steps) = generate_traced(&state, &context, &vocab, &dc).unwrap();
        let b = generate_response(&state, &context, &vocab, &dc).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.speaker(), Speaker::User);
        assert!(!a.text().is_empty());
        for w in a.text().split(' ') {
            assert!(!crate::tokenizer::SPECIAL_TOKENS.contains(&w));
        }
        assert!(steps.len() <= 8);
        for s in &steps {
            assert!(s.filtered[s.token] > 0.0);
            assert_eq!(s.distribution[PAD], 0.0);
        }
        assert_eq!(steps[0].distribution[EOS], 0.0);
    }

    #[test]
    fn context_without_room_is_an_error() {
        let (state, vocab, _) = setup();
        let long = vec![Turn::wizard(&"hello ".repeat(30)).unwrap()];
        let dc = DecodeConfig::default();
        assert!(matches!(
            generate_response(&state, &long, &vocab, &dc),
            Err(DecodeError::ContextTooLong(_))
        ));
    }
}
