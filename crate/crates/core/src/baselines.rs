//! Training-free retrieval baselines: embed the target and support contexts
//! with a fixed encoder and return the turn after the nearest support
//! context.

use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::corpus::{AdaptationInstance, Dialogue, Turn};
use crate::hybrid::{eligible_support, nearest, Prediction, Provenance, Retrieved};
use crate::seed::{self, derive_seed};
use crate::tokenizer::{Vocab, UNK};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("encoder dimension must be at least 8, got {0}")]
    DimensionTooSmall(usize),
    #[error("no support dialogue has a turn at index {0}")]
    NoEligibleSupport(usize),
}

/// Maps a context to a fixed-length vector.
pub trait ContextEncoder: Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn encode(&self, context: &[Turn]) -> Vec<f64>;
}

/// Averages per-token pseudo-random unit vectors over the in-vocabulary
/// words of a context.
#[derive(Debug, Clone)]
pub struct BagEmbedEncoder {
    vocab: Vocab,
    dim: usize,
    table: Vec<Vec<f64>>,
}

/// Unit vector derived only from the token string and the dimension.
pub fn token_vector(token: &str, dim: usize) -> Vec<f64> {
    let mut rng = seed::rng(derive_seed(dim as u64, &["bag-embed", token]));
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

pub fn bag_embed_encoder(vocab: &Vocab, dim: usize) -> Result<BagEmbedEncoder, BaselineError> {
    if dim < 8 {
        return Err(BaselineError::DimensionTooSmall(dim));
    }
    let table = vocab.tokens().iter().map(|t| token_vector(t, dim)).collect();
    Ok(BagEmbedEncoder {
        vocab: vocab.clone(),
        dim,
        table,
    })
}

impl ContextEncoder for BagEmbedEncoder {
    fn name(&self) -> &str {
        "bag-embed"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, context: &[Turn]) -> Vec<f64> {
        let mut sum = vec![0.0; self.dim];
        let mut n = 0usize;
        for turn in context {
            for id in self.vocab.encode_words(turn.text()) {
                if id == UNK {
                    continue;
                }
                for (s, v) in sum.iter_mut().zip(&self.table[id]) {
                    *s += v;
                }
                n += 1;
            }
        }
        if n > 0 {
            sum.iter_mut().for_each(|s| *s /= n as f64);
        }
        sum
    }
}

/// Nearest support context by cosine under `encoder`, with the same
/// eligibility, window and tie rules as the hybrid retriever.
pub fn baseline_retrieve(
    encoder: &dyn ContextEncoder,
    target_context: &[Turn],
    turn_index: usize,
    support: &[Dialogue],
    window: usize,
) -> Result<Retrieved, BaselineError> {
    let candidates = eligible_support(support, turn_index, window);
    if candidates.is_empty() {
        return Err(BaselineError::NoEligibleSupport(turn_index));
    }
    let target = encoder.encode(target_context);
    let vectors: Vec<Vec<f64>> = candidates.iter().map(|c| encoder.encode(c.context)).collect();
    let (i, similarity) = nearest(&target, &vectors).expect("candidates are non-empty");
    let c = &candidates[i];
    Ok(Retrieved {
        response: c.response.clone(),
        source_id: c.dialogue_id.to_string(),
        similarity,
        context_len: c.context.len(),
    })
}

/// Baseline output in the shared prediction schema.
pub fn predict_baseline(
    encoder: &dyn ContextEncoder,
    inst: &AdaptationInstance,
    window: usize,
) -> Result<Prediction, BaselineError> {
    let r = baseline_retrieve(encoder, &inst.target_context, inst.turn_index, &inst.support, window)?;
    Ok(Prediction {
        instance_id: inst.id.clone(),
        system: format!("baseline-{}", encoder.name()),
        domain: inst.domain.clone(),
        task: inst.task.clone(),
        mode: inst.mode,
        final_text: r.response.text().to_string(),
        provenance: Provenance::Retrieved,
        generated_candidate: None,
        nsp_score_generated: None,
        retrieved_candidate: Some(r.response.text().to_string()),
        retrieved_source: Some(r.source_id),
        retrieved_similarity: Some(r.similarity),
        retrieved_context_len: Some(r.context_len),
        nsp_score_retrieved: None,
        target_context_len: inst.target_context.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hybrid::cosine;
    use crate::tokenizer::SPECIAL_TOKENS;
    use rand::Rng;

    fn vocab(words: &[&str]) -> Vocab {
        let text: String = SPECIAL_TOKENS
            .iter()
            .chain(words)
            .map(|w| format!("{w}\n"))
            .collect();
        Vocab::from_text(&text).unwrap()
    }

    fn wiz(s: &str) -> Turn {
        Turn::wizard(s).unwrap()
    }

    #[test]
    fn golden_vectors() {
        // first three components at dim 8
        for (tok, head) in GOLDEN {
            let v = token_vector(tok, 8);
            for (a, b) in v.iter().zip(head) {
                assert!((a - b).abs() < 1e-12, "{tok}: {v:?}");
            }
            assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    const GOLDEN: [(&str, [f64; 3]); 5] = [
        ("hello", [0.20416378833510984, 0.03770429875708804, -0.5433803036498309]),
        ("book", [0.1929262259292023, 0.1182216600430062, 0.17988776452574218]),
        ("please", [-0.03019012734688001, 0.6336054952835065, -0.18430897853058814]),
        ("?", [-0.5489139990900729, -0.29549372081893416, 0.028983009788453976]),
        ("Hotel", [0.46915945026200634, -0.31484466962082197, 0.041664171574385046]),
    ];

    #[test]
    fn single_token_and_unknown_only_contexts() {
        let v = vocab(&["hello", "book"]);
        let enc = bag_embed_encoder(&v, 16).unwrap();
        assert_eq!(enc.encode(&[wiz("hello")]), token_vector("hello", 16));
        assert_eq!(enc.encode(&[wiz("zzz qqq")]), vec![0.0; 16]);
        assert_eq!(enc.encode(&[wiz("hello zzz")]), token_vector("hello", 16));
        assert!(matches!(bag_embed_encoder(&v, 4), Err(BaselineError::DimensionTooSmall(4))));
    }

    #[test]
    fn mean_matches_independent_average() {
        let words: Vec<String> = (0..30).map(|i| format!("w{i}")).collect();
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        let v = vocab(&refs);
        let enc = bag_embed_encoder(&v, 12).unwrap();
        let mut rng = seed::rng(41);
        for _ in 0..100 {
            let n_turns = rng.random_range(1..4);
            let turns: Vec<Turn> = (0..n_turns)
                .map(|_| {
                    let len = rng.random_range(1..6);
                    let text: Vec<String> = (0..len).map(|_| format!("w{}", rng.random_range(0..40))).collect();
                    wiz(&text.join(" "))
                })
                .collect();
            let mut acc = vec![0.0; 12];
            let mut n = 0;
            for t in &turns {
                for w in t.text().split(' ') {
                    let idx: usize = w[1..].parse().unwrap();
                    if idx < 30 {
                        let tv = token_vector(w, 12);
                        for k in 0..12 {
                            acc[k] += tv[k];
                        }
                        n += 1;
                    }
                }
            }
            if n > 0 {
                acc.iter_mut().for_each(|a| *a /= n as f64);
            }
            for (a, b) in enc.encode(&turns).iter().zip(&acc) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    fn dialogue(id: &str, texts: &[&str]) -> Dialogue {
        let turns = texts
            .iter()
            .enumerate()
            .map(|(i, t)| if i % 2 == 0 { wiz(t) } else { Turn::user(t).unwrap() })
            .collect();
        Dialogue::new(id, "d", "t", turns).unwrap()
    }

    #[test]
    fn retrieval_rules() {
        let v = vocab(&["hello", "hi", "book", "hotel", "flight", "yes", "no"]);
        let enc = bag_embed_encoder(&v, 16).unwrap();
        let a = dialogue("a", &["hello", "hi", "book flight", "yes"]);
        let b = dialogue("b", &["hello", "hi", "book hotel", "no"]);
        let short = dialogue("c", &["hello", "hi"]);
        let target = [wiz("hello"), Turn::user("hi").unwrap(), wiz("book hotel")];
        let r = baseline_retrieve(&enc, &target, 3, &[a.clone(), b.clone(), short.clone()], 5).unwrap();
        assert_eq!(r.source_id, "b");
        assert!((r.similarity - 1.0).abs() < 1e-9);
        assert_eq!(r.response.text(), "no");

        let only = baseline_retrieve(&enc, &target, 3, &[short.clone(), a.clone()], 5).unwrap();
        assert_eq!(only.source_id, "a");
        assert!(matches!(
            baseline_retrieve(&enc, &target, 3, &[short], 5),
            Err(BaselineError::NoEligibleSupport(3))
        ));
        assert!(cosine(&enc.encode(&target), &enc.encode(&a.turns()[..3])) < 1.0);
    }
}
