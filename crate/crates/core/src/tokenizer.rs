//! Word-level vocabulary and the encoding of dialogues into the four
//! parallel id streams (token, speaker, turn, position) that the model sums
//! into its input embedding.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

use crate::corpus::{Corpus, Speaker, Turn};
use crate::seed::sha256_hex;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SEP: usize = 4;
pub const NUM_SPECIALS: usize = 5;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"];

pub const SPEAKER_USER: usize = 0;
pub const SPEAKER_WIZARD: usize = 1;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("vocabulary max size must be at least 6, got {0}")]
    MaxSizeTooSmall(usize),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("response of {len} tokens cannot fit in max_seq {max_seq} (needs len + 2)")]
    ResponseTooLong { len: usize, max_seq: usize },
    #[error("context turn of {len} tokens cannot fit in max_seq {max_seq} with {reserve} reserved slots")]
    ContextTooLong { len: usize, max_seq: usize, reserve: usize },
    #[error("cannot encode an empty context")]
    EmptyContext,
    #[error("vocabulary file: {0}")]
    Format(String),
    #[error("vocabulary file io: {0}")]
    Io(#[from] std::io::Error),
}

pub fn speaker_id(s: Speaker) -> usize {
    match s {
        Speaker::User => SPEAKER_USER,
        Speaker::Wizard => SPEAKER_WIZARD,
    }
}

pub fn is_special(id: usize) -> bool {
    id < NUM_SPECIALS
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self, TokenizerError> {
        if tokens.len() < NUM_SPECIALS || tokens[..NUM_SPECIALS] != SPECIAL_TOKENS {
            return Err(TokenizerError::Format("specials must occupy ids 0..4".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(TokenizerError::Format(format!("line {}: invalid token {t:?}", i + 1)));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(TokenizerError::Format(format!("line {}: duplicate token {t:?}", i + 1)));
            }
        }
        Ok(Vocab { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of a word, `UNK` when absent.
    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.ids.contains_key(word)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line in id order, specials first.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        Vocab::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Vocab::from_text(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the serialized vocabulary.
    pub fn fingerprint(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    pub fn encode_words(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }
}

/// Keeps the `max_size - 5` most frequent whitespace tokens, ties broken
/// lexicographically.
pub fn build_vocab(corpus: &Corpus, max_size: usize) -> Result<Vocab, TokenizerError> {
    if max_size < NUM_SPECIALS + 1 {
        return Err(TokenizerError::MaxSizeTooSmall(max_size));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for d in corpus.dialogues() {
        for t in d.turns() {
            for w in t.text().split_whitespace() {
                if !SPECIAL_TOKENS.contains(&w) {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens = SPECIAL_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().take(max_size - NUM_SPECIALS).map(|(w, _)| w.to_string()))
        .collect();
    Vocab::from_tokens(tokens)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodeLimits {
    pub max_seq: usize,
    pub max_turns: usize,
}

/// Parallel id streams for one model input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSequence {
    pub token_ids: Vec<usize>,
    pub speaker_ids: Vec<usize>,
    pub turn_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    /// First response token, `None` for context-only sequences.
    pub response_start: Option<usize>,
    /// Number of context turns that survived length truncation.
    pub kept_turns: usize,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    fn push(&mut self, token: usize, speaker: usize, turn: usize) {
        self.position_ids.push(self.token_ids.len());
        self.token_ids.push(token);
        self.speaker_ids.push(speaker);
        self.turn_ids.push(turn);
    }

    /// Appends one token to the response region (used during generation).
    pub fn push_response_token(&mut self, token: usize, speaker: Speaker, turn: usize) {
        if self.response_start.is_none() {
            self.response_start = Some(self.len());
        }
        self.push(token, speaker_id(speaker), turn);
    }
}

/// Encodes `turns` (and optionally a response) as
/// `BOS, (utterance SEP)*, [response EOS]`.
///
/// Whole oldest turns are dropped until the sequence fits `max_seq`; the
/// response is never dropped. Turn ids count from 0 inside the surviving
/// window and are clipped at `max_turns - 1`.
pub fn encode_dialogue(
    turns: &[Turn],
    vocab: &Vocab,
    response: Option<&Turn>,
    limits: EncodeLimits,
) -> Result<EncodedSequence, TokenizerError> {
    encode_with_reserve(turns, vocab, response, 0, limits)
}

/// Encodes a context-only sequence leaving at least `reserve` free slots
/// after it.
pub fn encode_context(
    turns: &[Turn],
    vocab: &Vocab,
    reserve: usize,
    limits: EncodeLimits,
) -> Result<EncodedSequence, TokenizerError> {
    encode_with_reserve(turns, vocab, None, reserve, limits)
}

fn encode_with_reserve(
    turns: &[Turn],
    vocab: &Vocab,
    response: Option<&Turn>,
    reserve: usize,
    limits: EncodeLimits,
) -> Result<EncodedSequence, TokenizerError> {
    if turns.is_empty() {
        return Err(TokenizerError::EmptyContext);
    }
    let budget = limits.max_seq.saturating_sub(reserve);
    let words: Vec<Vec<usize>> = turns.iter().map(|t| vocab.encode_words(t.text())).collect();
    let resp_words = response.map(|r| vocab.encode_words(r.text()));
    let resp_cost = match &resp_words {
        Some(r) if r.len() + 2 > limits.max_seq => {
            return Err(TokenizerError::ResponseTooLong {
                len: r.len(),
                max_seq: limits.max_seq,
            })
        }
        Some(r) => r.len() + 1,
        None => 0,
    };
    let mut total = 1 + resp_cost + words.iter().map(|w| w.len() + 1).sum::<usize>();
    let mut first = 0;
    while total > budget && first < turns.len() {
        total -= words[first].len() + 1;
        first += 1;
    }
    if total > budget || (response.is_none() && first == turns.len()) {
        return Err(TokenizerError::ContextTooLong {
            len: words.last().map_or(0, Vec::len),
            max_seq: limits.max_seq,
            reserve,
        });
    }
    let clip = |k: usize| k.min(limits.max_turns.saturating_sub(1));
    let mut seq = EncodedSequence {
        token_ids: Vec::with_capacity(total),
        speaker_ids: Vec::with_capacity(total),
        turn_ids: Vec::with_capacity(total),
        position_ids: Vec::with_capacity(total),
        response_start: None,
        kept_turns: turns.len() - first,
    };
    let bos_speaker = turns
        .get(first)
        .or(response)
        .map(|t| speaker_id(t.speaker()))
        .unwrap_or(SPEAKER_WIZARD);
    seq.push(BOS, bos_speaker, 0);
    for (k, (turn, ids)) in turns[first..].iter().zip(&words[first..]).enumerate() {
        let spk = speaker_id(turn.speaker());
        for &id in ids {
            seq.push(id, spk, clip(k));
        }
        seq.push(SEP, spk, clip(k));
    }
    if let (Some(resp), Some(ids)) = (response, resp_words) {
        let spk = speaker_id(resp.speaker());
        let k = clip(seq.kept_turns);
        seq.response_start = Some(seq.len());
        for id in ids {
            seq.push(id, spk, k);
        }
        seq.push(EOS, spk, k);
    }
    Ok(seq)
}

/// Maps ids back to text, dropping specials.
pub fn decode(token_ids: &[usize], vocab: &Vocab) -> Result<String, TokenizerError> {
    let mut words = Vec::with_capacity(token_ids.len());
    for &id in token_ids {
        let tok = vocab.token(id).ok_or(TokenizerError::IdOutOfRange { id, size: vocab.len() })?;
        if !is_special(id) {
            words.push(tok);
        }
    }
    Ok(words.join(" "))
}
