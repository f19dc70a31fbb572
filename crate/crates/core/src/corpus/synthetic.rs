use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, Dialogue, Speaker, Turn};
use crate::seed;

/// Shape of a generated corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_domains: usize,
    pub tasks_per_domain: usize,
    pub dialogues_per_task: usize,
    pub turns_per_dialogue: usize,
    pub vocab_per_domain: usize,
}

impl SyntheticSpec {
    pub fn new(
        n_domains: usize,
        tasks_per_domain: usize,
        dialogues_per_task: usize,
        turns_per_dialogue: usize,
        vocab_per_domain: usize,
    ) -> Self {
        SyntheticSpec {
            n_domains,
            tasks_per_domain,
            dialogues_per_task,
            turns_per_dialogue,
            vocab_per_domain,
        }
    }

    fn validate(&self) -> Result<(), CorpusError> {
        let counts = [
            ("n_domains", self.n_domains),
            ("tasks_per_domain", self.tasks_per_domain),
            ("dialogues_per_task", self.dialogues_per_task),
            ("turns_per_dialogue", self.turns_per_dialogue),
            ("vocab_per_domain", self.vocab_per_domain),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(CorpusError::InvalidSpec(format!("{name} must be at least 1")));
        }
        if self.turns_per_dialogue < 4 || self.turns_per_dialogue % 2 != 0 {
            return Err(CorpusError::InvalidSpec(format!(
                "turns_per_dialogue must be even and at least 4, got {}",
                self.turns_per_dialogue
            )));
        }
        Ok(())
    }
}

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

fn pseudo_word(rng: &mut seed::Rng) -> String {
    let syllables = rng.random_range(2..=3);
    (0..syllables)
        .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
        .collect()
}

struct TaskLexicon<'a> {
    task_words: Vec<&'a str>,
    domain_words: &'a [String],
}

impl TaskLexicon<'_> {
    /// Mostly task words, occasionally any word of the domain.
    fn pick(&self, rng: &mut seed::Rng) -> String {
        if rng.random_bool(0.85) {
            self.task_words.choose(rng).unwrap().to_string()
        } else {
            self.domain_words.choose(rng).unwrap().clone()
        }
    }
}

const GREETING: &str = "Hello how may I help you ?";

fn gen_dialogue(lex: &TaskLexicon<'_>, n_turns: usize, rng: &mut seed::Rng) -> Vec<(Speaker, String)> {
    let mut turns = Vec::with_capacity(n_turns);
    turns.push((Speaker::Wizard, GREETING.to_string()));
    turns.push((
        Speaker::User,
        format!("hi I need help with {} {}", lex.pick(rng), lex.pick(rng)),
    ));
    // one phrasing style per dialogue: question form and matching answer form
    let style = rng.random_range(0..3);
    while turns.len() < n_turns - 2 {
        let slot = lex.pick(rng);
        let value = lex.pick(rng);
        let (ask, answer) = match style {
            0 => (
                format!("which {slot} would you like ?"),
                format!("I would like {value} {slot} please"),
            ),
            1 => (
                format!("do you want {slot} or {} ?", lex.pick(rng)),
                format!("{value} {slot} is fine"),
            ),
            _ => (format!("what about the {slot} ?"), format!("make it {value} {slot}")),
        };
        turns.push((Speaker::Wizard, ask));
        turns.push((Speaker::User, answer));
    }
    let item = lex.pick(rng);
    turns.push((Speaker::Wizard, format!("shall I book the {item} for you ?")));
    let closing = if rng.random_bool(0.7) {
        "yes book it please"
    } else {
        "no thank you that is all"
    };
    turns.push((Speaker::User, closing.to_string()));
    turns
}

/// Generates a deterministic multi-domain corpus.
///
/// Each domain owns a pool of pseudo-words and each task a slice of that
/// pool; utterances are templated exchanges that mostly draw from their
/// task's words, so same-task dialogues are lexically closer than
/// cross-task ones, and cross-domain dialogues share only template words.
pub fn gen_synthetic_corpus(spec: &SyntheticSpec, rng_seed: u64) -> Result<Corpus, CorpusError> {
    spec.validate()?;
    let mut rng = seed::rng(rng_seed);
    let mut used: HashSet<String> = HashSet::new();
    let mut dialogues = Vec::new();
    for d in 0..spec.n_domains {
        let mut pool = Vec::with_capacity(spec.vocab_per_domain);
        while pool.len() < spec.vocab_per_domain {
            let w = pseudo_word(&mut rng);
            if used.insert(w.clone()) {
                pool.push(w);
            }
        }
        let domain = format!("dom{d}");
        for t in 0..spec.tasks_per_domain {
            let mut task_words: Vec<&str> = pool
                .iter()
                .enumerate()
                .filter(|(i, _)| i % spec.tasks_per_domain == t)
                .map(|(_, w)| w.as_str())
                .collect();
            if task_words.is_empty() {
                task_words.push(&pool[t % pool.len()]);
            }
            let lex = TaskLexicon {
                task_words,
                domain_words: &pool,
            };
            let task = format!("{domain}_task{t}");
            for k in 0..spec.dialogues_per_task {
                let turns = gen_dialogue(&lex, spec.turns_per_dialogue, &mut rng)
                    .into_iter()
                    .map(|(s, text)| Turn::new(s, &text))
                    .collect::<Result<Vec<_>, _>>()?;
                let id = format!("{domain}-t{t}-{k:03}");
                dialogues.push(Dialogue::new(&id, &domain, &task, turns)?);
            }
        }
    }
    Corpus::new(dialogues)
}
