//! Multi-domain goal-oriented dialogues: data model, newline-delimited file
//! format, adaptation-instance construction and a synthetic generator.

mod instances;
mod synthetic;

pub use instances::{
    make_instances, AdaptationInstance, InstanceConfig, InstanceRecord, InstanceSet,
    InstanceSummary, Mode, SkipReason, TargetPositions, DEFAULT_CONTEXT_WINDOW,
};
pub use synthetic::{gen_synthetic_corpus, SyntheticSpec};

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record, field `{field}`: {message}")]
    Malformed {
        line: usize,
        field: String,
        message: String,
    },
    #[error("{} invalid record(s): {}", .0.len(), render_diagnostics(.0))]
    InvalidRecords(Vec<RecordDiagnostic>),
    #[error("corpus is empty")]
    Empty,
    #[error("duplicate dialogue id `{0}`")]
    DuplicateId(String),
    #[error("invalid dialogue `{id}`: {reason}")]
    InvalidDialogue { id: String, reason: String },
    #[error("turn text is empty after whitespace normalization")]
    EmptyTurn,
    #[error("unknown speaker label `{0}`")]
    UnknownSpeaker(String),
    #[error("invalid synthetic corpus spec: {0}")]
    InvalidSpec(String),
    #[error("invalid instance config: {0}")]
    InvalidInstanceConfig(String),
    #[error("no eligible target turns for {mode} instances ({skipped} skipped)")]
    NoEligibleTargets { mode: Mode, skipped: usize },
    #[error("unknown dialogue id `{0}`")]
    UnknownDialogue(String),
}

fn render_diagnostics(diags: &[RecordDiagnostic]) -> String {
    diags
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// Why a single record in a corpus file was rejected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordDiagnostic {
    pub line: usize,
    pub id: String,
    pub reason: String,
}

impl fmt::Display for RecordDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {} (dialogue `{}`): {}", self.line, self.id, self.reason)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Speaker {
    User,
    Wizard,
}

impl Speaker {
    pub fn label(self) -> &'static str {
        match self {
            Speaker::User => "User",
            Speaker::Wizard => "Wizard",
        }
    }

    pub fn parse(label: &str) -> Result<Self, CorpusError> {
        match label {
            "User" => Ok(Speaker::User),
            "Wizard" => Ok(Speaker::Wizard),
            other => Err(CorpusError::UnknownSpeaker(other.to_string())),
        }
    }

    pub fn other(self) -> Self {
        match self {
            Speaker::User => Speaker::Wizard,
            Speaker::Wizard => Speaker::User,
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Collapses whitespace runs to single spaces and trims both ends.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// One utterance. The text is whitespace-normalized and never empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Turn {
    speaker: Speaker,
    text: String,
}

impl Turn {
    pub fn new(speaker: Speaker, text: &str) -> Result<Self, CorpusError> {
        let text = normalize_whitespace(text);
        if text.is_empty() {
            return Err(CorpusError::EmptyTurn);
        }
        Ok(Turn { speaker, text })
    }

    pub fn user(text: &str) -> Result<Self, CorpusError> {
        Turn::new(Speaker::User, text)
    }

    pub fn wizard(text: &str) -> Result<Self, CorpusError> {
        Turn::new(Speaker::Wizard, text)
    }

    pub fn speaker(&self) -> Speaker {
        self.speaker
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub domain: String,
    pub task: String,
    turns: Vec<Turn>,
}

impl Dialogue {
    /// Builds a dialogue, enforcing that it opens with the wizard and that
    /// speakers strictly alternate.
    pub fn new(id: &str, domain: &str, task: &str, turns: Vec<Turn>) -> Result<Self, CorpusError> {
        let invalid = |reason: String| CorpusError::InvalidDialogue {
            id: id.to_string(),
            reason,
        };
        if id.is_empty() {
            return Err(invalid("empty id".into()));
        }
        let first = turns.first().ok_or_else(|| invalid("no turns".into()))?;
        if first.speaker != Speaker::Wizard {
            return Err(invalid(format!(
                "first turn must be spoken by Wizard, found {}",
                first.speaker
            )));
        }
        if let Some(i) = turns.windows(2).position(|w| w[0].speaker == w[1].speaker) {
            return Err(invalid(format!(
                "speakers do not alternate at turns {} and {} (both {})",
                i,
                i + 1,
                turns[i].speaker
            )));
        }
        Ok(Dialogue {
            id: id.to_string(),
            domain: domain.to_string(),
            task: task.to_string(),
            turns,
        })
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }
}

/// An immutable set of dialogues with a (domain, task) index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    dialogues: Vec<Dialogue>,
    index: BTreeMap<(String, String), Vec<usize>>,
}

impl Corpus {
    pub fn new(dialogues: Vec<Dialogue>) -> Result<Self, CorpusError> {
        if dialogues.is_empty() {
            return Err(CorpusError::Empty);
        }
        let mut seen = HashSet::new();
        let mut index: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
        for (i, d) in dialogues.iter().enumerate() {
            if !seen.insert(d.id.as_str()) {
                return Err(CorpusError::DuplicateId(d.id.clone()));
            }
            index
                .entry((d.domain.clone(), d.task.clone()))
                .or_default()
                .push(i);
        }
        Ok(Corpus { dialogues, index })
    }

    pub fn dialogues(&self) -> &[Dialogue] {
        &self.dialogues
    }

    pub fn len(&self) -> usize {
        self.dialogues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogues.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Dialogue> {
        self.dialogues.iter().find(|d| d.id == id)
    }

    /// (domain, task) keys in sorted order.
    pub fn keys(&self) -> impl Iterator<Item = &(String, String)> {
        self.index.keys()
    }

    pub fn ids_for(&self, domain: &str, task: &str) -> Vec<&str> {
        self.index
            .get(&(domain.to_string(), task.to_string()))
            .map(|ix| ix.iter().map(|&i| self.dialogues[i].id.as_str()).collect())
            .unwrap_or_default()
    }

    pub fn domains(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.index.keys().map(|(d, _)| d.as_str()).collect();
        out.dedup();
        out
    }

    /// Keeps only dialogues satisfying `keep`; errors when nothing remains.
    pub fn filter(&self, keep: impl Fn(&Dialogue) -> bool) -> Result<Corpus, CorpusError> {
        Corpus::new(self.dialogues.iter().filter(|d| keep(d)).cloned().collect())
    }
}

#[derive(Serialize, Deserialize)]
struct Record<'a> {
    id: &'a str,
    domain: &'a str,
    task: &'a str,
    turns: Vec<(&'a str, &'a str)>,
}

fn dialogue_to_line(d: &Dialogue) -> String {
    let rec = Record {
        id: &d.id,
        domain: &d.domain,
        task: &d.task,
        turns: d
            .turns
            .iter()
            .map(|t| (t.speaker.label(), t.text.as_str()))
            .collect(),
    };
    serde_json::to_string(&rec).expect("corpus records always serialize")
}

/// Serializes a corpus: one record per line, keys in the order
/// id, domain, task, turns.
pub fn corpus_to_string(corpus: &Corpus) -> String {
    let mut out = String::new();
    for d in &corpus.dialogues {
        out.push_str(&dialogue_to_line(d));
        out.push('\n');
    }
    out
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    std::fs::write(path, corpus_to_string(corpus)).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(&text)
}

fn field_str<'v>(obj: &'v serde_json::Map<String, Value>, line: usize, key: &str) -> Result<&'v str, CorpusError> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(CorpusError::Malformed {
            line,
            field: key.into(),
            message: "expected a string".into(),
        }),
        None => Err(CorpusError::Malformed {
            line,
            field: key.into(),
            message: "missing".into(),
        }),
    }
}

/// Parses newline-delimited corpus records. Blank lines and lines starting
/// with `#` are ignored. Structurally malformed lines abort immediately;
/// records that parse but violate dialogue invariants are all collected
/// and reported together.
pub fn parse_corpus(text: &str) -> Result<Corpus, CorpusError> {
    let mut dialogues = Vec::new();
    let mut diagnostics = Vec::new();
    let mut seen_ids = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let value: Value = serde_json::from_str(trimmed).map_err(|e| CorpusError::Malformed {
            line,
            field: "<record>".into(),
            message: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| CorpusError::Malformed {
            line,
            field: "<record>".into(),
            message: "expected an object".into(),
        })?;
        let id = field_str(obj, line, "id")?;
        let domain = field_str(obj, line, "domain")?;
        let task = field_str(obj, line, "task")?;
        let raw_turns = match obj.get("turns") {
            Some(Value::Array(a)) => a,
            Some(_) => {
                return Err(CorpusError::Malformed {
                    line,
                    field: "turns".into(),
                    message: "expected an array of [speaker, text] pairs".into(),
                })
            }
            None => {
                return Err(CorpusError::Malformed {
                    line,
                    field: "turns".into(),
                    message: "missing".into(),
                })
            }
        };
        let mut turns = Vec::with_capacity(raw_turns.len());
        let mut reject = None;
        for (k, t) in raw_turns.iter().enumerate() {
            let pair = t.as_array().filter(|p| p.len() == 2);
            let (spk, txt) = match pair.map(|p| (p[0].as_str(), p[1].as_str())) {
                Some((Some(s), Some(x))) => (s, x),
                _ => {
                    return Err(CorpusError::Malformed {
                        line,
                        field: format!("turns[{k}]"),
                        message: "expected [speaker, text]".into(),
                    })
                }
            };
            let speaker = Speaker::parse(spk).map_err(|e| CorpusError::Malformed {
                line,
                field: format!("turns[{k}][0]"),
                message: e.to_string(),
            })?;
            match Turn::new(speaker, txt) {
                Ok(turn) => turns.push(turn),
                Err(e) => {
                    reject.get_or_insert(format!("turn {k}: {e}"));
                }
            }
        }
        if let Some(reason) = reject {
            diagnostics.push(RecordDiagnostic {
                line,
                id: id.to_string(),
                reason,
            });
            continue;
        }
        if !seen_ids.insert(id.to_string()) {
            diagnostics.push(RecordDiagnostic {
                line,
                id: id.to_string(),
                reason: "duplicate id".into(),
            });
            continue;
        }
        match Dialogue::new(id, domain, task, turns) {
            Ok(d) => dialogues.push(d),
            Err(CorpusError::InvalidDialogue { reason, .. }) => diagnostics.push(RecordDiagnostic {
                line,
                id: id.to_string(),
                reason,
            }),
            Err(e) => return Err(e),
        }
    }
    if !diagnostics.is_empty() {
        return Err(CorpusError::InvalidRecords(diagnostics));
    }
    Corpus::new(dialogues)
}
