use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, Dialogue, Speaker, Turn};
use crate::seed;

/// Number of turns kept in a target context (bot-user-bot-user-bot).
pub const DEFAULT_CONTEXT_WINDOW: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    /// Support shares domain and task with the target.
    PureTask,
    /// Support shares the domain but not the task.
    CrossTask,
}

impl Mode {
    pub fn short(self) -> &'static str {
        match self {
            Mode::PureTask => "pure",
            Mode::CrossTask => "cross",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pure" | "pure-task" | "PureTask" => Ok(Mode::PureTask),
            "cross" | "cross-task" | "CrossTask" => Ok(Mode::CrossTask),
            other => Err(format!("unknown mode `{other}` (expected pure or cross)")),
        }
    }
}

/// Which user turns of a target dialogue become prediction targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TargetPositions {
    #[default]
    AllUserTurns,
    FinalTurnOnly,
}

#[derive(Debug, Clone)]
pub struct InstanceConfig {
    pub mode: Mode,
    pub support_size: usize,
    pub context_window: usize,
    pub seed: u64,
    pub targets: TargetPositions,
}

impl InstanceConfig {
    pub fn new(mode: Mode, support_size: usize, seed: u64) -> Self {
        InstanceConfig {
            mode,
            support_size,
            context_window: DEFAULT_CONTEXT_WINDOW,
            seed,
            targets: TargetPositions::AllUserTurns,
        }
    }
}

/// One prediction problem: a truncated target context, the gold next user
/// turn and the support dialogues available for adaptation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdaptationInstance {
    pub id: String,
    pub target_id: String,
    pub domain: String,
    pub task: String,
    /// Index of the gold turn inside the target dialogue; also the length
    /// of the untruncated context.
    pub turn_index: usize,
    pub target_context: Vec<Turn>,
    pub gold_response: Turn,
    pub support: Vec<Dialogue>,
    pub mode: Mode,
}

impl AdaptationInstance {
    pub fn instance_id(target_id: &str, turn_index: usize, mode: Mode) -> String {
        format!("{target_id}/{turn_index}/{mode}")
    }

    pub fn to_record(&self) -> InstanceRecord {
        InstanceRecord {
            id: self.id.clone(),
            target_id: self.target_id.clone(),
            domain: self.domain.clone(),
            task: self.task.clone(),
            mode: self.mode,
            turn_index: self.turn_index,
            target_context: self
                .target_context
                .iter()
                .map(|t| (t.speaker().label().to_string(), t.text().to_string()))
                .collect(),
            gold_response: self.gold_response.text().to_string(),
            support_ids: self.support.iter().map(|d| d.id.clone()).collect(),
        }
    }

    /// Rebuilds an instance from its record, resolving support ids.
    pub fn from_record(rec: &InstanceRecord, corpus: &Corpus) -> Result<Self, CorpusError> {
        let target_context = rec
            .target_context
            .iter()
            .map(|(s, t)| Turn::new(Speaker::parse(s)?, t))
            .collect::<Result<Vec<_>, _>>()?;
        let support = rec
            .support_ids
            .iter()
            .map(|id| {
                corpus
                    .get(id)
                    .cloned()
                    .ok_or_else(|| CorpusError::UnknownDialogue(id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(AdaptationInstance {
            id: rec.id.clone(),
            target_id: rec.target_id.clone(),
            domain: rec.domain.clone(),
            task: rec.task.clone(),
            turn_index: rec.turn_index,
            target_context,
            gold_response: Turn::user(&rec.gold_response)?,
            support,
            mode: rec.mode,
        })
    }
}

/// Serialized form of an instance: support dialogues by id only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: String,
    pub target_id: String,
    pub domain: String,
    pub task: String,
    pub mode: Mode,
    pub turn_index: usize,
    pub target_context: Vec<(String, String)>,
    pub gold_response: String,
    pub support_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipReason {
    PoolTooSmall,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SummaryRow {
    pub produced: usize,
    pub skipped: usize,
}

/// Instances produced and skipped per (domain, task, mode).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InstanceSummary {
    pub rows: BTreeMap<(String, String, Mode), SummaryRow>,
}

impl InstanceSummary {
    pub fn produced(&self) -> usize {
        self.rows.values().map(|r| r.produced).sum()
    }

    pub fn skipped(&self) -> usize {
        self.rows.values().map(|r| r.skipped).sum()
    }

    pub fn render(&self) -> String {
        let mut out = format!("{:<20} {:<28} {:<6} {:>9} {:>8}\n", "domain", "task", "mode", "produced", "skipped");
        for ((domain, task, mode), row) in &self.rows {
            out.push_str(&format!(
                "{:<20} {:<28} {:<6} {:>9} {:>8}\n",
                domain, task, mode, row.produced, row.skipped
            ));
        }
        out.push_str(&format!(
            "{:<20} {:<28} {:<6} {:>9} {:>8}\n",
            "TOTAL",
            "",
            "",
            self.produced(),
            self.skipped()
        ));
        out
    }
}

#[derive(Debug, Clone)]
pub struct InstanceSet {
    pub instances: Vec<AdaptationInstance>,
    pub summary: InstanceSummary,
}

fn pool<'c>(corpus: &'c Corpus, target: &Dialogue, mode: Mode) -> Vec<&'c Dialogue> {
    corpus
        .dialogues()
        .iter()
        .filter(|d| d.id != target.id && d.domain == target.domain)
        .filter(|d| match mode {
            Mode::PureTask => d.task == target.task,
            Mode::CrossTask => d.task != target.task,
        })
        .collect()
}

/// Builds one instance per eligible (dialogue, user turn) pair.
///
/// Support dialogues are sampled uniformly without replacement from the
/// mode's pool with a seed derived from (seed, target id, turn index).
/// Targets whose pool is smaller than `support_size` are skipped and
/// counted in the summary.
pub fn make_instances(corpus: &Corpus, cfg: &InstanceConfig) -> Result<InstanceSet, CorpusError> {
    if cfg.support_size == 0 {
        return Err(CorpusError::InvalidInstanceConfig("support_size must be positive".into()));
    }
    if cfg.context_window == 0 {
        return Err(CorpusError::InvalidInstanceConfig("context_window must be positive".into()));
    }
    let mut instances = Vec::new();
    let mut summary = InstanceSummary::default();
    for target in corpus.dialogues() {
        let row = summary
            .rows
            .entry((target.domain.clone(), target.task.clone(), cfg.mode))
            .or_default();
        let candidates = pool(corpus, target, cfg.mode);
        let positions: Vec<usize> = target
            .turns()
            .iter()
            .enumerate()
            .filter(|(i, t)| *i >= 1 && t.speaker() == Speaker::User)
            .map(|(i, _)| i)
            .collect();
        let positions = match cfg.targets {
            TargetPositions::AllUserTurns => positions,
            TargetPositions::FinalTurnOnly => positions.last().copied().into_iter().collect(),
        };
        for turn_index in positions {
            if candidates.len() < cfg.support_size {
                row.skipped += 1;
                continue;
            }
            let inst_seed = seed::derive_seed(cfg.seed, &[&target.id, &turn_index.to_string()]);
            let mut rng = seed::rng(inst_seed);
            let mut support: Vec<Dialogue> = candidates
                .choose_multiple(&mut rng, cfg.support_size)
                .map(|d| (*d).clone())
                .collect();
            support.sort_by(|a, b| a.id.cmp(&b.id));
            let start = turn_index.saturating_sub(cfg.context_window);
            instances.push(AdaptationInstance {
                id: AdaptationInstance::instance_id(&target.id, turn_index, cfg.mode),
                target_id: target.id.clone(),
                domain: target.domain.clone(),
                task: target.task.clone(),
                turn_index,
                target_context: target.turns()[start..turn_index].to_vec(),
                gold_response: target.turns()[turn_index].clone(),
                support,
                mode: cfg.mode,
            });
            row.produced += 1;
        }
    }
    if instances.is_empty() {
        return Err(CorpusError::NoEligibleTargets {
            mode: cfg.mode,
            skipped: summary.skipped(),
        });
    }
    Ok(InstanceSet { instances, summary })
}
