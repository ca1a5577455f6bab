//! Demonstrator corpora: a fixed goal-to-message code and rollouts of a
//! (tempered) optimal listener.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::env::{Cell, GridConfig, Message, State};
use crate::error::{domain, Error, Result};
use crate::exact_decoder::{Demonstration, Oracle};
use crate::planner::QTable;
use crate::rng::{child, seeded};

/// Injective goal-cell to message code. Serialised as
/// `{"seed":42,"map":{"x,y":symbol,...}}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageMapping {
    pub seed: u64,
    map: BTreeMap<Cell, Message>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MappingFile {
    seed: u64,
    map: BTreeMap<String, usize>,
}

impl MessageMapping {
    pub fn from_map(seed: u64, map: BTreeMap<Cell, Message>) -> Result<Self> {
        let mut used = std::collections::BTreeSet::new();
        for m in map.values() {
            if !used.insert(*m) {
                return Err(domain(format!("message {m} assigned to two goals")));
            }
        }
        Ok(Self { seed, map })
    }

    pub fn message(&self, goal: Cell) -> Result<Message> {
        self.map
            .get(&goal)
            .copied()
            .ok_or_else(|| domain(format!("goal {goal} has no message")))
    }

    pub fn goal(&self, message: Message) -> Option<Cell> {
        self.map.iter().find(|(_, &m)| m == message).map(|(&c, _)| c)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Cell, Message)> + '_ {
        self.map.iter().map(|(&c, &m)| (c, m))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = MappingFile {
            seed: self.seed,
            map: self
                .map
                .iter()
                .map(|(c, m)| (format!("{},{}", c.x, c.y), m.symbol()))
                .collect(),
        };
        Ok(serde_json::to_string(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MappingFile = serde_json::from_str(text)?;
        let mut map = BTreeMap::new();
        for (key, symbol) in file.map {
            let cell = key
                .split_once(',')
                .and_then(|(x, y)| Some(Cell::new(x.trim().parse().ok()?, y.trim().parse().ok()?)))
                .ok_or_else(|| Error::Parse(format!("mapping key {key:?} is not \"x,y\"")))?;
            map.insert(cell, Message(symbol));
        }
        Self::from_map(file.seed, map)
    }
}

/// Uniformly random injection from goal cells into the alphabet.
pub fn assign_messages(config: &GridConfig, seed: u64) -> Result<MessageMapping> {
    config.validate()?;
    let cells = config.num_cells();
    if config.message_alphabet_size < cells {
        return Err(domain(format!(
            "an alphabet of {} symbols cannot name {cells} goal cells uniquely",
            config.message_alphabet_size
        )));
    }
    let mut symbols: Vec<usize> = (0..config.message_alphabet_size).collect();
    symbols.shuffle(&mut seeded(seed));
    let map = config.cells().zip(symbols).map(|(c, s)| (c, Message(s))).collect();
    MessageMapping::from_map(seed, map)
}

/// Everything needed to regenerate a [`DemoDataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoMetadata {
    pub seed: u64,
    pub mapping_seed: u64,
    pub policy_id: String,
    pub temperature: f64,
    pub count: usize,
    pub attempts: usize,
    pub discarded_immediate: usize,
    pub discarded_unterminated: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset {
    pub metadata: DemoMetadata,
    pub demos: Vec<Demonstration>,
}

impl DemoDataset {
    pub fn to_jsonl(&self) -> Result<String> {
        demos_to_jsonl(&self.demos)
    }
}

pub fn demos_to_jsonl(demos: &[Demonstration]) -> Result<String> {
    let mut out = String::new();
    for d in demos {
        out.push_str(&serde_json::to_string(d)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn demos_from_jsonl(text: &str) -> Result<Vec<Demonstration>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse(format!("demo line {}: {e}", i + 1))))
        .collect()
}

/// Outcome of one attempted episode.
pub(crate) enum Episode {
    Kept(Demonstration),
    Immediate,
    Unterminated,
}

/// Rolls out one episode from `start` with actions from `q` at `temperature`.
pub(crate) fn roll_episode<R: rand::Rng + ?Sized>(
    q: &QTable,
    mapping: &MessageMapping,
    temperature: f64,
    start: State,
    rng: &mut R,
) -> Result<Episode> {
    let config = q.config();
    if start.is_terminal() {
        return Ok(Episode::Immediate);
    }
    let mut state = start;
    let mut actions = Vec::with_capacity(config.horizon);
    let mut terminated = false;
    while actions.len() < config.horizon {
        let a = q.sample_action(state, temperature, rng)?;
        let out = config.step(state, a)?;
        actions.push(a);
        state = out.next_state;
        if out.terminated {
            terminated = true;
            break;
        }
    }
    if !terminated {
        return Ok(Episode::Unterminated);
    }
    Ok(Episode::Kept(Demonstration {
        message: mapping.message(start.goal)?,
        actions,
        terminated,
        oracle: Some(Oracle {
            start: start.listener,
            goal: start.goal,
        }),
    }))
}

/// Exactly `count` terminating episodes from uniformly drawn start states.
/// Episode `k` uses its own random stream, so the corpus is a pure function of
/// the arguments.
pub fn generate_demos(
    q: &QTable,
    mapping: &MessageMapping,
    count: usize,
    temperature: f64,
    seed: u64,
    policy_id: &str,
) -> Result<DemoDataset> {
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(domain(format!("temperature must be nonnegative, got {temperature}")));
    }
    let config = q.config();
    let mut demos = Vec::with_capacity(count);
    let mut unterminated = 0usize;
    let mut attempts = 0usize;
    while demos.len() < count {
        if attempts >= 1000 && unterminated * 100 > attempts * 99 {
            return Err(Error::TrainingFailure(format!(
                "demonstrator at temperature {temperature} failed to terminate in {unterminated} of {attempts} episodes"
            )));
        }
        let mut rng = child(seed, attempts as u64);
        attempts += 1;
        let start = config.sample_initial(&mut rng)?;
        match roll_episode(q, mapping, temperature, start, &mut rng)? {
            Episode::Kept(d) => demos.push(d),
            Episode::Unterminated => unterminated += 1,
            Episode::Immediate => unreachable!("sample_initial never starts on the goal"),
        }
    }
    Ok(DemoDataset {
        metadata: DemoMetadata {
            seed,
            mapping_seed: mapping.seed,
            policy_id: policy_id.to_string(),
            temperature,
            count,
            attempts,
            discarded_immediate: 0,
            discarded_unterminated: unterminated,
        },
        demos,
    })
}

/// Episode-length histogram predicted for a greedy demonstrator: the
/// Manhattan-distance distribution of uniform start/goal pairs.
pub fn distance_distribution(config: &GridConfig) -> BTreeMap<usize, f64> {
    let mut counts = BTreeMap::new();
    let mut total = 0usize;
    for s in config.start_states() {
        *counts.entry(s.distance()).or_insert(0usize) += 1;
        total += 1;
    }
    counts.into_iter().map(|(d, c)| (d, c as f64 / total as f64)).collect()
}
