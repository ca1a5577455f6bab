//! Rational-inference decoding: a goal is consistent with a demonstration if
//! some start cell makes every observed action optimal.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::env::{Action, Cell, GridConfig, Message, State};
use crate::error::{domain, Result};
use crate::planner::QTable;

/// Ground truth attached to a demonstration for evaluation only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Oracle {
    pub start: Cell,
    pub goal: Cell,
}

/// One observed episode: the message sent and the listener's actions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Demonstration {
    pub message: Message,
    pub actions: Vec<Action>,
    pub terminated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<Oracle>,
}

impl Demonstration {
    /// Checks the length bound and, when ground truth is attached, that the
    /// replay agrees with the `terminated` flag.
    pub fn validate(&self, config: &GridConfig) -> Result<()> {
        if self.actions.len() > config.horizon {
            return Err(domain(format!(
                "demonstration has {} actions, horizon is {}",
                self.actions.len(),
                config.horizon
            )));
        }
        if self.message.symbol() >= config.message_alphabet_size {
            return Err(domain(format!(
                "message {} outside alphabet of size {}",
                self.message.symbol(),
                config.message_alphabet_size
            )));
        }
        if let Some(oracle) = self.oracle {
            let mut state = State::new(oracle.start, oracle.goal);
            config.check_state(state)?;
            let mut ended = state.is_terminal();
            if ended {
                return Err(domain("demonstration starts on its goal"));
            }
            for (t, &a) in self.actions.iter().enumerate() {
                if ended {
                    return Err(domain(format!("demonstration continues after termination at step {t}")));
                }
                let out = config.step(state, a)?;
                state = out.next_state;
                ended = out.terminated;
            }
            if ended != self.terminated {
                return Err(domain(format!(
                    "replay termination {ended} disagrees with the recorded flag {}",
                    self.terminated
                )));
            }
        }
        Ok(())
    }
}

/// (start, goal) hypotheses that explain an action sequence.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConsistencySet {
    pub pairs: BTreeSet<(Cell, Cell)>,
    /// Set when the action list was empty and nothing was filtered.
    pub vacuous: bool,
}

impl ConsistencySet {
    pub fn goals(&self) -> BTreeSet<Cell> {
        self.pairs.iter().map(|&(_, g)| g).collect()
    }

    pub fn starts(&self) -> BTreeSet<Cell> {
        self.pairs.iter().map(|&(s, _)| s).collect()
    }
}

/// Every (start, goal) pair, start != goal, under which each action is greedy
/// in the state where it was taken and the goal is reached exactly at the end
/// (if `terminated`) or never (otherwise).
pub fn consistent_pairs(
    actions: &[Action],
    terminated: bool,
    q: &QTable,
    config: &GridConfig,
) -> Result<ConsistencySet> {
    if actions.len() > config.horizon {
        return Err(domain(format!(
            "{} actions exceed the horizon of {}",
            actions.len(),
            config.horizon
        )));
    }
    if q.config() != config {
        return Err(domain("Q-table was computed for a different grid"));
    }
    let vacuous = actions.is_empty();
    if vacuous {
        warn!("empty action list carries no evidence; every start/goal pair is consistent");
    }
    let mut pairs = BTreeSet::new();
    for state in config.start_states() {
        if explains(actions, terminated, q, config, state)? {
            pairs.insert((state.listener, state.goal));
        }
    }
    Ok(ConsistencySet { pairs, vacuous })
}

fn explains(actions: &[Action], terminated: bool, q: &QTable, config: &GridConfig, start: State) -> Result<bool> {
    let mut state = start;
    for (t, &a) in actions.iter().enumerate() {
        if state.is_terminal() || !q.is_greedy(state, a)? {
            return Ok(false);
        }
        state = config.step(state, a)?.next_state;
        if state.is_terminal() && t + 1 < actions.len() {
            return Ok(false);
        }
    }
    Ok(state.is_terminal() == terminated)
}

/// Findings that [`decode_dataset`] reports instead of dropping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Diagnostic {
    /// No goal explains every demonstration of this message.
    EmptyIntersection { message: Message, demos: usize },
    /// A demonstration with no actions contributed nothing.
    VacuousEvidence { message: Message, index: usize },
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Diagnostic::EmptyIntersection { message, demos } => write!(
                f,
                "message {message}: no goal is consistent with all {demos} demonstrations (irrational demonstrator or model mismatch)"
            ),
            Diagnostic::VacuousEvidence { message, index } => {
                write!(f, "message {message}: demonstration {index} has no actions")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DecodedGoals {
    pub goals: BTreeMap<Message, BTreeSet<Cell>>,
    pub support: BTreeMap<Message, usize>,
    pub diagnostics: Vec<Diagnostic>,
}

impl DecodedGoals {
    /// `{"<symbol>": [[x,y],...]}`
    pub fn to_json(&self) -> Result<String> {
        let map: BTreeMap<String, Vec<Cell>> = self
            .goals
            .iter()
            .map(|(m, cells)| (m.symbol().to_string(), cells.iter().copied().collect()))
            .collect();
        let mut text = serde_json::to_string_pretty(&map)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<BTreeMap<Message, BTreeSet<Cell>>> {
        let map: BTreeMap<String, Vec<Cell>> = serde_json::from_str(text)?;
        map.into_iter()
            .map(|(k, v)| {
                let symbol = k
                    .parse::<usize>()
                    .map_err(|_| crate::Error::Parse(format!("message key {k:?} is not a symbol")))?;
                Ok((Message(symbol), v.into_iter().collect()))
            })
            .collect()
    }

    pub fn table(&self) -> String {
        let mut out = String::from("message  demos  goals\n");
        for (m, cells) in &self.goals {
            let list: Vec<String> = cells.iter().map(|c| c.to_string()).collect();
            let shown = if list.is_empty() { "(none)".to_string() } else { list.join(" ") };
            let _ = writeln!(out, "{:>7}  {:>5}  {}", m.symbol(), self.support[m], shown);
        }
        for d in &self.diagnostics {
            let _ = writeln!(out, "warning: {d}");
        }
        out
    }
}

/// Intersects the goal sets of all demonstrations sharing a message.
/// Ground-truth fields of the demonstrations are ignored.
pub fn decode_dataset(demos: &[Demonstration], q: &QTable, config: &GridConfig) -> Result<DecodedGoals> {
    let mut cache: BTreeMap<(Vec<Action>, bool), BTreeSet<Cell>> = BTreeMap::new();
    let mut out = DecodedGoals::default();
    for (index, demo) in demos.iter().enumerate() {
        let key = (demo.actions.clone(), demo.terminated);
        let goals = match cache.get(&key) {
            Some(g) => g,
            None => {
                let g = consistent_pairs(&demo.actions, demo.terminated, q, config)?.goals();
                cache.entry(key).or_insert(g)
            }
        };
        if demo.actions.is_empty() {
            out.diagnostics.push(Diagnostic::VacuousEvidence {
                message: demo.message,
                index,
            });
        }
        *out.support.entry(demo.message).or_insert(0) += 1;
        out.goals
            .entry(demo.message)
            .and_modify(|acc| acc.retain(|c| goals.contains(c)))
            .or_insert_with(|| goals.clone());
    }
    for (m, cells) in &out.goals {
        if cells.is_empty() {
            out.diagnostics.push(Diagnostic::EmptyIntersection {
                message: *m,
                demos: out.support[m],
            });
        }
    }
    for d in &out.diagnostics {
        warn!("{d}");
    }
    Ok(out)
}
