//! Strategic equivalence of factored joint policies on small communicating
//! decentralised control problems, and an exhaustive check that the optimal
//! policy set is a union of environment-level equivalence classes.
//!
//! Each agent `i` sees `z_i = O_i(s)`, emits a message `c_i = comm_i(z_i)`,
//! then picks an environment action `env_i(z_i, c_{-i})` from its observation
//! and everyone else's messages of the same step. Messages never enter the
//! transition function. Joint observations are the tuples `(O_1(s), ...)`
//! produced by some state.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, Cell, GridConfig, State};
use crate::error::{domain, usage, Error, Result};

/// Default enumeration cap for [`verify_optimal_union`].
pub const DEFAULT_POLICY_CAP: u128 = 1_000_000;

const RETURN_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub name: String,
    /// Observation index per state.
    pub observations: Vec<usize>,
    pub num_observations: usize,
    pub num_env_actions: usize,
    pub alphabet_size: usize,
}

/// Finite problem description. Joint environment actions are indexed in mixed
/// radix with agent 0 least significant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicroDecPomdpComm {
    pub num_states: usize,
    /// Initial-state distribution.
    pub initial: Vec<f64>,
    /// Absorbing states that end an episode.
    pub terminal: Vec<bool>,
    pub agents: Vec<AgentSpec>,
    /// `transition[state][joint env action]`
    pub transition: Vec<Vec<usize>>,
    /// `reward[state][joint env action]`
    pub reward: Vec<Vec<f64>>,
    pub horizon: usize,
}

/// Deterministic memoryless policy of one agent.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AgentPolicy {
    /// `env[obs * incoming + incoming_index]`
    pub env: Vec<usize>,
    /// `comm[obs]`
    pub comm: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FactoredJointPolicy {
    pub agents: Vec<AgentPolicy>,
}

/// What the speaker of a gridworld instance observes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeakerView {
    Goal,
    State,
}

impl MicroDecPomdpComm {
    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_states;
        if n == 0 {
            return Err(domain("instance needs at least one state"));
        }
        if self.agents.is_empty() {
            return Err(domain("instance needs at least one agent"));
        }
        if self.initial.len() != n || self.terminal.len() != n {
            return Err(domain("initial and terminal must have one entry per state"));
        }
        if self.initial.iter().any(|p| !(*p >= 0.0)) || (self.initial.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(domain("initial distribution must be nonnegative and sum to 1"));
        }
        for a in &self.agents {
            if a.observations.len() != n {
                return Err(domain(format!("agent {} needs one observation per state", a.name)));
            }
            if a.num_observations == 0 || a.num_env_actions == 0 || a.alphabet_size == 0 {
                return Err(domain(format!("agent {} has an empty observation, action or alphabet set", a.name)));
            }
            if let Some(&o) = a.observations.iter().find(|&&o| o >= a.num_observations) {
                return Err(domain(format!("agent {} observation {o} out of range", a.name)));
            }
        }
        let joint = self.joint_action_count();
        if self.transition.len() != n || self.reward.len() != n {
            return Err(domain("transition and reward need one row per state"));
        }
        for s in 0..n {
            if self.transition[s].len() != joint || self.reward[s].len() != joint {
                return Err(domain(format!("state {s} needs {joint} joint-action entries")));
            }
            if let Some(&t) = self.transition[s].iter().find(|&&t| t >= n) {
                return Err(domain(format!("state {s} transitions to unknown state {t}")));
            }
            if self.reward[s].iter().any(|r| !r.is_finite()) {
                return Err(domain(format!("state {s} has a non-finite reward")));
            }
        }
        Ok(())
    }

    pub fn joint_action_count(&self) -> usize {
        self.agents.iter().map(|a| a.num_env_actions).product()
    }

    /// Number of joint message combinations agent `i` can receive.
    pub fn incoming_count(&self, i: usize) -> usize {
        self.agents
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, a)| a.alphabet_size)
            .product()
    }

    fn incoming_index(&self, i: usize, messages: &[usize]) -> usize {
        let mut index = 0;
        let mut radix = 1;
        for (j, a) in self.agents.iter().enumerate() {
            if j != i {
                index += messages[j] * radix;
                radix *= a.alphabet_size;
            }
        }
        index
    }

    /// Joint observation of every state, in state order.
    pub fn joint_observation(&self, state: usize) -> Vec<usize> {
        self.agents.iter().map(|a| a.observations[state]).collect()
    }

    /// Distinct joint observations produced by some state.
    pub fn joint_observations(&self) -> Vec<Vec<usize>> {
        let set: BTreeSet<Vec<usize>> = (0..self.num_states).map(|s| self.joint_observation(s)).collect();
        set.into_iter().collect()
    }

    /// Size of the deterministic memoryless joint policy space (saturating).
    pub fn policy_space_size(&self) -> u128 {
        let mut total: u128 = 1;
        for (i, a) in self.agents.iter().enumerate() {
            for (base, count) in [
                (a.alphabet_size, a.num_observations),
                (a.num_env_actions, a.num_observations * self.incoming_count(i)),
            ] {
                for _ in 0..count {
                    total = total.saturating_mul(base as u128);
                }
            }
        }
        total
    }

    pub fn check_policy(&self, p: &FactoredJointPolicy) -> Result<()> {
        if p.agents.len() != self.agents.len() {
            return Err(domain(format!(
                "policy has {} agents, instance has {}",
                p.agents.len(),
                self.agents.len()
            )));
        }
        for (i, (a, spec)) in p.agents.iter().zip(&self.agents).enumerate() {
            if a.comm.len() != spec.num_observations || a.env.len() != spec.num_observations * self.incoming_count(i) {
                return Err(domain(format!("policy of agent {} does not match its observation domain", spec.name)));
            }
            if a.comm.iter().any(|&m| m >= spec.alphabet_size) || a.env.iter().any(|&e| e >= spec.num_env_actions) {
                return Err(domain(format!("policy of agent {} uses an unknown symbol or action", spec.name)));
            }
        }
        Ok(())
    }

    /// Messages and environment actions the policy produces on `joint_obs`.
    pub fn act(&self, p: &FactoredJointPolicy, joint_obs: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let messages: Vec<usize> = p.agents.iter().zip(joint_obs).map(|(a, &o)| a.comm[o]).collect();
        let actions = p
            .agents
            .iter()
            .enumerate()
            .map(|(i, a)| a.env[joint_obs[i] * self.incoming_count(i) + self.incoming_index(i, &messages)])
            .collect();
        (messages, actions)
    }

    fn joint_action_index(&self, actions: &[usize]) -> usize {
        let mut index = 0;
        let mut radix = 1;
        for (a, spec) in actions.iter().zip(&self.agents) {
            index += a * radix;
            radix *= spec.num_env_actions;
        }
        index
    }

    /// Exact expected return from the initial distribution.
    pub fn expected_return(&self, p: &FactoredJointPolicy) -> Result<f64> {
        self.check_policy(p)?;
        let mut total = 0.0;
        for (s0, &prob) in self.initial.iter().enumerate() {
            if prob == 0.0 {
                continue;
            }
            let mut s = s0;
            let mut ret = 0.0;
            for _ in 0..self.horizon {
                if self.terminal[s] {
                    break;
                }
                let (_, actions) = self.act(p, &self.joint_observation(s));
                let j = self.joint_action_index(&actions);
                ret += self.reward[s][j];
                s = self.transition[s][j];
            }
            total += prob * ret;
        }
        Ok(total)
    }

    /// Policy number `index` in mixed radix over every table entry: per agent,
    /// communication entries then environment entries, agent 0 first and
    /// least significant.
    pub fn policy_at(&self, mut index: u128) -> FactoredJointPolicy {
        let agents = self
            .agents
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let mut digits = |base: usize, count: usize| -> Vec<usize> {
                    (0..count)
                        .map(|_| {
                            let d = (index % base as u128) as usize;
                            index /= base as u128;
                            d
                        })
                        .collect()
                };
                let comm = digits(spec.alphabet_size, spec.num_observations);
                let env = digits(spec.num_env_actions, spec.num_observations * self.incoming_count(i));
                AgentPolicy { env, comm }
            })
            .collect();
        FactoredJointPolicy { agents }
    }

    /// Every policy, in [`policy_at`](Self::policy_at) order.
    pub fn enumerate_policies(&self, cap: u128) -> Result<Vec<FactoredJointPolicy>> {
        let size = self.policy_space_size();
        if size > cap {
            return Err(Error::Size { cardinality: size, cap });
        }
        Ok((0..size).map(|i| self.policy_at(i)).collect())
    }

    pub fn random_policy<R: Rng + ?Sized>(&self, rng: &mut R) -> FactoredJointPolicy {
        let agents = self
            .agents
            .iter()
            .enumerate()
            .map(|(i, spec)| AgentPolicy {
                comm: (0..spec.num_observations)
                    .map(|_| rng.random_range(0..spec.alphabet_size))
                    .collect(),
                env: (0..spec.num_observations * self.incoming_count(i))
                    .map(|_| rng.random_range(0..spec.num_env_actions))
                    .collect(),
            })
            .collect();
        FactoredJointPolicy { agents }
    }

    /// Renames every agent's messages by `perms[i]` and rewires the receivers
    /// accordingly, leaving the induced environment behaviour unchanged.
    pub fn relabel(&self, p: &FactoredJointPolicy, perms: &[Vec<usize>]) -> Result<FactoredJointPolicy> {
        self.check_policy(p)?;
        if perms.len() != self.agents.len() {
            return Err(domain("one permutation per agent"));
        }
        for (perm, spec) in perms.iter().zip(&self.agents) {
            let mut sorted = perm.clone();
            sorted.sort_unstable();
            if sorted != (0..spec.alphabet_size).collect::<Vec<_>>() {
                return Err(domain(format!("not a permutation of agent {}'s alphabet", spec.name)));
            }
        }
        let mut out = p.clone();
        for (i, spec) in self.agents.iter().enumerate() {
            out.agents[i].comm = p.agents[i].comm.iter().map(|&m| perms[i][m]).collect();
            let incoming = self.incoming_count(i);
            for o in 0..spec.num_observations {
                for k in 0..incoming {
                    let old = self.decode_incoming(i, k);
                    let new: Vec<usize> = old
                        .iter()
                        .enumerate()
                        .map(|(j, &m)| if j == i { 0 } else { perms[j][m] })
                        .collect();
                    out.agents[i].env[o * incoming + self.incoming_index(i, &new)] = p.agents[i].env[o * incoming + k];
                }
            }
        }
        Ok(out)
    }

    fn decode_incoming(&self, i: usize, mut k: usize) -> Vec<usize> {
        self.agents
            .iter()
            .enumerate()
            .map(|(j, a)| {
                if j == i {
                    0
                } else {
                    let m = k % a.alphabet_size;
                    k /= a.alphabet_size;
                    m
                }
            })
            .collect()
    }

    /// Speaker/listener gridworld restricted to the given goal cells. The
    /// speaker has a single do-nothing environment action; the listener has the
    /// four moves and a one-symbol alphabet.
    pub fn gridworld(config: &GridConfig, goals: &[Cell], view: SpeakerView) -> Result<Self> {
        config.validate()?;
        if goals.is_empty() || goals.iter().any(|g| !config.contains(*g)) {
            return Err(domain("goals must be a nonempty set of grid cells"));
        }
        let cells = config.num_cells();
        let states: Vec<State> = config
            .cells()
            .flat_map(|l| goals.iter().map(move |&g| State::new(l, g)))
            .collect();
        let index: HashMap<State, usize> = states.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let n = states.len();
        let speaker_obs: Vec<usize> = match view {
            SpeakerView::Goal => states
                .iter()
                .map(|s| goals.iter().position(|&g| g == s.goal).expect("goal listed"))
                .collect(),
            SpeakerView::State => (0..n).collect(),
        };
        let speaker = AgentSpec {
            name: "speaker".into(),
            num_observations: match view {
                SpeakerView::Goal => goals.len(),
                SpeakerView::State => n,
            },
            observations: speaker_obs,
            num_env_actions: 1,
            alphabet_size: config.message_alphabet_size,
        };
        let listener = AgentSpec {
            name: "listener".into(),
            observations: states.iter().map(|s| config.cell_index(s.listener)).collect(),
            num_observations: cells,
            num_env_actions: Action::COUNT,
            alphabet_size: 1,
        };
        let terminal: Vec<bool> = states.iter().map(|s| s.is_terminal()).collect();
        let starts = terminal.iter().filter(|t| !**t).count();
        if starts == 0 {
            return Err(domain("no nonterminal start state"));
        }
        let initial = terminal
            .iter()
            .map(|&t| if t { 0.0 } else { 1.0 / starts as f64 })
            .collect();
        let mut transition = Vec::with_capacity(n);
        let mut reward = Vec::with_capacity(n);
        for s in &states {
            let mut t_row = Vec::with_capacity(Action::COUNT);
            let mut r_row = Vec::with_capacity(Action::COUNT);
            for a in Action::ALL {
                if s.is_terminal() {
                    t_row.push(index[s]);
                    r_row.push(0.0);
                } else {
                    let out = config.step(*s, a)?;
                    t_row.push(index[&out.next_state]);
                    r_row.push(out.reward as f64);
                }
            }
            transition.push(t_row);
            reward.push(r_row);
        }
        let m = Self {
            num_states: n,
            initial,
            terminal,
            agents: vec![speaker, listener],
            transition,
            reward,
            horizon: config.horizon,
        };
        m.validate()?;
        Ok(m)
    }

    /// The 1x3 corridor with goals at both ends, two symbols and horizon 2.
    pub fn corridor() -> Self {
        let config = GridConfig {
            width: 3,
            height: 1,
            horizon: 2,
            message_alphabet_size: 2,
        };
        Self::gridworld(&config, &[Cell::new(0, 0), Cell::new(2, 0)], SpeakerView::Goal).expect("valid corridor")
    }
}

fn same_domain(m: &MicroDecPomdpComm, a: &FactoredJointPolicy, b: &FactoredJointPolicy) -> Result<()> {
    m.check_policy(a)?;
    m.check_policy(b)
}

/// Same joint environment action on every joint observation; messages are
/// ignored except through their effect on actions.
pub fn env_equiv(m: &MicroDecPomdpComm, a: &FactoredJointPolicy, b: &FactoredJointPolicy) -> Result<bool> {
    same_domain(m, a, b)?;
    Ok(first_env_difference(m, a, b).is_none())
}

fn first_env_difference(m: &MicroDecPomdpComm, a: &FactoredJointPolicy, b: &FactoredJointPolicy) -> Option<Vec<usize>> {
    m.joint_observations()
        .into_iter()
        .find(|z| m.act(a, z).1 != m.act(b, z).1)
}

/// For environment-equivalent policies: whether each agent's messages under
/// `a` are a one-to-one renaming of its messages under `b`.
pub fn comm_equiv(m: &MicroDecPomdpComm, a: &FactoredJointPolicy, b: &FactoredJointPolicy) -> Result<bool> {
    same_domain(m, a, b)?;
    if let Some(z) = first_env_difference(m, a, b) {
        return Err(usage(format!(
            "communication equivalence needs environment-equivalent policies; they differ on joint observation {z:?}"
        )));
    }
    Ok(a.agents.iter().zip(&b.agents).all(|(pa, pb)| renaming_exists(&pb.comm, &pa.comm)))
}

/// Whether `{(from[o], to[o])}` is a well-defined injective function.
fn renaming_exists(from: &[usize], to: &[usize]) -> bool {
    let mut forward = HashMap::new();
    let mut backward = HashMap::new();
    for (&f, &t) in from.iter().zip(to) {
        if *forward.entry(f).or_insert(t) != t || *backward.entry(t).or_insert(f) != f {
            return false;
        }
    }
    true
}

/// First-occurrence relabelling: equal for two message maps iff one is a
/// renaming of the other.
fn canonical_partition(comm: &[usize]) -> Vec<usize> {
    let mut seen = HashMap::new();
    comm.iter()
        .map(|&c| {
            let next = seen.len();
            *seen.entry(c).or_insert(next)
        })
        .collect()
}

fn env_signature(m: &MicroDecPomdpComm, p: &FactoredJointPolicy, observations: &[Vec<usize>]) -> Vec<usize> {
    observations.iter().flat_map(|z| m.act(p, z).1).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Env,
    Comm,
}

/// Equivalence classes as lists of input positions, each list ascending and
/// the classes ordered by their first member.
pub fn partition_classes(
    m: &MicroDecPomdpComm,
    policies: &[FactoredJointPolicy],
    relation: Relation,
) -> Result<Vec<Vec<usize>>> {
    for p in policies {
        m.check_policy(p)?;
    }
    let observations = m.joint_observations();
    let env_keys: Vec<Vec<usize>> = policies.iter().map(|p| env_signature(m, p, &observations)).collect();
    if relation == Relation::Comm {
        if let Some(k) = env_keys.iter().position(|k| *k != env_keys[0]) {
            return Err(usage(format!(
                "communication classes are only defined within one environment class; policies 0 and {k} differ"
            )));
        }
    }
    let mut classes: Vec<Vec<usize>> = Vec::new();
    let mut by_key: HashMap<Vec<usize>, usize> = HashMap::new();
    for (i, p) in policies.iter().enumerate() {
        let key = match relation {
            Relation::Env => env_keys[i].clone(),
            Relation::Comm => p
                .agents
                .iter()
                .flat_map(|a| {
                    let mut c = canonical_partition(&a.comm);
                    c.push(usize::MAX);
                    c
                })
                .collect(),
        };
        match by_key.get(&key) {
            Some(&c) => classes[c].push(i),
            None => {
                by_key.insert(key, classes.len());
                classes.push(vec![i]);
            }
        }
    }
    Ok(classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnionReport {
    pub policies: u128,
    pub optimal_return: f64,
    /// |Pi*|
    pub optimal_policies: usize,
    pub env_classes: usize,
    pub optimal_classes: usize,
    pub optimal_class_sizes: Vec<usize>,
    /// Members of optimal classes that are not optimal.
    pub suboptimal_in_optimal_class: usize,
    /// Optimal policies outside every optimal class.
    pub optimal_outside_classes: usize,
    pub holds: bool,
}

impl UnionReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "joint policies          {}", self.policies);
        let _ = writeln!(out, "optimal return          {}", self.optimal_return);
        let _ = writeln!(out, "optimal policies        {}", self.optimal_policies);
        let _ = writeln!(out, "env classes             {}", self.env_classes);
        let _ = writeln!(out, "optimal env classes     {}", self.optimal_classes);
        let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
        for &s in &self.optimal_class_sizes {
            *sizes.entry(s).or_insert(0) += 1;
        }
        for (s, n) in sizes {
            let _ = writeln!(out, "  {n} classes of size {s}");
        }
        let _ = writeln!(out, "suboptimal in class     {}", self.suboptimal_in_optimal_class);
        let _ = writeln!(out, "optimal outside classes {}", self.optimal_outside_classes);
        let _ = writeln!(out, "union identity holds    {}", self.holds);
        out
    }
}

/// Enumerates every joint policy, finds the optimal set, groups all policies
/// into environment classes and checks that the optimal set is exactly the
/// union of the classes containing an optimal policy.
pub fn verify_optimal_union(m: &MicroDecPomdpComm, cap: u128) -> Result<UnionReport> {
    m.validate()?;
    let policies = m.enumerate_policies(cap)?;
    let returns = policies
        .iter()
        .map(|p| m.expected_return(p))
        .collect::<Result<Vec<f64>>>()?;
    let best = returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let optimal: Vec<bool> = returns.iter().map(|&r| r >= best - RETURN_TOLERANCE).collect();
    let classes = partition_classes(m, &policies, Relation::Env)?;
    let optimal_classes: Vec<&Vec<usize>> = classes.iter().filter(|c| c.iter().any(|&i| optimal[i])).collect();
    let in_union: BTreeSet<usize> = optimal_classes.iter().flat_map(|c| c.iter().copied()).collect();
    let suboptimal = in_union.iter().filter(|&&i| !optimal[i]).count();
    let outside = (0..policies.len()).filter(|&i| optimal[i] && !in_union.contains(&i)).count();
    Ok(UnionReport {
        policies: policies.len() as u128,
        optimal_return: best,
        optimal_policies: optimal.iter().filter(|o| **o).count(),
        env_classes: classes.len(),
        optimal_classes: optimal_classes.len(),
        optimal_class_sizes: optimal_classes.iter().map(|c| c.len()).collect(),
        suboptimal_in_optimal_class: suboptimal,
        optimal_outside_classes: outside,
        holds: suboptimal == 0 && outside == 0,
    })
}
