//! Learned decoder for the hidden initial state.
//!
//! Given a message and the listener's actions, a recurrent encoder embeds the
//! actions, a speaker generator maps the message to goal logits and a listener
//! generator maps (message, embedding) to listener-position logits. A relaxed
//! initial state is drawn with Gumbel-Softmax, then rolled forward through the
//! frozen policy and transition model; the policy's action logits along the way
//! are scored against the observed actions.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::info;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::demos::{roll_episode, Episode, MessageMapping};
use crate::env::{argmax, Action, Cell, GridConfig, Message};
use crate::error::{domain, Error, Result};
use crate::exact_decoder::Demonstration;
use crate::nn::{
    self, backward_and_step, gumbel_softmax_sample, one_hot_rows, Adam, AdamConfig, Bound, Checkpoint, Graph,
    Gru, Matrix, Mlp, ParamStore, Var,
};
use crate::planner::{DifferentiablePolicy, QTable};
use crate::rng::DetRng;
use crate::transition::TransitionModel;

/// Exponential annealing, held constant between updates:
/// `start * (end/start)^(min(k_q, decay_steps) / decay_steps)` with `k_q`
/// the last multiple of `update_every` at or below `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: usize,
    pub update_every: usize,
    pub total_steps: usize,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            start: 10.0,
            end: 0.5,
            decay_steps: 15_000,
            update_every: 500,
            total_steps: 20_000,
        }
    }
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.start > 0.0 && self.end > 0.0 && self.end <= self.start) {
            return Err(domain(format!(
                "temperatures must satisfy 0 < end <= start, got start {} end {}",
                self.start, self.end
            )));
        }
        if self.decay_steps == 0 || self.update_every == 0 {
            return Err(domain("decay_steps and update_every must be positive"));
        }
        Ok(())
    }

    pub fn tau(&self, step: usize) -> f64 {
        let k = (step / self.update_every.max(1)) * self.update_every.max(1);
        let frac = k.min(self.decay_steps) as f64 / self.decay_steps.max(1) as f64;
        self.start * (self.end / self.start).powf(frac)
    }
}

/// Four concatenated probability vectors: goal x, goal y, listener x, listener y.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedState(pub Vec<f64>);

impl RelaxedState {
    pub fn one_hot(config: &GridConfig, state: crate::State) -> Result<Self> {
        Ok(Self(config.encode_state_features(state)?))
    }

    /// Largest deviation of any factor's sum from 1, or infinity if an entry is
    /// negative or the width is wrong.
    pub fn simplex_error(&self, config: &GridConfig) -> f64 {
        if self.0.len() != config.feature_len() || self.0.iter().any(|&v| !(v >= 0.0)) {
            return f64::INFINITY;
        }
        config
            .factor_offsets()
            .into_iter()
            .zip(config.factor_sizes())
            .map(|(o, n)| (self.0[o..o + n].iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn argmax_state(&self, config: &GridConfig) -> crate::State {
        config.argmax_state(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderArch {
    pub kind: String,
    pub grid: GridConfig,
    pub hidden: usize,
}

/// Encoder and generator parameters; the only trainable part of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    config: GridConfig,
    hidden: usize,
    encoder: Gru,
    speaker: Mlp,
    listener: Mlp,
    store: ParamStore,
}

impl DecoderParams {
    pub const KIND: &'static str = "state_decoder";

    pub fn new<R: Rng + ?Sized>(config: &GridConfig, hidden: usize, rng: &mut R) -> Self {
        let sigma = config.message_alphabet_size;
        let half = config.width + config.height;
        let mut store = ParamStore::new();
        let encoder = Gru::new(&mut store, Action::COUNT, hidden, rng);
        let speaker = Mlp::new(&mut store, &[sigma, hidden, half], rng);
        let listener = Mlp::new(&mut store, &[sigma + hidden, hidden, half], rng);
        Self {
            config: *config,
            hidden,
            encoder,
            speaker,
            listener,
            store,
        }
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn message_row(&self, message: Message) -> Result<Matrix> {
        let m = Message::new(message.symbol(), self.config.message_alphabet_size)?;
        Ok(one_hot_rows(&[m.symbol()], self.config.message_alphabet_size))
    }

    /// Final hidden state of the action encoder.
    pub fn encode_actions(&self, actions: &[Action]) -> Result<Vec<f64>> {
        if actions.is_empty() {
            return Err(domain("cannot encode an empty action sequence"));
        }
        let seq: Vec<Matrix> = actions
            .iter()
            .map(|a| one_hot_rows(&[a.index()], Action::COUNT))
            .collect();
        Ok(self.encoder.predict(&self.store, &seq)?.row(0).to_vec())
    }

    /// Goal logits `G^s(m)`: `W` x-logits followed by `H` y-logits.
    pub fn speaker_logits(&self, message: Message) -> Result<Vec<f64>> {
        let x = self.message_row(message)?;
        Ok(self.speaker.predict(&self.store, &x)?.row(0).to_vec())
    }

    /// Listener-position logits `G^l(m, e_a)`.
    pub fn listener_logits(&self, message: Message, embedding: &[f64]) -> Result<Vec<f64>> {
        if embedding.len() != self.hidden {
            return Err(domain(format!(
                "action embedding has width {}, expected {}",
                embedding.len(),
                self.hidden
            )));
        }
        let m = self.message_row(message)?;
        let e = Array2::from_shape_vec((1, self.hidden), embedding.to_vec()).expect("embedding row");
        let x = ndarray::concatenate(ndarray::Axis(1), &[m.view(), e.view()]).expect("same rows");
        Ok(self.listener.predict(&self.store, &x)?.row(0).to_vec())
    }

    /// One relaxed initial state for a single demonstration.
    pub fn generate_initial_state<R: Rng + ?Sized>(
        &self,
        message: Message,
        embedding: &[f64],
        tau: f64,
        rng: &mut R,
    ) -> Result<RelaxedState> {
        let mut logits = self.speaker_logits(message)?;
        logits.extend(self.listener_logits(message, embedding)?);
        let mut graph = Graph::new();
        let x = graph.constant(Array2::from_shape_vec((1, logits.len()), logits).expect("logit row"));
        let s = gumbel_softmax_sample(&mut graph, x, &self.config.factor_sizes(), tau, rng)?;
        Ok(RelaxedState(graph.value(s).row(0).to_vec()))
    }

    /// Deterministic goal estimate: argmax of each speaker-generator factor.
    pub fn predict_goal(&self, message: Message) -> Result<Cell> {
        let logits = self.speaker_logits(message)?;
        let w = self.config.width;
        Ok(Cell::new(argmax(&logits[..w]), argmax(&logits[w..])))
    }

    pub fn arch(&self) -> DecoderArch {
        DecoderArch {
            kind: Self::KIND.to_string(),
            grid: self.config,
            hidden: self.hidden,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let arch = serde_json::to_value(self.arch()).expect("decoder arch serialises");
        Checkpoint::new(arch, &self.store)
    }

    pub fn from_checkpoint(checkpoint: &Checkpoint) -> Result<Self> {
        let arch: DecoderArch = checkpoint.arch_as()?;
        if arch.kind != Self::KIND {
            return Err(Error::Parse(format!("expected a {} checkpoint, got {}", Self::KIND, arch.kind)));
        }
        arch.grid.validate()?;
        let mut params = Self::new(&arch.grid, arch.hidden, &mut crate::rng::seeded(0));
        checkpoint.load_into(&mut params.store)?;
        Ok(params)
    }

    /// Records `G^s` and `G^l` for a batch of messages and embeddings,
    /// returning the `B x 2(W+H)` initial-state logits.
    fn record_initial_logits(&self, graph: &mut Graph, bound: &Bound, messages: Var, embedding: Var) -> Result<Var> {
        let gs = self.speaker.forward(graph, bound, messages)?;
        let input = graph.concat_cols(&[messages, embedding]);
        let gl = self.listener.forward(graph, bound, input)?;
        Ok(graph.concat_cols(&[gs, gl]))
    }
}

/// The frozen half of the pipeline.
#[derive(Debug, Clone, Copy)]
pub struct Frozen<'a> {
    pub policy: &'a DifferentiablePolicy,
    pub transition: &'a TransitionModel,
}

impl Frozen<'_> {
    fn check(&self, config: &GridConfig) -> Result<()> {
        if self.policy.config() != config || self.transition.config() != config {
            return Err(domain("policy, transition model and decoder disagree on the grid"));
        }
        Ok(())
    }
}

struct BoundFrozen {
    policy: Bound,
    transition: Bound,
}

fn bind_frozen(graph: &mut Graph, frozen: &Frozen<'_>) -> BoundFrozen {
    BoundFrozen {
        policy: frozen.policy.params().bind(graph, false),
        transition: frozen.transition.params().bind(graph, false),
    }
}

/// Rolls relaxed states forward. `s0` has one row per sequence and rows are
/// ordered by nonincreasing length; `actions[t]` lists the actions of the rows
/// still active at step `t`. Returns the policy's action logits per step (rows
/// shrinking with the active set) and the relaxed states `s_1..` produced.
fn record_rollout<R: Rng + ?Sized>(
    graph: &mut Graph,
    frozen: &Frozen<'_>,
    bound: &BoundFrozen,
    s0: Var,
    actions: &[Vec<usize>],
    tau: f64,
    rng: &mut R,
) -> Result<(Vec<Var>, Vec<Var>)> {
    let config = frozen.policy.config();
    let groups = config.factor_sizes();
    let mut logits = Vec::with_capacity(actions.len());
    let mut states = Vec::with_capacity(actions.len());
    let mut s = s0;
    for (t, acts) in actions.iter().enumerate() {
        let n = acts.len();
        if graph.shape(s).0 != n {
            s = graph.slice_rows(s, 0, n);
        }
        logits.push(frozen.policy.forward(graph, &bound.policy, s)?);
        let Some(next) = actions.get(t + 1) else { break };
        let m = next.len();
        let (s_head, a_head) = if m == n {
            (s, graph.constant(one_hot_rows(acts, Action::COUNT)))
        } else {
            (
                graph.slice_rows(s, 0, m),
                graph.constant(one_hot_rows(&acts[..m], Action::COUNT)),
            )
        };
        let next_logits = frozen.transition.forward(graph, &bound.transition, s_head, a_head)?;
        s = gumbel_softmax_sample(graph, next_logits, &groups, tau, rng)?;
        states.push(s);
    }
    Ok((logits, states))
}

/// Per-step active action lists for sequences sorted by nonincreasing length.
fn active_actions(sorted: &[&Demonstration]) -> Vec<Vec<usize>> {
    let longest = sorted.first().map_or(0, |d| d.actions.len());
    (0..longest)
        .map(|t| {
            sorted
                .iter()
                .take_while(|d| d.actions.len() > t)
                .map(|d| d.actions[t].index())
                .collect()
        })
        .collect()
}

/// Single-sequence rollout on plain values: the relaxed states `s_1..s_{L-1}`
/// and the policy's action logits at `s_0..s_{L-1}`.
pub fn simulated_rollout<R: Rng + ?Sized>(
    s0: &RelaxedState,
    actions: &[Action],
    frozen: &Frozen<'_>,
    tau: f64,
    rng: &mut R,
) -> Result<(Vec<RelaxedState>, Vec<[f64; 4]>)> {
    let config = *frozen.policy.config();
    frozen.check(&config)?;
    if actions.len() > config.horizon {
        return Err(domain(format!(
            "{} actions exceed the horizon of {}",
            actions.len(),
            config.horizon
        )));
    }
    if s0.0.len() != config.feature_len() {
        return Err(domain("relaxed state has the wrong width"));
    }
    let mut graph = Graph::new();
    let bound = bind_frozen(&mut graph, frozen);
    let s = graph.constant(Array2::from_shape_vec((1, s0.0.len()), s0.0.clone()).expect("state row"));
    let per_step: Vec<Vec<usize>> = actions.iter().map(|a| vec![a.index()]).collect();
    let (logits, states) = record_rollout(&mut graph, frozen, &bound, s, &per_step, tau, rng)?;
    graph.check_finite()?;
    let logits = logits
        .iter()
        .map(|&v| {
            let r = graph.value(v);
            [r[[0, 0]], r[[0, 1]], r[[0, 2]], r[[0, 3]]]
        })
        .collect();
    let states = states
        .iter()
        .map(|&v| RelaxedState(graph.value(v).row(0).to_vec()))
        .collect();
    Ok((states, logits))
}

/// `sum_t CE(logits_t, a_t)`.
pub fn reconstruction_loss(logits: &[[f64; 4]], actions: &[Action]) -> Result<f64> {
    if logits.len() != actions.len() {
        return Err(domain(format!(
            "{} logit rows for {} actions",
            logits.len(),
            actions.len()
        )));
    }
    Ok(logits
        .iter()
        .zip(actions)
        .map(|(l, a)| -nn::softmax(l)[a.index()].ln())
        .sum())
}

/// Records the batch-mean reconstruction loss on `graph`. Gradients reach only
/// the parameters bound in `bound`.
pub fn record_batch_loss<R: Rng + ?Sized>(
    graph: &mut Graph,
    params: &DecoderParams,
    bound: &Bound,
    frozen: &Frozen<'_>,
    batch: &[Demonstration],
    tau: f64,
    rng: &mut R,
) -> Result<Var> {
    let config = params.config;
    frozen.check(&config)?;
    if batch.is_empty() {
        return Err(domain("empty demonstration batch"));
    }
    let mut sorted: Vec<&Demonstration> = batch.iter().collect();
    sorted.sort_by_key(|d| std::cmp::Reverse(d.actions.len()));
    for d in &sorted {
        if d.actions.is_empty() {
            return Err(domain("demonstration without actions"));
        }
        if d.actions.len() > config.horizon {
            return Err(domain(format!(
                "{} actions exceed the horizon of {}",
                d.actions.len(),
                config.horizon
            )));
        }
        Message::new(d.message.symbol(), config.message_alphabet_size)?;
    }
    let rows = sorted.len();
    let per_step = active_actions(&sorted);

    let steps: Vec<Var> = per_step
        .iter()
        .map(|acts| graph.constant(one_hot_rows(acts, Action::COUNT)))
        .collect();
    let embedding = params.encoder.forward_ragged(graph, bound, rows, &steps)?;
    let symbols: Vec<usize> = sorted.iter().map(|d| d.message.symbol()).collect();
    let messages = graph.constant(one_hot_rows(&symbols, config.message_alphabet_size));
    let init = params.record_initial_logits(graph, bound, messages, embedding)?;
    let s0 = gumbel_softmax_sample(graph, init, &config.factor_sizes(), tau, rng)?;

    let frozen_bound = bind_frozen(graph, frozen);
    let (logits, _) = record_rollout(graph, frozen, &frozen_bound, s0, &per_step, tau, rng)?;
    let weight = 1.0 / rows as f64;
    let terms: Vec<Var> = logits
        .iter()
        .zip(&per_step)
        .map(|(&l, acts)| graph.cross_entropy(l, acts, &vec![weight; acts.len()]))
        .collect();
    let all = graph.concat_cols(&terms);
    Ok(graph.sum(all))
}

/// Analytic vs central-difference gradients of the batch loss with respect to
/// every decoder parameter, with the Gumbel noise fixed by `seed`.
pub fn check_gradients(
    params: &DecoderParams,
    frozen: &Frozen<'_>,
    batch: &[Demonstration],
    tau: f64,
    seed: u64,
    h: f64,
    tolerance: f64,
    floor: f64,
) -> Result<nn::gradcheck::GradCheck> {
    let mut graph = Graph::new();
    let bound = params.store.bind(&mut graph, true);
    let loss = record_batch_loss(&mut graph, params, &bound, frozen, batch, tau, &mut crate::rng::seeded(seed))?;
    let grads = graph.backward(loss)?;
    let analytic = bound.gradients(&graph, &grads);
    let mut probe = params.clone();
    let mut failure = None;
    let numeric = nn::gradcheck::numeric_gradients(&params.store, h, |store| {
        probe.store = store.clone();
        let mut g = Graph::new();
        let b = probe.store.bind(&mut g, false);
        match record_batch_loss(&mut g, &probe, &b, frozen, batch, tau, &mut crate::rng::seeded(seed)) {
            Ok(v) => g.scalar(v),
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(nn::gradcheck::compare(&analytic, &numeric, tolerance, floor))
}

/// Supplies training batches.
pub trait DemoSource {
    fn next_batch(&mut self, size: usize) -> Result<Vec<Demonstration>>;
}

/// Fresh episodes every call: `size` environments are initialised uniformly
/// (coincident listener and goal included), rolled out, and filtered to those
/// that neither end immediately nor run out of time.
pub struct SimulatedSource<'a> {
    q: &'a QTable,
    mapping: &'a MessageMapping,
    temperature: f64,
    rng: DetRng,
    pub discarded: usize,
}

impl<'a> SimulatedSource<'a> {
    pub fn new(q: &'a QTable, mapping: &'a MessageMapping, temperature: f64, rng: DetRng) -> Self {
        Self {
            q,
            mapping,
            temperature,
            rng,
            discarded: 0,
        }
    }
}

impl DemoSource for SimulatedSource<'_> {
    fn next_batch(&mut self, size: usize) -> Result<Vec<Demonstration>> {
        let config = *self.q.config();
        let mut out = Vec::with_capacity(size);
        for _ in 0..size {
            let start = config.sample_any(&mut self.rng);
            match roll_episode(self.q, self.mapping, self.temperature, start, &mut self.rng)? {
                Episode::Kept(d) => out.push(d),
                Episode::Immediate | Episode::Unterminated => self.discarded += 1,
            }
        }
        Ok(out)
    }
}

/// Serves a fixed corpus in order, once.
pub struct CorpusSource {
    demos: Vec<Demonstration>,
    cursor: usize,
}

impl CorpusSource {
    pub fn new(demos: Vec<Demonstration>) -> Self {
        Self { demos, cursor: 0 }
    }
}

impl DemoSource for CorpusSource {
    fn next_batch(&mut self, size: usize) -> Result<Vec<Demonstration>> {
        if self.cursor + size > self.demos.len() {
            return Err(Error::Exhausted { served: self.cursor });
        }
        let batch = self.demos[self.cursor..self.cursor + size].to_vec();
        self.cursor += size;
        Ok(batch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderTrainConfig {
    pub hidden: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: TemperatureSchedule,
    pub eval_every: usize,
}

impl Default for DecoderTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            batch_size: 512,
            learning_rate: 1e-3,
            schedule: TemperatureSchedule::default(),
            eval_every: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub tau: f64,
    pub eval_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct DecoderTraining {
    pub params: DecoderParams,
    pub log: Vec<LogRow>,
}

impl DecoderTraining {
    /// `step,loss,tau,eval_accuracy`; the last column is empty between
    /// evaluations.
    pub fn log_csv(&self) -> String {
        let mut out = String::from("step,loss,tau,eval_accuracy\n");
        for r in &self.log {
            let acc = r.eval_accuracy.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", r.step, r.loss, r.tau, acc);
        }
        out
    }
}

/// Fraction of mapped goals whose message decodes to exactly that goal.
pub fn mapping_accuracy(params: &DecoderParams, mapping: &MessageMapping) -> Result<f64> {
    let mut hits = 0usize;
    for (goal, message) in mapping.iter() {
        if params.predict_goal(message)? == goal {
            hits += 1;
        }
    }
    Ok(hits as f64 / mapping.len().max(1) as f64)
}

/// Adam on the batch-mean reconstruction loss, updating only the decoder.
/// `eval` (if given) is scored every `eval_every` steps and after the last.
pub fn train_state_decoder(
    params: DecoderParams,
    frozen: &Frozen<'_>,
    source: &mut dyn DemoSource,
    training: &DecoderTrainConfig,
    eval: Option<&MessageMapping>,
    rng: &mut DetRng,
) -> Result<DecoderTraining> {
    train_state_decoder_with(params, frozen, source, training, eval, rng, |_| {})
}

/// [`train_state_decoder`] with a callback after every logged row.
pub fn train_state_decoder_with(
    mut params: DecoderParams,
    frozen: &Frozen<'_>,
    source: &mut dyn DemoSource,
    training: &DecoderTrainConfig,
    eval: Option<&MessageMapping>,
    rng: &mut DetRng,
    mut on_row: impl FnMut(&LogRow),
) -> Result<DecoderTraining> {
    training.schedule.validate()?;
    frozen.check(&params.config)?;
    let mut opt = Adam::new(AdamConfig::with_learning_rate(training.learning_rate), &params.store);
    let total = training.schedule.total_steps;
    let mut log = Vec::with_capacity(total);
    for step in 0..total {
        let tau = training.schedule.tau(step);
        let batch = source.next_batch(training.batch_size)?;
        let mut graph = Graph::new();
        let bound = params.store.bind(&mut graph, true);
        let loss = record_batch_loss(&mut graph, &params, &bound, frozen, &batch, tau, rng)?;
        let value = backward_and_step(&graph, loss, &bound, &mut params.store, &mut opt).map_err(|e| match e {
            Error::NonFinite { op, context } => Error::NonFinite {
                op,
                context: format!("decoder step {step}: {context}"),
            },
            other => other,
        })?;
        let last = step + 1 == total;
        let eval_accuracy = match eval {
            Some(m) if (training.eval_every > 0 && (step + 1) % training.eval_every == 0) || last => {
                Some(mapping_accuracy(&params, m)?)
            }
            _ => None,
        };
        let row = LogRow {
            step: step + 1,
            loss: value,
            tau,
            eval_accuracy,
        };
        if let Some(acc) = eval_accuracy {
            info!("decoder step {} loss {value:.4} tau {tau:.3} accuracy {acc:.3}", step + 1);
        }
        on_row(&row);
        log.push(row);
    }
    Ok(DecoderTraining { params, log })
}

mod cell_counts {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::env::Cell;

    pub fn serialize<S: Serializer>(map: &BTreeMap<Cell, usize>, s: S) -> Result<S::Ok, S::Error> {
        map.iter().collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<Cell, usize>, D::Error> {
        Ok(Vec::<(Cell, usize)>::deserialize(d)?.into_iter().collect())
    }
}

/// Per-goal outcome of an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalReport {
    pub goal: Cell,
    pub messages: Vec<Message>,
    pub demos: usize,
    /// Prediction counts by predicted cell, stored as `[[x, y], count]` pairs.
    #[serde(with = "cell_counts")]
    pub predictions: BTreeMap<Cell, usize>,
    /// Most frequent prediction (ties broken toward the smaller cell).
    pub modal: Cell,
    pub modal_distance: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub demos: usize,
    pub accuracy: f64,
    pub x_accuracy: f64,
    pub y_accuracy: f64,
    /// Number of demos by Manhattan error.
    pub distance_histogram: BTreeMap<usize, usize>,
    pub goals: Vec<GoalReport>,
}

impl Metrics {
    /// Goals whose modal prediction is exact.
    pub fn exact_goals(&self) -> usize {
        self.goals.iter().filter(|g| g.modal_distance == 0).count()
    }

    pub fn max_goal_distance(&self) -> usize {
        self.goals.iter().map(|g| g.modal_distance).max().unwrap_or(0)
    }

    /// Share of missed goals whose modal prediction is one step away; 1 when
    /// nothing is missed.
    pub fn near_miss_share(&self) -> f64 {
        let misses: Vec<_> = self.goals.iter().filter(|g| g.modal_distance > 0).collect();
        if misses.is_empty() {
            return 1.0;
        }
        misses.iter().filter(|g| g.modal_distance == 1).count() as f64 / misses.len() as f64
    }

    /// `true_gx,true_gy,pred_gx,pred_gy,proportion`, one row per (goal, cell)
    /// pair, each goal's heatmap scaled so its largest cell is 1.
    pub fn heatmap_csv(&self, config: &GridConfig) -> String {
        let mut out = String::from("true_gx,true_gy,pred_gx,pred_gy,proportion\n");
        for g in &self.goals {
            let max = g.predictions.values().copied().max().unwrap_or(0).max(1) as f64;
            for cell in config.cells() {
                let c = g.predictions.get(&cell).copied().unwrap_or(0) as f64;
                let _ = writeln!(out, "{},{},{},{},{}", g.goal.x, g.goal.y, cell.x, cell.y, c / max);
            }
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "accuracy {:.4} over {} demos ({} of {} goals exact)",
            self.accuracy,
            self.demos,
            self.exact_goals(),
            self.goals.len()
        );
        let _ = writeln!(out, "x accuracy {:.4}  y accuracy {:.4}", self.x_accuracy, self.y_accuracy);
        out.push_str("goal   message  predicted  distance\n");
        for g in &self.goals {
            let msgs: Vec<String> = g.messages.iter().map(|m| m.symbol().to_string()).collect();
            let _ = writeln!(
                out,
                "{:<6} {:>7}  {:<9}  {}",
                g.goal.to_string(),
                msgs.join("/"),
                g.modal.to_string(),
                g.modal_distance
            );
        }
        out.push_str("distance  demos\n");
        for (d, n) in &self.distance_histogram {
            let _ = writeln!(out, "{d:>8}  {n}");
        }
        out
    }
}

/// Scores goal predictions against demonstrations that carry ground truth.
pub fn evaluate(params: &DecoderParams, demos: &[Demonstration]) -> Result<Metrics> {
    if demos.is_empty() {
        return Err(domain("no demonstrations to evaluate"));
    }
    let mut cache: BTreeMap<Message, Cell> = BTreeMap::new();
    let mut per_goal: BTreeMap<Cell, (std::collections::BTreeSet<Message>, BTreeMap<Cell, usize>, usize)> =
        BTreeMap::new();
    let (mut hits, mut xs, mut ys) = (0usize, 0usize, 0usize);
    let mut histogram = BTreeMap::new();
    for (i, d) in demos.iter().enumerate() {
        let oracle = d
            .oracle
            .ok_or_else(|| domain(format!("demonstration {i} has no ground-truth goal")))?;
        let predicted = match cache.get(&d.message) {
            Some(&c) => c,
            None => {
                let c = params.predict_goal(d.message)?;
                cache.insert(d.message, c);
                c
            }
        };
        let goal = oracle.goal;
        hits += usize::from(predicted == goal);
        xs += usize::from(predicted.x == goal.x);
        ys += usize::from(predicted.y == goal.y);
        *histogram.entry(predicted.manhattan(goal)).or_insert(0) += 1;
        let entry = per_goal.entry(goal).or_default();
        entry.0.insert(d.message);
        *entry.1.entry(predicted).or_insert(0) += 1;
        entry.2 += 1;
    }
    let n = demos.len() as f64;
    let goals = per_goal
        .into_iter()
        .map(|(goal, (messages, predictions, count))| {
            let best = predictions.values().copied().max().unwrap_or(0);
            let modal = predictions
                .iter()
                .find(|(_, &c)| c == best)
                .map(|(&cell, _)| cell)
                .unwrap_or(goal);
            GoalReport {
                goal,
                messages: messages.into_iter().collect(),
                demos: count,
                predictions,
                modal,
                modal_distance: modal.manhattan(goal),
            }
        })
        .collect();
    Ok(Metrics {
        demos: demos.len(),
        accuracy: hits as f64 / n,
        x_accuracy: xs as f64 / n,
        y_accuracy: ys as f64 / n,
        distance_histogram: histogram,
        goals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demos::{assign_messages, generate_demos};
    use crate::exact_decoder::Oracle;
    use crate::planner::value_iteration;
    use crate::rng::seeded;
    use crate::State;

    fn frozen_parts(g: &GridConfig) -> (DifferentiablePolicy, TransitionModel) {
        (
            DifferentiablePolicy::new(g, &[16], &mut seeded(1)),
            TransitionModel::new(g, &[16], &mut seeded(2)),
        )
    }

    #[test]
    fn schedule_values() {
        let s = TemperatureSchedule::default();
        assert_eq!(s.tau(0), 10.0);
        assert_eq!(s.tau(499), 10.0);
        assert!((s.tau(500) - 10.0 * 0.05f64.powf(500.0 / 15000.0)).abs() < 1e-12);
        assert!((s.tau(15_000) - 0.5).abs() < 1e-12);
        assert!((s.tau(19_999) - 0.5).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for k in 0..20_000 {
            let t = s.tau(k);
            assert!(t <= prev);
            if k % 500 != 0 {
                assert_eq!(t, prev);
            }
            prev = t;
        }
        let bad = TemperatureSchedule { end: 20.0, ..s };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn encoder_behaviour() {
        let g = GridConfig::default();
        let p = DecoderParams::new(&g, 16, &mut seeded(5));
        assert!(matches!(p.encode_actions(&[]), Err(Error::Domain(_))));
        let a = p.encode_actions(&[Action::Right, Action::Up]).unwrap();
        assert_eq!(a, p.encode_actions(&[Action::Right, Action::Up]).unwrap());
        assert_ne!(a, p.encode_actions(&[Action::Up, Action::Right]).unwrap());
        assert_eq!(a.len(), 16);
    }

    #[test]
    fn generators_and_simplex() {
        let g = GridConfig::default();
        let p = DecoderParams::new(&g, 16, &mut seeded(5));
        let e1 = p.encode_actions(&[Action::Right]).unwrap();
        let e2 = p.encode_actions(&[Action::Down, Action::Down, Action::Left]).unwrap();
        let m = Message(3);
        assert_ne!(p.listener_logits(m, &e1).unwrap(), p.listener_logits(m, &e2).unwrap());
        let mut rng = seeded(9);
        for tau in [10.0, 1.0, 0.01] {
            let s = p.generate_initial_state(m, &e1, tau, &mut rng).unwrap();
            assert!(s.simplex_error(&g) < 1e-6);
        }
        assert!(matches!(p.speaker_logits(Message(25)), Err(Error::Domain(_))));
        assert!(p.generate_initial_state(m, &e1, 0.0, &mut rng).is_err());
        assert_eq!(p.predict_goal(m).unwrap(), p.predict_goal(m).unwrap());
    }

    #[test]
    fn reconstruction_loss_closed_forms() {
        let uniform = vec![[0.0; 4]; 8];
        let l = reconstruction_loss(&uniform, &[Action::Up; 8]).unwrap();
        assert!((l - 8.0 * 4f64.ln()).abs() < 1e-12);
        let sharp = vec![[50.0, 0.0, 0.0, 0.0]; 3];
        assert!(reconstruction_loss(&sharp, &[Action::Up; 3]).unwrap() < 1e-20);
        assert!(reconstruction_loss(&sharp, &[Action::Up; 2]).is_err());
    }

    #[test]
    fn rollout_starts_from_initial_state() {
        let g = GridConfig::default();
        let (policy, transition) = frozen_parts(&g);
        let frozen = Frozen {
            policy: &policy,
            transition: &transition,
        };
        let s0 = RelaxedState::one_hot(&g, State::new(Cell::new(0, 0), Cell::new(3, 2))).unwrap();
        let actions = [Action::Right, Action::Right, Action::Up];
        let (states, logits) = simulated_rollout(&s0, &actions, &frozen, 1.0, &mut seeded(3)).unwrap();
        assert_eq!(states.len(), 2);
        assert_eq!(logits.len(), 3);
        assert_eq!(logits[0], policy.state_logits(State::new(Cell::new(0, 0), Cell::new(3, 2))).unwrap());
        for s in &states {
            assert!(s.simplex_error(&g) < 1e-6);
        }
        assert!(simulated_rollout(&s0, &[Action::Up; 9], &frozen, 1.0, &mut seeded(3)).is_err());
    }

    #[test]
    fn batch_loss_matches_single_rollout() {
        let g = GridConfig::default();
        let (policy, transition) = frozen_parts(&g);
        let frozen = Frozen {
            policy: &policy,
            transition: &transition,
        };
        let p = DecoderParams::new(&g, 16, &mut seeded(5));
        let demo = Demonstration {
            message: Message(4),
            actions: vec![Action::Left, Action::Up, Action::Up],
            terminated: true,
            oracle: None,
        };
        let tau = 0.7;
        let mut graph = Graph::new();
        let bound = p.params().bind(&mut graph, false);
        let loss = record_batch_loss(&mut graph, &p, &bound, &frozen, &[demo.clone()], tau, &mut seeded(8)).unwrap();
        let batched = graph.scalar(loss);

        let mut rng = seeded(8);
        let e = p.encode_actions(&demo.actions).unwrap();
        let s0 = p.generate_initial_state(demo.message, &e, tau, &mut rng).unwrap();
        let (_, logits) = simulated_rollout(&s0, &demo.actions, &frozen, tau, &mut rng).unwrap();
        let single = reconstruction_loss(&logits, &demo.actions).unwrap();
        assert!((batched - single).abs() < 1e-10, "{batched} vs {single}");
    }

    #[test]
    fn training_leaves_frozen_parts_untouched() {
        let g = GridConfig::default();
        let (policy, transition) = frozen_parts(&g);
        let (p0, t0) = (policy.clone(), transition.clone());
        let frozen = Frozen {
            policy: &policy,
            transition: &transition,
        };
        let q = value_iteration(&g).unwrap();
        let mapping = assign_messages(&g, 2).unwrap();
        let mut source = SimulatedSource::new(&q, &mapping, 0.0, seeded(4));
        let cfg = DecoderTrainConfig {
            hidden: 8,
            batch_size: 16,
            schedule: TemperatureSchedule {
                total_steps: 3,
                ..TemperatureSchedule::default()
            },
            ..DecoderTrainConfig::default()
        };
        let start = DecoderParams::new(&g, 8, &mut seeded(6));
        let out = train_state_decoder(start.clone(), &frozen, &mut source, &cfg, Some(&mapping), &mut seeded(7)).unwrap();
        assert_eq!(policy, p0);
        assert_eq!(transition, t0);
        assert_ne!(out.params, start);
        assert_eq!(out.log.len(), 3);
        assert!(out.log[2].eval_accuracy.is_some());
        assert!(out.log_csv().starts_with("step,loss,tau,eval_accuracy\n1,"));
    }

    #[test]
    fn sources() {
        let g = GridConfig::default();
        let q = value_iteration(&g).unwrap();
        let mapping = assign_messages(&g, 2).unwrap();
        let mut sim = SimulatedSource::new(&q, &mapping, 0.0, seeded(4));
        let batch = sim.next_batch(500).unwrap();
        assert_eq!(batch.len() + sim.discarded, 500);
        assert!(sim.discarded > 0);
        for d in &batch {
            assert!(d.terminated && !d.actions.is_empty());
            d.validate(&g).unwrap();
        }
        let mut corpus = CorpusSource::new(batch[..10].to_vec());
        assert_eq!(corpus.next_batch(6).unwrap().len(), 6);
        assert!(matches!(corpus.next_batch(6), Err(Error::Exhausted { served: 6 })));
    }

    #[test]
    fn evaluation_of_a_decoder_against_its_own_answers() {
        let g = GridConfig::default();
        let p = DecoderParams::new(&g, 8, &mut seeded(3));
        let demos: Vec<Demonstration> = (0..25)
            .flat_map(|m| {
                let goal = p.predict_goal(Message(m)).unwrap();
                let start = if goal == Cell::new(0, 0) { Cell::new(1, 0) } else { Cell::new(0, 0) };
                (0..4).map(move |_| Demonstration {
                    message: Message(m),
                    actions: vec![Action::Up],
                    terminated: false,
                    oracle: Some(Oracle { start, goal }),
                })
            })
            .collect();
        let metrics = evaluate(&p, &demos).unwrap();
        assert_eq!(metrics.accuracy, 1.0);
        assert_eq!(metrics.max_goal_distance(), 0);
        assert_eq!(metrics.near_miss_share(), 1.0);
        let csv = metrics.heatmap_csv(&g);
        for line in csv.lines().skip(1) {
            let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
            let on_goal = v[0] == v[2] && v[1] == v[3];
            assert_eq!(v[4], if on_goal { 1.0 } else { 0.0 });
        }
        let mut reversed = demos.clone();
        reversed.reverse();
        assert_eq!(evaluate(&p, &reversed).unwrap(), metrics);
        let mut blind = demos;
        blind[0].oracle = None;
        assert!(matches!(evaluate(&p, &blind), Err(Error::Domain(_))));
    }

    #[test]
    fn untrained_decoder_is_near_chance() {
        let g = GridConfig::default();
        let q = value_iteration(&g).unwrap();
        let mapping = assign_messages(&g, 11).unwrap();
        let demos = generate_demos(&q, &mapping, 2500, 0.0, 1, "q").unwrap().demos;
        let mut total = 0.0;
        for seed in 0..40 {
            let p = DecoderParams::new(&g, 16, &mut seeded(seed));
            total += evaluate(&p, &demos).unwrap().accuracy;
        }
        let mean = total / 40.0;
        assert!((mean - 0.04).abs() < 0.03, "mean untrained accuracy {mean}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let g = GridConfig::default();
        let p = DecoderParams::new(&g, 8, &mut seeded(3));
        let back = DecoderParams::from_checkpoint(&Checkpoint::from_json(&p.to_checkpoint().to_json().unwrap()).unwrap()).unwrap();
        assert_eq!(back, p);
    }
}
