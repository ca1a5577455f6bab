//! Exact optimal action values and their differentiable distillation.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::env::{Action, GridConfig, State};
use crate::error::{domain, usage, Error, Result};
use crate::nn::{self, Adam, AdamConfig, Bound, Checkpoint, Graph, Matrix, Mlp, ParamStore, Var};

/// Values within this distance of the best action count as ties.
pub const TIE_TOLERANCE: f64 = 1e-6;

/// Optimal action values `Q(s, a)` for every state of a grid. Terminal
/// states (listener on the goal) hold zeros and are never queried.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    config: GridConfig,
    values: Vec<[f64; 4]>,
    sweeps: usize,
}

/// Stationary undiscounted value iteration. Arrival pays +1 and ends the
/// episode; every other move costs 1 and continues.
pub fn value_iteration(config: &GridConfig) -> Result<QTable> {
    config.validate()?;
    let n = config.num_states();
    let mut v = vec![0.0f64; n];
    let mut q = vec![[0.0f64; 4]; n];
    let mut sweeps = 0;
    // Every sweep fixes at least one more distance level.
    let max_sweeps = config.width + config.height + 1;
    loop {
        let mut changed = false;
        let mut next_v = v.clone();
        for s in config.start_states() {
            let i = config.state_index(s);
            for a in Action::ALL {
                let out = config.step(s, a)?;
                let continuation = if out.terminated {
                    0.0
                } else {
                    v[config.state_index(out.next_state)]
                };
                q[i][a.index()] = out.reward as f64 + continuation;
            }
            let best = q[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if best != v[i] {
                changed = true;
            }
            next_v[i] = best;
        }
        v = next_v;
        if !changed {
            break;
        }
        sweeps += 1;
        if sweeps > max_sweeps {
            return Err(Error::TrainingFailure(format!(
                "value iteration did not settle within {max_sweeps} sweeps"
            )));
        }
    }
    Ok(QTable {
        config: *config,
        values: q,
        sweeps,
    })
}

impl QTable {
    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    /// Number of sweeps that changed at least one value.
    pub fn sweeps(&self) -> usize {
        self.sweeps
    }

    pub fn q(&self, state: State, action: Action) -> f64 {
        self.values[self.config.state_index(state)][action.index()]
    }

    pub fn q_row(&self, state: State) -> [f64; 4] {
        self.values[self.config.state_index(state)]
    }

    /// `max_a Q(s, a)`; zero for terminal states.
    pub fn value(&self, state: State) -> f64 {
        if state.is_terminal() {
            return 0.0;
        }
        self.q_row(state).iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Actions within [`TIE_TOLERANCE`] of the best value, in index order.
    pub fn greedy_action_set(&self, state: State) -> Result<Vec<Action>> {
        self.config.check_state(state)?;
        if state.is_terminal() {
            return Err(usage(format!("no actions are taken in terminated state {state}")));
        }
        let row = self.q_row(state);
        let best = self.value(state);
        Ok(Action::ALL
            .into_iter()
            .filter(|a| row[a.index()] >= best - TIE_TOLERANCE)
            .collect())
    }

    pub fn is_greedy(&self, state: State, action: Action) -> Result<bool> {
        Ok(self.greedy_action_set(state)?.contains(&action))
    }

    /// Temperature 0 draws uniformly from the greedy set; a positive
    /// temperature samples from `softmax(Q(s, .) / t)`.
    pub fn sample_action<R: Rng + ?Sized>(
        &self,
        state: State,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Action> {
        if !(temperature >= 0.0) {
            return Err(domain(format!("temperature must be nonnegative, got {temperature}")));
        }
        if temperature == 0.0 {
            let greedy = self.greedy_action_set(state)?;
            return Ok(greedy[rng.random_range(0..greedy.len())]);
        }
        self.config.check_state(state)?;
        if state.is_terminal() {
            return Err(usage(format!("no actions are taken in terminated state {state}")));
        }
        let scaled: Vec<f64> = self.q_row(state).iter().map(|q| q / temperature).collect();
        let probs = nn::softmax(&scaled);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return Action::from_index(i);
            }
        }
        Action::from_index(3)
    }

    /// `listener_x,listener_y,goal_x,goal_y,q_up,q_down,q_left,q_right`, one
    /// row per state in index order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("listener_x,listener_y,goal_x,goal_y,q_up,q_down,q_left,q_right\n");
        for s in self.config.states() {
            let q = self.q_row(s);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                s.listener.x, s.listener.y, s.goal.x, s.goal.y, q[0], q[1], q[2], q[3]
            );
        }
        out
    }

    pub fn from_csv(config: &GridConfig, text: &str) -> Result<Self> {
        config.validate()?;
        let mut values = vec![[0.0f64; 4]; config.num_states()];
        let mut seen = vec![false; config.num_states()];
        for (line_no, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Parse(format!("q-table line {}: {what}", line_no + 1));
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 8 {
                return Err(bad("expected 8 fields"));
            }
            let coords: Vec<usize> = fields[..4]
                .iter()
                .map(|f| f.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("bad coordinate"))?;
            let state = State::from_factors([coords[2], coords[3], coords[0], coords[1]]);
            config.check_state(state).map_err(|_| bad("coordinate out of range"))?;
            let i = config.state_index(state);
            for k in 0..4 {
                values[i][k] = fields[4 + k]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| bad("bad value"))?;
            }
            seen[i] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Parse(format!(
                "q-table is missing state {}",
                config.state_at(missing)
            )));
        }
        Ok(Self {
            config: *config,
            values,
            sweeps: 0,
        })
    }
}

/// Anything that picks listener actions.
pub trait Controller {
    fn act(&self, state: State, rng: &mut dyn RngCore) -> Result<Action>;
}

/// Q-table demonstrator at a fixed temperature.
#[derive(Debug, Clone, Copy)]
pub struct TemperedQ<'a> {
    pub q: &'a QTable,
    pub temperature: f64,
}

impl Controller for TemperedQ<'_> {
    fn act(&self, state: State, rng: &mut dyn RngCore) -> Result<Action> {
        self.q.sample_action(state, self.temperature, rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyArch {
    pub kind: String,
    pub grid: GridConfig,
    pub layers: Vec<usize>,
}

/// Feed-forward policy from (possibly relaxed) state features to action
/// logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferentiablePolicy {
    config: GridConfig,
    net: Mlp,
    params: ParamStore,
}

impl DifferentiablePolicy {
    pub const KIND: &'static str = "policy_mlp";

    pub fn new<R: Rng + ?Sized>(config: &GridConfig, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![config.feature_len()];
        sizes.extend_from_slice(hidden);
        sizes.push(Action::COUNT);
        let mut params = ParamStore::new();
        let net = Mlp::new(&mut params, &sizes, rng);
        Self {
            config: *config,
            net,
            params,
        }
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    /// Records the policy on `graph` with the given parameter binding.
    pub fn forward(&self, graph: &mut Graph, params: &Bound, features: Var) -> Result<Var> {
        self.net.forward(graph, params, features)
    }

    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        self.net.predict(&self.params, features)
    }

    pub fn state_logits(&self, state: State) -> Result<[f64; 4]> {
        let f = self.config.encode_state_features(state)?;
        let x = Array2::from_shape_vec((1, f.len()), f).expect("feature row");
        let out = self.logits(&x)?;
        Ok([out[[0, 0]], out[[0, 1]], out[[0, 2]], out[[0, 3]]])
    }

    pub fn greedy_action(&self, state: State) -> Result<Action> {
        let logits = self.state_logits(state)?;
        Action::from_index(crate::env::argmax(&logits))
    }

    pub fn arch(&self) -> PolicyArch {
        PolicyArch {
            kind: Self::KIND.to_string(),
            grid: self.config,
            layers: self.net.sizes().to_vec(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let arch = serde_json::to_value(self.arch()).expect("policy arch serialises");
        Checkpoint::new(arch, &self.params)
    }

    pub fn from_checkpoint(checkpoint: &Checkpoint) -> Result<Self> {
        let arch: PolicyArch = checkpoint.arch_as()?;
        if arch.kind != Self::KIND {
            return Err(Error::Parse(format!("expected a {} checkpoint, got {}", Self::KIND, arch.kind)));
        }
        let sizes = &arch.layers;
        if sizes.len() < 2
            || sizes[0] != arch.grid.feature_len()
            || *sizes.last().unwrap() != Action::COUNT
        {
            return Err(Error::Parse(format!("inconsistent policy layer sizes {sizes:?}")));
        }
        let mut policy = Self::new(
            &arch.grid,
            &sizes[1..sizes.len() - 1],
            &mut crate::rng::seeded(0),
        );
        checkpoint.load_into(&mut policy.params)?;
        Ok(policy)
    }
}

impl Controller for DifferentiablePolicy {
    fn act(&self, state: State, _rng: &mut dyn RngCore) -> Result<Action> {
        self.greedy_action(state)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    /// Steps always taken before the stopping test is consulted.
    pub min_steps: usize,
    pub max_steps: usize,
    pub check_every: usize,
    /// Required gap between the best greedy logit and the best non-greedy one.
    pub margin: f64,
    /// Extra target weight on the first action of a tied greedy set, so the
    /// network's argmax breaks ties deterministically.
    pub tie_preference: f64,
    /// Required gap between the top two logits.
    pub tie_gap: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            learning_rate: 3e-3,
            min_steps: 1000,
            max_steps: 20_000,
            check_every: 100,
            margin: 1.0,
            tie_preference: 0.2,
            tie_gap: 0.05,
        }
    }
}

/// States whose logits violate the greedy-set agreement, the greedy margin,
/// or the gap between the two largest logits.
pub fn inconsistent_states(
    policy: &DifferentiablePolicy,
    q: &QTable,
    margin: f64,
    tie_gap: f64,
) -> Result<Vec<State>> {
    let config = q.config();
    let states: Vec<State> = config.start_states().collect();
    let mut x = Array2::zeros((states.len(), config.feature_len()));
    for (i, s) in states.iter().enumerate() {
        for (j, v) in config.encode_state_features(*s)?.into_iter().enumerate() {
            x[[i, j]] = v;
        }
    }
    let logits = policy.logits(&x)?;
    let mut bad = Vec::new();
    for (i, s) in states.iter().enumerate() {
        let greedy = q.greedy_action_set(*s)?;
        let (mut best_in, mut best_out) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        let mut sorted = [0.0; 4];
        for a in Action::ALL {
            let l = logits[[i, a.index()]];
            sorted[a.index()] = l;
            if greedy.contains(&a) {
                best_in = best_in.max(l);
            } else {
                best_out = best_out.max(l);
            }
        }
        sorted.sort_by(|a, b| b.total_cmp(a));
        if best_in - best_out <= margin || sorted[0] - sorted[1] < tie_gap {
            bad.push(*s);
        }
    }
    Ok(bad)
}

/// Fits a policy network to a near-uniform distribution over each state's
/// greedy actions (the first tied action slightly preferred), over every start state, until its argmax lies in the
/// greedy set everywhere with the configured margin.
pub fn distill_policy<R: Rng + ?Sized>(
    q: &QTable,
    training: &DistillConfig,
    rng: &mut R,
) -> Result<DifferentiablePolicy> {
    let config = *q.config();
    let mut policy = DifferentiablePolicy::new(&config, &training.hidden, rng);

    let states: Vec<State> = config.start_states().collect();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for s in &states {
        let greedy = q.greedy_action_set(*s)?;
        let total = greedy.len() as f64 + training.tie_preference;
        for (k, a) in greedy.iter().enumerate() {
            rows.push(config.encode_state_features(*s)?);
            targets.push(a.index());
            let share = if k == 0 { 1.0 + training.tie_preference } else { 1.0 };
            weights.push(share / (total * states.len() as f64));
        }
    }
    let mut x = Array2::zeros((rows.len(), config.feature_len()));
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            x[[i, j]] = *v;
        }
    }

    let mut opt = Adam::new(AdamConfig::with_learning_rate(training.learning_rate), &policy.params);
    let check_every = training.check_every.max(1);
    for step in 1..=training.max_steps {
        let mut graph = Graph::new();
        let bound = policy.params.bind(&mut graph, true);
        let input = graph.constant(x.clone());
        let logits = policy.net.forward(&mut graph, &bound, input)?;
        let loss = graph.cross_entropy(logits, &targets, &weights);
        nn::backward_and_step(&graph, loss, &bound, &mut policy.params, &mut opt)?;
        if step >= training.min_steps && step % check_every == 0 {
            if inconsistent_states(&policy, q, training.margin, training.tie_gap)?.is_empty() {
                log::debug!("policy distilled after {step} steps");
                return Ok(policy);
            }
        }
    }
    let bad = inconsistent_states(&policy, q, training.margin, training.tie_gap)?;
    if bad.is_empty() {
        return Ok(policy);
    }
    let listed: Vec<String> = bad.iter().take(20).map(|s| s.to_string()).collect();
    Err(Error::TrainingFailure(format!(
        "distilled policy disagrees with the greedy set on {} states after {} steps: {}",
        bad.len(),
        training.max_steps,
        listed.join("; ")
    )))
}
