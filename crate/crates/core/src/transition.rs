//! Learned dynamics model `T(s, a) -> s'` over one-hot state factors.

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{argmax, Action, GridConfig, State};
use crate::error::{domain, Error, Result};
use crate::nn::{self, one_hot_rows, Adam, AdamConfig, Bound, Checkpoint, Graph, Matrix, Mlp, ParamStore, Var};
use crate::planner::Controller;
use crate::rng::{child, DetRng};

/// One observed transition. Serialised as
/// `{"s":[features],"a":action,"next":[gx,gy,lx,ly]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionSample {
    #[serde(rename = "s")]
    pub features: Vec<f64>,
    #[serde(rename = "a")]
    pub action: Action,
    pub next: [usize; 4],
}

/// Rolls out `controller` from fresh start states and records every step,
/// stopping after exactly `count` samples.
pub fn generate_transitions(
    controller: &dyn Controller,
    config: &GridConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<TransitionSample>> {
    let mut out = Vec::with_capacity(count);
    let mut episode = 0u64;
    while out.len() < count {
        let mut rng = child(seed, episode);
        episode += 1;
        let mut state = config.sample_initial(&mut rng)?;
        for _ in 0..config.horizon {
            let action = controller.act(state, &mut rng)?;
            let step = config.step(state, action)?;
            out.push(TransitionSample {
                features: config.encode_state_features(state)?,
                action,
                next: step.next_state.factors(),
            });
            if out.len() == count || step.terminated {
                break;
            }
            state = step.next_state;
        }
    }
    Ok(out)
}

pub fn transitions_to_jsonl(samples: &[TransitionSample]) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn transitions_from_jsonl(text: &str) -> Result<Vec<TransitionSample>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse(format!("transition line {}: {e}", i + 1)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionArch {
    pub kind: String,
    pub grid: GridConfig,
    pub layers: Vec<usize>,
}

/// Feed-forward model from `[state features, action one-hot]` to four groups
/// of next-state factor logits.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionModel {
    config: GridConfig,
    net: Mlp,
    params: ParamStore,
}

impl TransitionModel {
    pub const KIND: &'static str = "transition_mlp";

    pub fn new<R: Rng + ?Sized>(config: &GridConfig, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![config.feature_len() + Action::COUNT];
        sizes.extend_from_slice(hidden);
        sizes.push(config.feature_len());
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

    /// Records the model on `graph`; `actions` holds one-hot action rows.
    pub fn forward(&self, graph: &mut Graph, params: &Bound, features: Var, actions: Var) -> Result<Var> {
        let input = graph.concat_cols(&[features, actions]);
        self.net.forward(graph, params, input)
    }

    pub fn logits(&self, features: &Matrix, actions: &[Action]) -> Result<Matrix> {
        if features.nrows() != actions.len() {
            return Err(domain("one action per feature row"));
        }
        let idx: Vec<usize> = actions.iter().map(|a| a.index()).collect();
        let input = ndarray::concatenate(
            ndarray::Axis(1),
            &[features.view(), one_hot_rows(&idx, Action::COUNT).view()],
        )
        .map_err(|e| domain(e.to_string()))?;
        self.net.predict(&self.params, &input)
    }

    /// Argmax-decoded next state.
    pub fn predict(&self, state: State, action: Action) -> Result<State> {
        let f = self.config.encode_state_features(state)?;
        let x = Array2::from_shape_vec((1, f.len()), f).expect("feature row");
        let logits = self.logits(&x, &[action])?;
        Ok(self.config.argmax_state(logits.row(0).as_slice().expect("contiguous row")))
    }

    /// Mean over samples of the summed per-factor cross-entropy.
    pub fn loss(&self, graph: &mut Graph, params: &Bound, batch: &[&TransitionSample]) -> Result<Var> {
        let width = self.config.feature_len();
        let mut x = Array2::zeros((batch.len(), width));
        for (i, sample) in batch.iter().enumerate() {
            if sample.features.len() != width {
                return Err(domain(format!(
                    "transition sample has {} features, expected {width}",
                    sample.features.len()
                )));
            }
            x.row_mut(i).assign(&ndarray::ArrayView1::from(&sample.features[..]));
        }
        let actions: Vec<usize> = batch.iter().map(|s| s.action.index()).collect();
        let features = graph.constant(x);
        let actions = graph.constant(one_hot_rows(&actions, Action::COUNT));
        let logits = self.forward(graph, params, features, actions)?;
        let weights = vec![1.0 / batch.len() as f64; batch.len()];
        let mut terms = Vec::with_capacity(4);
        for (k, (offset, size)) in self
            .config
            .factor_offsets()
            .into_iter()
            .zip(self.config.factor_sizes())
            .enumerate()
        {
            let targets: Vec<usize> = batch.iter().map(|s| s.next[k]).collect();
            if let Some(&bad) = targets.iter().find(|&&t| t >= size) {
                return Err(domain(format!("next-state factor {k} value {bad} out of range")));
            }
            let group = graph.slice_cols(logits, offset, size);
            terms.push(graph.cross_entropy(group, &targets, &weights));
        }
        let all = graph.concat_cols(&terms);
        Ok(graph.sum(all))
    }

    pub fn arch(&self) -> TransitionArch {
        TransitionArch {
            kind: Self::KIND.to_string(),
            grid: self.config,
            layers: self.net.sizes().to_vec(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let arch = serde_json::to_value(self.arch()).expect("transition arch serialises");
        Checkpoint::new(arch, &self.params)
    }

    pub fn from_checkpoint(checkpoint: &Checkpoint) -> Result<Self> {
        let arch: TransitionArch = checkpoint.arch_as()?;
        if arch.kind != Self::KIND {
            return Err(Error::Parse(format!("expected a {} checkpoint, got {}", Self::KIND, arch.kind)));
        }
        let f = arch.grid.feature_len();
        let sizes = &arch.layers;
        if sizes.len() < 2 || sizes[0] != f + Action::COUNT || *sizes.last().unwrap() != f {
            return Err(Error::Parse(format!("inconsistent transition layer sizes {sizes:?}")));
        }
        let mut model = Self::new(&arch.grid, &sizes[1..sizes.len() - 1], &mut crate::rng::seeded(0));
        checkpoint.load_into(&mut model.params)?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransitionTrainConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub dataset_size: usize,
}

impl Default for TransitionTrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![96; 4],
            learning_rate: 1e-3,
            steps: 1000,
            batch_size: 512,
            dataset_size: 50_000,
        }
    }
}

/// Trained model plus its per-step minibatch loss.
#[derive(Debug, Clone)]
pub struct TransitionTraining {
    pub model: TransitionModel,
    pub losses: Vec<f64>,
}

impl TransitionTraining {
    /// First 1-based step whose minibatch loss fell below `threshold`.
    pub fn first_step_below(&self, threshold: f64) -> Option<usize> {
        self.losses.iter().position(|&l| l < threshold).map(|i| i + 1)
    }
}

/// Minibatch Adam on the summed factor cross-entropy.
pub fn train_transition(
    config: &GridConfig,
    data: &[TransitionSample],
    training: &TransitionTrainConfig,
    rng: &mut DetRng,
) -> Result<TransitionTraining> {
    if data.is_empty() {
        return Err(domain("transition training needs at least one sample"));
    }
    let model = TransitionModel::new(config, &training.hidden, rng);
    continue_training(model, data, training, rng)
}

/// Same as [`train_transition`] but starting from an existing model.
pub fn continue_training(
    mut model: TransitionModel,
    data: &[TransitionSample],
    training: &TransitionTrainConfig,
    rng: &mut DetRng,
) -> Result<TransitionTraining> {
    if data.is_empty() {
        return Err(domain("transition training needs at least one sample"));
    }
    let mut opt = Adam::new(AdamConfig::with_learning_rate(training.learning_rate), &model.params);
    let batch_size = training.batch_size.clamp(1, data.len());
    let mut losses = Vec::with_capacity(training.steps);
    for step in 0..training.steps {
        let batch: Vec<&TransitionSample> = (0..batch_size)
            .map(|_| &data[rng.random_range(0..data.len())])
            .collect();
        let mut graph = Graph::new();
        let bound = model.params.bind(&mut graph, true);
        let loss = model.loss(&mut graph, &bound, &batch)?;
        let value = nn::backward_and_step(&graph, loss, &bound, &mut model.params, &mut opt)
            .map_err(|e| Error::TrainingFailure(format!("transition training diverged at step {step}: {e}")))?;
        losses.push(value);
    }
    Ok(TransitionTraining { model, losses })
}

/// Per-factor argmax accuracy of single-step predictions.
pub fn factor_accuracy(model: &TransitionModel, data: &[TransitionSample]) -> Result<[f64; 4]> {
    if data.is_empty() {
        return Err(domain("no samples to evaluate"));
    }
    let config = model.config;
    let mut x = Array2::zeros((data.len(), config.feature_len()));
    for (i, sample) in data.iter().enumerate() {
        x.row_mut(i).assign(&ndarray::ArrayView1::from(&sample.features[..]));
    }
    let actions: Vec<Action> = data.iter().map(|s| s.action).collect();
    let logits = model.logits(&x, &actions)?;
    let mut hits = [0usize; 4];
    for (i, sample) in data.iter().enumerate() {
        for (k, (offset, size)) in config
            .factor_offsets()
            .into_iter()
            .zip(config.factor_sizes())
            .enumerate()
        {
            let row = logits.slice(s![i, offset..offset + size]);
            if argmax(&row.to_vec()) == sample.next[k] {
                hits[k] += 1;
            }
        }
    }
    Ok(hits.map(|h| h as f64 / data.len() as f64))
}

/// Fraction of states predicted exactly when the model is rolled forward on
/// its own argmax-decoded predictions along `controller`'s true trajectories,
/// starting from each of `starts`.
pub fn rollout_accuracy_from(
    model: &TransitionModel,
    controller: &dyn Controller,
    starts: &[State],
    seed: u64,
) -> Result<f64> {
    let config = model.config;
    let (mut matched, mut total) = (0usize, 0usize);
    for (episode, &start) in starts.iter().enumerate() {
        let mut rng = child(seed, episode as u64);
        let mut truth = start;
        let mut predicted = start;
        for _ in 0..config.horizon {
            let action = controller.act(truth, &mut rng)?;
            let step = config.step(truth, action)?;
            predicted = model.predict(predicted, action)?;
            total += 1;
            if predicted == step.next_state {
                matched += 1;
            }
            if step.terminated {
                break;
            }
            truth = step.next_state;
        }
    }
    if total == 0 {
        return Err(domain("no episodes to evaluate"));
    }
    Ok(matched as f64 / total as f64)
}

/// [`rollout_accuracy_from`] over `episodes` freshly sampled start states.
pub fn rollout_accuracy(
    model: &TransitionModel,
    controller: &dyn Controller,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    let config = model.config;
    let mut rng = child(seed, u64::MAX);
    let starts = (0..episodes)
        .map(|_| config.sample_initial(&mut rng))
        .collect::<Result<Vec<_>>>()?;
    rollout_accuracy_from(model, controller, &starts, seed)
}
