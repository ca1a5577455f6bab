//! Pipeline stages. Each reads its upstream artifacts from the output
//! directory, writes its own, records a manifest and returns a short report.

use std::fmt::Write as _;

use commdecode::demos::{assign_messages, demos_from_jsonl, generate_demos, MessageMapping};
use commdecode::equiv::{verify_optimal_union, MicroDecPomdpComm};
use commdecode::exact_decoder::{decode_dataset, Demonstration};
use commdecode::nn::Checkpoint;
use commdecode::planner::{distill_policy, value_iteration, DifferentiablePolicy, QTable, TemperedQ};
use commdecode::rng::{derive_seed, seeded};
use commdecode::state_decoder::{evaluate, train_state_decoder, DecoderParams, Frozen, Metrics, SimulatedSource};
use commdecode::transition::{generate_transitions, rollout_accuracy, train_transition, TransitionModel};
use serde::{Deserialize, Serialize};

use crate::config::{sha256_file, RunConfig};
use crate::error::{CliError, CliResult};
use crate::heatmap::{parse_heatmap_csv, render_svg};
use crate::manifest::write_manifest;

pub const QTABLE: &str = "qtable.csv";
pub const POLICY: &str = "policy.json";
pub const PLAN_REPORT: &str = "plan_report.json";
pub const TRANSITION: &str = "transition.json";
pub const TRANSITION_LOG: &str = "transition_log.csv";
pub const TRANSITION_REPORT: &str = "transition_report.json";
pub const MAPPING: &str = "mapping.json";
pub const DEMOS: &str = "demos.jsonl";
pub const DEMOS_META: &str = "demos_meta.json";
pub const DECODER: &str = "decoder.json";
pub const DECODER_LOG: &str = "decoder_log.csv";
pub const GOALS: &str = "goals.json";
pub const DECODE_REPORT: &str = "decode_report.json";
pub const METRICS: &str = "metrics.json";
pub const HEATMAP_CSV: &str = "heatmap.csv";
pub const HEATMAP_SVG: &str = "heatmap.svg";
pub const EQUIV_REPORT: &str = "equiv_report.json";
pub const EQUIV_TABLE: &str = "equiv_report.txt";

// Random stream identifiers under the run seed.
const DISTILL: u64 = 1;
const TRANSITION_DATA: u64 = 2;
const TRANSITION_TRAIN: u64 = 3;
const TRANSITION_EVAL: u64 = 4;
const MESSAGES: u64 = 5;
const DEMO_STREAM: u64 = 6;
const DECODER_INIT: u64 = 7;
const DECODER_SOURCE: u64 = 8;
const DECODER_TRAIN: u64 = 9;

/// Thresholds enforced by `eval-decoder --assert`.
pub const MIN_ACCURACY: f64 = 0.40;
pub const MAX_GOAL_DISTANCE: usize = 2;
pub const MIN_NEAR_MISS_SHARE: f64 = 0.8;
pub const MIN_DEMOS_PER_GOAL: usize = 100;

fn read(config: &RunConfig, name: &str) -> CliResult<String> {
    let path = config.path(name);
    std::fs::read_to_string(&path).map_err(|_| CliError::Missing(path))
}

fn write(config: &RunConfig, name: &str, contents: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::create_dir_all(&config.output_dir)?;
    std::fs::write(config.path(name), contents)?;
    Ok(())
}

fn write_json<T: Serialize>(config: &RunConfig, name: &str, value: &T) -> CliResult<()> {
    write(config, name, serde_json::to_string_pretty(value)? + "\n")
}

fn stream(config: &RunConfig, id: u64) -> u64 {
    derive_seed(config.seed, id)
}

fn load_qtable(config: &RunConfig) -> CliResult<QTable> {
    Ok(QTable::from_csv(&config.env, &read(config, QTABLE)?)?)
}

fn load_checkpoint(config: &RunConfig, name: &str) -> CliResult<Checkpoint> {
    Ok(Checkpoint::from_json(&read(config, name)?)?)
}

fn load_demos(config: &RunConfig) -> CliResult<Vec<Demonstration>> {
    Ok(demos_from_jsonl(&read(config, DEMOS)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub sweeps: usize,
    pub start_states: usize,
    /// Start states whose optimal return is 2 minus the Manhattan distance.
    pub optimal_values: usize,
    /// Start states the distilled policy solves greedily in exactly d steps.
    pub shortest_rollouts: usize,
}

pub fn plan(config: &RunConfig) -> CliResult<String> {
    let env = &config.env;
    let q = value_iteration(env)?;
    let policy = distill_policy(&q, &config.planner, &mut seeded(stream(config, DISTILL)))?;
    let mut report = PlanReport {
        sweeps: q.sweeps(),
        start_states: 0,
        optimal_values: 0,
        shortest_rollouts: 0,
    };
    for start in env.start_states() {
        report.start_states += 1;
        let d = start.distance();
        if (q.value(start) - (2.0 - d as f64)).abs() < 1e-9 {
            report.optimal_values += 1;
        }
        let mut s = start;
        let mut steps = 0;
        while steps < env.horizon && !s.is_terminal() {
            s = env.step(s, policy.greedy_action(s)?)?.next_state;
            steps += 1;
        }
        if s.is_terminal() && steps == d {
            report.shortest_rollouts += 1;
        }
    }
    write(config, QTABLE, q.to_csv())?;
    write(config, POLICY, policy.to_checkpoint().to_json()?)?;
    write_json(config, PLAN_REPORT, &report)?;
    write_manifest(config, "plan", &[], &[QTABLE, POLICY, PLAN_REPORT])?;
    Ok(format!(
        "value iteration converged in {} sweeps\noptimal values {}/{}\ndistilled policy shortest rollouts {}/{}\n",
        report.sweeps, report.optimal_values, report.start_states, report.shortest_rollouts, report.start_states
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    pub steps: usize,
    pub final_loss: f64,
    pub first_step_below_1e_3: Option<usize>,
    pub rollout_episodes: usize,
    pub rollout_accuracy: f64,
}

pub fn train_transition_stage(config: &RunConfig) -> CliResult<String> {
    let q = load_qtable(config)?;
    let controller = TemperedQ { q: &q, temperature: 0.0 };
    let training = config.transition.training();
    let data = generate_transitions(
        &controller,
        &config.env,
        training.dataset_size,
        stream(config, TRANSITION_DATA),
    )?;
    let out = train_transition(&config.env, &data, &training, &mut seeded(stream(config, TRANSITION_TRAIN)))?;
    let accuracy = rollout_accuracy(
        &out.model,
        &controller,
        config.transition.eval_episodes,
        stream(config, TRANSITION_EVAL),
    )?;
    let report = TransitionReport {
        steps: out.losses.len(),
        final_loss: out.losses.last().copied().unwrap_or(f64::NAN),
        first_step_below_1e_3: out.first_step_below(1e-3),
        rollout_episodes: config.transition.eval_episodes,
        rollout_accuracy: accuracy,
    };
    let mut log = String::from("step,loss\n");
    for (i, l) in out.losses.iter().enumerate() {
        let _ = writeln!(log, "{},{l}", i + 1);
    }
    write(config, TRANSITION, out.model.to_checkpoint().to_json()?)?;
    write(config, TRANSITION_LOG, log)?;
    write_json(config, TRANSITION_REPORT, &report)?;
    write_manifest(config, "train-transition", &[QTABLE], &[TRANSITION, TRANSITION_LOG, TRANSITION_REPORT])?;
    Ok(format!(
        "final loss {:.3e}, first step below 1e-3: {}\nself-rollout accuracy {:.4} over {} episodes\n",
        report.final_loss,
        report.first_step_below_1e_3.map_or("never".to_string(), |s| s.to_string()),
        report.rollout_accuracy,
        report.rollout_episodes
    ))
}

pub fn gen_demos(config: &RunConfig) -> CliResult<String> {
    let q = load_qtable(config)?;
    let mapping = assign_messages(&config.env, stream(config, MESSAGES))?;
    let policy_id = sha256_file(&config.path(QTABLE))?;
    let data = generate_demos(
        &q,
        &mapping,
        config.demos.count,
        config.demos.temperature,
        stream(config, DEMO_STREAM),
        &policy_id,
    )?;
    write(config, MAPPING, mapping.to_json()?)?;
    write(config, DEMOS, data.to_jsonl()?)?;
    write_json(config, DEMOS_META, &data.metadata)?;
    write_manifest(config, "gen-demos", &[QTABLE], &[MAPPING, DEMOS, DEMOS_META])?;
    Ok(format!(
        "{} demonstrations from {} attempts ({} discarded without termination)\n",
        data.demos.len(),
        data.metadata.attempts,
        data.metadata.discarded_unterminated
    ))
}

pub fn train_decoder(config: &RunConfig) -> CliResult<String> {
    let q = load_qtable(config)?;
    let policy = DifferentiablePolicy::from_checkpoint(&load_checkpoint(config, POLICY)?)?;
    let transition = TransitionModel::from_checkpoint(&load_checkpoint(config, TRANSITION)?)?;
    let mapping = MessageMapping::from_json(&read(config, MAPPING)?)?;
    let frozen = Frozen {
        policy: &policy,
        transition: &transition,
    };
    let params = DecoderParams::new(&config.env, config.decoder.hidden, &mut seeded(stream(config, DECODER_INIT)));
    let mut source = SimulatedSource::new(
        &q,
        &mapping,
        config.demos.temperature,
        seeded(stream(config, DECODER_SOURCE)),
    );
    let out = train_state_decoder(
        params,
        &frozen,
        &mut source,
        &config.decoder,
        Some(&mapping),
        &mut seeded(stream(config, DECODER_TRAIN)),
    )?;
    write(config, DECODER, out.params.to_checkpoint().to_json()?)?;
    write(config, DECODER_LOG, out.log_csv())?;
    write_manifest(config, "train-decoder", &[QTABLE, POLICY, TRANSITION, MAPPING], &[DECODER, DECODER_LOG])?;
    let last = out.log.last().expect("at least one step");
    Ok(format!(
        "{} steps, final loss {:.4}, tau {:.3}, mapping accuracy {:.3}\n",
        last.step,
        last.loss,
        last.tau,
        last.eval_accuracy.unwrap_or(f64::NAN)
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeReport {
    pub demos: usize,
    pub messages: usize,
    /// Demos whose recorded goal lies in their message's decoded set.
    pub true_goal_retained: usize,
    pub demos_with_ground_truth: usize,
    pub diagnostics: Vec<commdecode::exact_decoder::Diagnostic>,
}

pub fn decode_exact(config: &RunConfig) -> CliResult<String> {
    let q = load_qtable(config)?;
    let demos = load_demos(config)?;
    let decoded = decode_dataset(&demos, &q, &config.env)?;
    let mut report = DecodeReport {
        demos: demos.len(),
        messages: decoded.goals.len(),
        true_goal_retained: 0,
        demos_with_ground_truth: 0,
        diagnostics: decoded.diagnostics.clone(),
    };
    for d in &demos {
        if let Some(truth) = &d.oracle {
            report.demos_with_ground_truth += 1;
            if decoded.goals[&d.message].contains(&truth.goal) {
                report.true_goal_retained += 1;
            }
        }
    }
    write(config, GOALS, decoded.to_json()?)?;
    write_json(config, DECODE_REPORT, &report)?;
    write_manifest(config, "decode-exact", &[QTABLE, DEMOS], &[GOALS, DECODE_REPORT])?;
    Ok(format!(
        "{}true goal retained for {}/{} demonstrations\n",
        decoded.table(),
        report.true_goal_retained,
        report.demos_with_ground_truth
    ))
}

/// Failed thresholds, empty when every one holds.
pub fn threshold_failures(metrics: &Metrics) -> Vec<String> {
    let mut failures = Vec::new();
    if metrics.accuracy < MIN_ACCURACY {
        failures.push(format!("accuracy {:.4} < {MIN_ACCURACY}", metrics.accuracy));
    }
    if metrics.max_goal_distance() > MAX_GOAL_DISTANCE {
        failures.push(format!(
            "a prediction lies {} steps from its goal (limit {MAX_GOAL_DISTANCE})",
            metrics.max_goal_distance()
        ));
    }
    if metrics.near_miss_share() < MIN_NEAR_MISS_SHARE {
        failures.push(format!(
            "only {:.2} of misses are one step away (need {MIN_NEAR_MISS_SHARE})",
            metrics.near_miss_share()
        ));
    }
    if let Some(g) = metrics.goals.iter().find(|g| g.demos < MIN_DEMOS_PER_GOAL) {
        failures.push(format!(
            "goal {} has {} evaluation demos (need {MIN_DEMOS_PER_GOAL})",
            g.goal, g.demos
        ));
    }
    failures
}

pub fn eval_decoder(config: &RunConfig, assert: bool) -> CliResult<(String, Metrics)> {
    let params = DecoderParams::from_checkpoint(&load_checkpoint(config, DECODER)?)?;
    let demos = load_demos(config)?;
    let metrics = evaluate(&params, &demos)?;
    let csv = metrics.heatmap_csv(&config.env);
    let svg = render_svg(&parse_heatmap_csv(&csv)?);
    write_json(config, METRICS, &metrics)?;
    write(config, HEATMAP_CSV, csv)?;
    write(config, HEATMAP_SVG, svg)?;
    write_manifest(config, "eval-decoder", &[DECODER, DEMOS], &[METRICS, HEATMAP_CSV, HEATMAP_SVG])?;
    let mut text = metrics.table();
    let _ = writeln!(
        text,
        "max goal distance {}, near-miss share {:.2}",
        metrics.max_goal_distance(),
        metrics.near_miss_share()
    );
    if assert {
        let failures = threshold_failures(&metrics);
        if !failures.is_empty() {
            print!("{text}");
            return Err(CliError::Threshold(failures.join("; ")));
        }
    }
    Ok((text, metrics))
}

pub fn analyze_equiv(config: &RunConfig) -> CliResult<String> {
    let instance = match &config.equiv.instance {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|_| CliError::Missing(path.clone()))?;
            MicroDecPomdpComm::from_json(&text)?
        }
        None => MicroDecPomdpComm::corridor(),
    };
    let report = verify_optimal_union(&instance, config.equiv.cap as u128)?;
    let table = report.table();
    write_json(config, EQUIV_REPORT, &report)?;
    write(config, EQUIV_TABLE, &table)?;
    write_manifest(config, "analyze-equiv", &[], &[EQUIV_REPORT, EQUIV_TABLE])?;
    Ok(table)
}

pub fn all(config: &RunConfig) -> CliResult<String> {
    let mut out = String::new();
    let stages: [(&str, fn(&RunConfig) -> CliResult<String>); 7] = [
        ("plan", plan),
        ("train-transition", train_transition_stage),
        ("gen-demos", gen_demos),
        ("train-decoder", train_decoder),
        ("decode-exact", decode_exact),
        ("eval-decoder", |c| eval_decoder(c, false).map(|r| r.0)),
        ("analyze-equiv", analyze_equiv),
    ];
    for (name, stage) in stages {
        log::info!("stage {name}");
        let _ = writeln!(out, "== {name}");
        out.push_str(&stage(config)?);
    }
    Ok(out)
}
