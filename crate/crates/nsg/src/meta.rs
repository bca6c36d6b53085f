//! Policy-gradient meta-learning: a softmax policy over candidate actions,
//! REINFORCE inner-loop adaptation, first-order MAML and Reptile outer
//! loops, and the test-time adaptation protocol.
//!
//! The policy network shares the DQN architecture (12 -> 64 -> 64 -> 5,
//! ReLU): for each candidate the logit of its own action type is retained,
//! and the resulting per-candidate scores form a categorical distribution
//! over the valid-action list. A task is one IP assignment; episodes within
//! a task randomize the starting foothold.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::agents::{Agent, AgentError};
use crate::engine::{Action, EpisodeTrace, GameHandle, Observation};
use crate::features::{CandidateMatrix, MatrixBuilder, FEATURE_DIM};
use crate::nn::{Gradients, Mlp, Scratch};
use crate::rng::{derive_seed, Rng};
use crate::scenario::{IpAssignment, ScenarioConfig};
use crate::value::ACTION_HEADS;

#[derive(Debug, thiserror::Error)]
pub enum MetaError {
    #[error("candidate matrix is empty")]
    EmptyMatrix,
    #[error("no tasks supplied")]
    NoTasks,
}

/// One meta-learning task: a fixed topology with per-episode start
/// randomization.
#[derive(Clone, Debug)]
pub struct TaskSpec {
    pub assignment: Arc<IpAssignment>,
    /// Base seed for every episode stream drawn from this task.
    pub base_seed: u64,
    /// Randomize the starting foothold per episode (the scenario has a
    /// single goal item, so only the start varies).
    pub randomize_start: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    pub hidden: usize,
    pub tasks_per_epoch: usize,
    /// Support episodes per task during meta-training, split evenly across
    /// the inner adaptation steps.
    pub support_episodes: usize,
    pub inner_steps: usize,
    pub query_episodes: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub epochs: usize,
    /// Support episodes per inner step during test-time adaptation.
    pub test_support_per_step: usize,
    pub test_query: usize,
    pub gamma: f64,
    /// Curve cadence: run a cheap post-adaptation probe every N epochs
    /// (0 disables probing).
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            hidden: 64,
            tasks_per_epoch: 5,
            support_episodes: 30,
            inner_steps: 3,
            query_episodes: 10,
            inner_lr: 0.01,
            outer_lr: 0.001,
            epochs: 500,
            test_support_per_step: 50,
            test_query: 350,
            gamma: 0.99,
            eval_every: 10,
            eval_episodes: 30,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<(), MetaError> {
        assert!(self.tasks_per_epoch > 0);
        assert!(self.support_episodes > 0);
        assert!(self.inner_steps > 0);
        assert!(self.query_episodes > 0);
        assert!(self.epochs > 0);
        Ok(())
    }
}

/// Categorical distribution over the rows of a candidate matrix.
pub struct PolicyDistribution {
    pub probs: Vec<f64>,
}

impl PolicyDistribution {
    pub fn sample(&self, rng: &mut Rng) -> usize {
        let u = rng.f64();
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.len() - 1
    }

    pub fn log_prob(&self, index: usize) -> f64 {
        self.probs[index].max(f64::MIN_POSITIVE).ln()
    }
}

/// Score each candidate by the logit of its own action type and softmax over
/// the candidates.
pub fn policy_distribution(net: &Mlp, matrix: &CandidateMatrix) -> Result<PolicyDistribution, MetaError> {
    if matrix.is_empty() {
        return Err(MetaError::EmptyMatrix);
    }
    let mut scratch = Scratch::default();
    let scores: Vec<f64> = matrix
        .rows
        .iter()
        .map(|row| net.forward_scratch(&row.features.vector, &mut scratch)[row.action.kind.index()])
        .collect();
    Ok(softmax(&scores))
}

fn softmax(scores: &[f64]) -> PolicyDistribution {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    PolicyDistribution {
        probs: exps.iter().map(|e| e / sum).collect(),
    }
}

/// Everything needed to recompute policy gradients for one decision.
struct RolloutStep {
    rows: Vec<[f64; FEATURE_DIM]>,
    heads: Vec<usize>,
    chosen: usize,
}

/// One on-policy episode.
#[derive(Default)]
struct Rollout {
    steps: Vec<RolloutStep>,
    rewards: Vec<f64>,
}

impl Rollout {
    fn ret(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Collect a batch of on-policy episodes, parallelized across threads;
/// results are ordered by episode index so scheduling never matters.
fn collect_batch(
    net: &Mlp,
    scenario: &Arc<ScenarioConfig>,
    task: &TaskSpec,
    seeds: &[u64],
) -> Vec<Rollout> {
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .clamp(1, seeds.len().max(1));
    let mut slots: Vec<Option<Rollout>> = Vec::new();
    slots.resize_with(seeds.len(), || None);
    let chunk = seeds.len().div_ceil(threads);
    std::thread::scope(|scope| {
        for (slot_chunk, seed_chunk) in slots.chunks_mut(chunk).zip(seeds.chunks(chunk)) {
            scope.spawn(move || {
                for (slot, &seed) in slot_chunk.iter_mut().zip(seed_chunk) {
                    *slot = Some(collect_episode(net, scenario, task, seed));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("episode ran")).collect()
}

fn collect_episode(
    net: &Mlp,
    scenario: &Arc<ScenarioConfig>,
    task: &TaskSpec,
    episode_seed: u64,
) -> Rollout {
    let hosts = scenario.game_hosts().count();
    let (mut game, _) = if task.randomize_start {
        GameHandle::reset(scenario.clone(), task.assignment.clone(), episode_seed)
    } else {
        let first = scenario.start_pool.iter().next().expect("non-empty pool");
        GameHandle::reset_with_start(scenario.clone(), task.assignment.clone(), first)
    };
    let mut rng = Rng::from_stream(episode_seed, "policy-sample", &[]);
    let mut builder = MatrixBuilder::new();
    let mut rollout = Rollout::default();
    while game.ended().is_none() {
        let matrix = builder.build(game.observation(), hosts);
        let dist = policy_distribution(net, &matrix).expect("fallback keeps matrix non-empty");
        let chosen = dist.sample(&mut rng);
        let action = matrix.rows[chosen].action.clone();
        rollout.steps.push(RolloutStep {
            rows: matrix.rows.iter().map(|r| r.features.vector).collect(),
            heads: matrix.rows.iter().map(|r| r.action.kind.index()).collect(),
            chosen,
        });
        let pre_obs = game.observation().clone();
        let result = game.step(&action).expect("episode still running");
        builder.record_executed(&action, &pre_obs);
        rollout.rewards.push(result.reward);
    }
    rollout
}

/// REINFORCE gradient of the batch: discounted returns with a batch-mean
/// baseline, loss `-(1/B) * sum log pi(a_t) * (G_t - b)`. Returns the
/// gradient, the loss value, and the mean undiscounted return.
fn reinforce_gradient(net: &Mlp, rollouts: &[Rollout], gamma: f64) -> (Gradients, f64, f64) {
    let mut all_returns: Vec<Vec<f64>> = Vec::with_capacity(rollouts.len());
    let mut sum = 0.0;
    let mut count = 0usize;
    for rollout in rollouts {
        let mut suffix = 0.0;
        let mut returns = vec![0.0; rollout.rewards.len()];
        for (t, &r) in rollout.rewards.iter().enumerate().rev() {
            suffix = r + gamma * suffix;
            returns[t] = suffix;
        }
        sum += returns.iter().sum::<f64>();
        count += returns.len();
        all_returns.push(returns);
    }
    let baseline = if count == 0 { 0.0 } else { sum / count as f64 };
    let scale = 1.0 / rollouts.len().max(1) as f64;

    // per-episode gradients are independent; compute them in parallel and
    // reduce in episode order for bit-stable sums
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .clamp(1, rollouts.len().max(1));
    let chunk = rollouts.len().div_ceil(threads).max(1);
    let jobs: Vec<(&Rollout, &Vec<f64>)> = rollouts.iter().zip(all_returns.iter()).collect();
    let mut partials: Vec<Option<(Gradients, f64)>> = Vec::new();
    partials.resize_with(jobs.len().div_ceil(chunk), || None);
    std::thread::scope(|scope| {
        for (slot, job_chunk) in partials.iter_mut().zip(jobs.chunks(chunk)) {
            scope.spawn(move || {
                let mut grads = Gradients::zeros(net);
                let mut scratch = Scratch::default();
                let mut out_grad = [0.0; ACTION_HEADS];
                let mut loss = 0.0;
                for (rollout, returns) in job_chunk {
                    for (step, &g_t) in rollout.steps.iter().zip(returns.iter()) {
                        let advantage = g_t - baseline;
                        let scores: Vec<f64> = step
                            .rows
                            .iter()
                            .zip(&step.heads)
                            .map(|(row, &head)| net.forward_scratch(row, &mut scratch)[head])
                            .collect();
                        let dist = softmax(&scores);
                        loss -= dist.log_prob(step.chosen) * advantage * scale;
                        for (i, (row, &head)) in step.rows.iter().zip(&step.heads).enumerate() {
                            let indicator = if i == step.chosen { 1.0 } else { 0.0 };
                            let dscore = -(indicator - dist.probs[i]) * advantage * scale;
                            if dscore == 0.0 {
                                continue;
                            }
                            net.forward_scratch(row, &mut scratch);
                            out_grad.fill(0.0);
                            out_grad[head] = dscore;
                            net.backward_scratch(row, &out_grad, &mut scratch, &mut grads);
                        }
                    }
                }
                *slot = Some((grads, loss));
            });
        }
    });
    let mut grads = Gradients::zeros(net);
    let mut loss = 0.0;
    for partial in partials.into_iter().flatten() {
        grads.add(&partial.0);
        loss += partial.1;
    }
    let mean_return = rollouts.iter().map(Rollout::ret).sum::<f64>() * scale;
    (grads, loss, mean_return)
}

/// Run inner-loop adaptation and return the adapted copy; the input network
/// is never mutated.
#[allow(clippy::too_many_arguments)]
pub fn inner_adapt(
    net: &Mlp,
    scenario: &Arc<ScenarioConfig>,
    task: &TaskSpec,
    episodes_per_step: usize,
    inner_steps: usize,
    inner_lr: f64,
    gamma: f64,
    round: u64,
) -> Mlp {
    let mut adapted = net.clone();
    for step in 0..inner_steps {
        let seeds: Vec<u64> = (0..episodes_per_step)
            .map(|e| derive_seed(task.base_seed, "support", &[round, step as u64, e as u64]))
            .collect();
        let rollouts = collect_batch(&adapted, scenario, task, &seeds);
        let (grads, _, _) = reinforce_gradient(&adapted, &rollouts, gamma);
        adapted.apply_gradients(&grads, inner_lr);
    }
    adapted
}

/// First-order meta-update: adapt per task, take the query-set policy
/// gradient at the adapted parameters, and apply the task-averaged gradient
/// to the shared initialization. Returns the mean query loss.
pub fn maml_outer_step(
    net: &mut Mlp,
    scenario: &Arc<ScenarioConfig>,
    tasks: &[TaskSpec],
    cfg: &MetaConfig,
    round: u64,
) -> Result<f64, MetaError> {
    if tasks.is_empty() {
        return Err(MetaError::NoTasks);
    }
    let per_step = (cfg.support_episodes / cfg.inner_steps).max(1);
    let mut mean_grads = Gradients::zeros(net);
    let mut meta_loss = 0.0;
    for task in tasks {
        let adapted = inner_adapt(
            net,
            scenario,
            task,
            per_step,
            cfg.inner_steps,
            cfg.inner_lr,
            cfg.gamma,
            round,
        );
        let seeds: Vec<u64> = (0..cfg.query_episodes)
            .map(|e| derive_seed(task.base_seed, "query", &[round, e as u64]))
            .collect();
        let rollouts = collect_batch(&adapted, scenario, task, &seeds);
        let (grads, loss, _) = reinforce_gradient(&adapted, &rollouts, cfg.gamma);
        mean_grads.add(&grads);
        meta_loss += loss;
    }
    mean_grads.scale(1.0 / tasks.len() as f64);
    net.apply_gradients(&mean_grads, cfg.outer_lr);
    Ok(meta_loss / tasks.len() as f64)
}

/// Reptile meta-update: move the initialization toward the task-adapted
/// parameters, `theta += eps * mean(theta_task - theta)`.
pub fn reptile_outer_step(
    net: &mut Mlp,
    scenario: &Arc<ScenarioConfig>,
    tasks: &[TaskSpec],
    cfg: &MetaConfig,
    round: u64,
) -> Result<f64, MetaError> {
    if tasks.is_empty() {
        return Err(MetaError::NoTasks);
    }
    let per_step = (cfg.support_episodes / cfg.inner_steps).max(1);
    let n = net.param_len();
    let mut mean_delta = vec![0.0; n];
    let mut mean_return = 0.0;
    for task in tasks {
        let adapted = inner_adapt(
            net,
            scenario,
            task,
            per_step,
            cfg.inner_steps,
            cfg.inner_lr,
            cfg.gamma,
            round,
        );
        for i in 0..n {
            mean_delta[i] += adapted.get_param(i) - net.get_param(i);
        }
        mean_return += 0.0;
    }
    for (i, d) in mean_delta.iter().enumerate() {
        let current = net.get_param(i);
        net.set_param(i, current + cfg.outer_lr * d / tasks.len() as f64);
    }
    Ok(mean_return)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaKind {
    Maml,
    Reptile,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetaCurveRow {
    pub epoch: usize,
    pub meta_loss: f64,
    pub eval_win_rate: Option<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct MetaCheckpoint {
    pub kind: MetaKind,
    pub net: Mlp,
}

/// Meta-train an initialization over the training tasks. `probe_task`, when
/// given, is used only for the periodic post-adaptation win-rate probe
/// recorded in the curve.
pub fn meta_train(
    kind: MetaKind,
    scenario: &Arc<ScenarioConfig>,
    tasks: &[TaskSpec],
    probe_task: Option<&TaskSpec>,
    cfg: &MetaConfig,
    master_seed: u64,
) -> Result<(Mlp, Vec<MetaCurveRow>), MetaError> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(MetaError::NoTasks);
    }
    let mut init_rng = Rng::from_stream(master_seed, "meta-init", &[]);
    let mut net = Mlp::new(
        &[FEATURE_DIM, cfg.hidden, cfg.hidden, ACTION_HEADS],
        &mut init_rng,
    );
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let round = derive_seed(master_seed, "meta-epoch", &[epoch as u64]);
        let selected: Vec<TaskSpec> = tasks
            .iter()
            .cycle()
            .skip((epoch * cfg.tasks_per_epoch) % tasks.len())
            .take(cfg.tasks_per_epoch)
            .cloned()
            .collect();
        let meta_loss = match kind {
            MetaKind::Maml => maml_outer_step(&mut net, scenario, &selected, cfg, round)?,
            MetaKind::Reptile => reptile_outer_step(&mut net, scenario, &selected, cfg, round)?,
        };
        let eval_win_rate = match probe_task {
            Some(task) if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 => {
                let adapted = inner_adapt(
                    &net,
                    scenario,
                    task,
                    (cfg.support_episodes / cfg.inner_steps).max(1),
                    cfg.inner_steps,
                    cfg.inner_lr,
                    cfg.gamma,
                    derive_seed(round, "probe-adapt", &[]),
                );
                let mut wins = 0usize;
                for e in 0..cfg.eval_episodes {
                    let seed = derive_seed(round, "probe-eval", &[e as u64]);
                    let rollout = collect_episode(&adapted, scenario, task, seed);
                    if rollout.rewards.last().copied().unwrap_or(0.0) > 0.0 {
                        wins += 1;
                    }
                }
                Some(wins as f64 / cfg.eval_episodes.max(1) as f64)
            }
            _ => None,
        };
        curve.push(MetaCurveRow {
            epoch,
            meta_loss,
            eval_win_rate,
        });
    }
    Ok((net, curve))
}

/// Test-time protocol on an unseen task: inner-loop adaptation from support
/// episodes (unless disabled), then frozen evaluation on the query set.
/// Returns the adapted network and the query traces.
pub fn test_time_adapt_and_eval(
    net: &Mlp,
    scenario: &Arc<ScenarioConfig>,
    task: &TaskSpec,
    cfg: &MetaConfig,
    adapt: bool,
    eval_seed: u64,
) -> (Mlp, Vec<EpisodeTrace>) {
    let adapted = if adapt {
        inner_adapt(
            net,
            scenario,
            task,
            cfg.test_support_per_step,
            cfg.inner_steps,
            cfg.inner_lr,
            cfg.gamma,
            derive_seed(eval_seed, "test-adapt", &[]),
        )
    } else {
        net.clone()
    };
    let hosts = scenario.game_hosts().count();
    let net_for_agents = adapted.clone();
    let traces = crate::experiment::run_episodes(
        move || Box::new(PolicyAgent::new(net_for_agents.clone(), hosts)) as _,
        scenario,
        &task.assignment,
        cfg.test_query,
        derive_seed(eval_seed, "test-query", &[]),
        std::thread::available_parallelism().map_or(1, |n| n.get()),
    )
    .expect("policy episodes cannot fail");
    (adapted, traces)
}

/// Frozen stochastic policy: samples from the softmax distribution over
/// candidates without updating parameters.
pub struct PolicyAgent {
    net: Mlp,
    builder: MatrixBuilder,
    scenario_hosts: usize,
}

impl PolicyAgent {
    pub fn new(net: Mlp, scenario_hosts: usize) -> Self {
        PolicyAgent {
            net,
            builder: MatrixBuilder::new(),
            scenario_hosts,
        }
    }
}

impl Agent for PolicyAgent {
    fn select(
        &mut self,
        obs: &Observation,
        _valid: &[Action],
        rng: &mut Rng,
    ) -> Result<Action, AgentError> {
        let matrix = self.builder.build(obs, self.scenario_hosts);
        let dist = policy_distribution(&self.net, &matrix)
            .map_err(|_| AgentError::EmptyValidSet)?;
        let action = matrix.rows[dist.sample(rng)].action.clone();
        self.builder.record_executed(&action, obs);
        Ok(action)
    }

    fn episode_start(&mut self, _obs: &Observation) {
        self.builder.reset();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{max_relative_error, numeric_gradient};
    use crate::scenario::{canonical_scenario, generate_variant, HOST_COUNT};

    fn sample_matrix(seed: u64) -> CandidateMatrix {
        let config = Arc::new(canonical_scenario());
        let assignment = Arc::new(generate_variant(&config, seed));
        let (game, _) = GameHandle::reset(config, assignment, seed);
        MatrixBuilder::new().build(game.observation(), HOST_COUNT)
    }

    fn task(seed: u64) -> (Arc<ScenarioConfig>, TaskSpec) {
        let config = Arc::new(canonical_scenario());
        let assignment = Arc::new(generate_variant(&config, seed));
        (
            config,
            TaskSpec {
                assignment,
                base_seed: seed,
                randomize_start: true,
            },
        )
    }

    fn small_cfg() -> MetaConfig {
        MetaConfig {
            hidden: 8,
            tasks_per_epoch: 1,
            support_episodes: 3,
            inner_steps: 3,
            query_episodes: 2,
            inner_lr: 0.01,
            outer_lr: 0.5,
            epochs: 1,
            test_support_per_step: 1,
            test_query: 3,
            gamma: 0.99,
            eval_every: 0,
            eval_episodes: 0,
        }
    }

    #[test]
    fn zero_weights_give_uniform_distribution() {
        let matrix = sample_matrix(1);
        let net = Mlp::zeros(&[FEATURE_DIM, 8, ACTION_HEADS]);
        let dist = policy_distribution(&net, &matrix).unwrap();
        let n = matrix.len() as f64;
        for &p in &dist.probs {
            assert!((p - 1.0 / n).abs() < 1e-12);
        }
        assert!((dist.log_prob(0) + n.ln()).abs() < 1e-9);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let matrix = sample_matrix(2);
        let mut rng = Rng::new(3);
        let net = Mlp::new(&[FEATURE_DIM, 16, ACTION_HEADS], &mut rng);
        let dist = policy_distribution(&net, &matrix).unwrap();
        let sum: f64 = dist.probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let scores = [0.3, -1.2, 2.0, 0.0];
        let shifted: Vec<f64> = scores.iter().map(|s| s + 123.456).collect();
        let a = softmax(&scores);
        let b = softmax(&shifted);
        for (x, y) in a.probs.iter().zip(&b.probs) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let matrix = sample_matrix(4);
        let mut rng = Rng::new(7);
        let mut net = Mlp::new(&[FEATURE_DIM, 10, ACTION_HEADS], &mut rng);
        let chosen = 3usize;
        let rows: Vec<[f64; FEATURE_DIM]> = matrix.rows.iter().map(|r| r.features.vector).collect();
        let heads: Vec<usize> = matrix.rows.iter().map(|r| r.action.kind.index()).collect();

        // loss = -log pi(chosen)
        let loss_fn = |net: &Mlp| -> f64 {
            let scores: Vec<f64> = rows
                .iter()
                .zip(&heads)
                .map(|(row, &head)| net.forward(row)[head])
                .collect();
            -softmax(&scores).log_prob(chosen)
        };

        let mut analytic = Gradients::zeros(&net);
        let scores: Vec<f64> = rows
            .iter()
            .zip(&heads)
            .map(|(row, &head)| net.forward(row)[head])
            .collect();
        let dist = softmax(&scores);
        for (i, (row, &head)) in rows.iter().zip(&heads).enumerate() {
            let indicator = if i == chosen { 1.0 } else { 0.0 };
            let dscore = -(indicator - dist.probs[i]);
            if dscore == 0.0 {
                continue;
            }
            let acts = net.forward_cached(row);
            let mut out_grad = [0.0; ACTION_HEADS];
            out_grad[head] = dscore;
            net.backward(row, &acts, &out_grad, &mut analytic);
        }
        let numeric = numeric_gradient(&mut net, loss_fn, 1e-6);
        let err = max_relative_error(&analytic, &numeric);
        assert!(err <= 1e-5, "rel err {err}");
    }

    #[test]
    fn zero_inner_lr_leaves_network_unchanged() {
        let (config, task) = task(5);
        let mut rng = Rng::new(1);
        let net = Mlp::new(&[FEATURE_DIM, 8, ACTION_HEADS], &mut rng);
        let adapted = inner_adapt(&net, &config, &task, 2, 2, 0.0, 0.99, 0);
        for i in 0..net.param_len() {
            assert_eq!(net.get_param(i), adapted.get_param(i));
        }
    }

    #[test]
    fn inner_adapt_is_deterministic_and_pure() {
        let (config, task) = task(6);
        let mut rng = Rng::new(2);
        let net = Mlp::new(&[FEATURE_DIM, 8, ACTION_HEADS], &mut rng);
        let before: Vec<f64> = (0..net.param_len()).map(|i| net.get_param(i)).collect();
        let a = inner_adapt(&net, &config, &task, 2, 2, 0.01, 0.99, 7);
        let b = inner_adapt(&net, &config, &task, 2, 2, 0.01, 0.99, 7);
        for i in 0..net.param_len() {
            assert_eq!(a.get_param(i), b.get_param(i), "bitwise reproducible");
            assert_eq!(net.get_param(i), before[i], "input untouched");
        }
    }

    #[test]
    fn maml_zero_outer_lr_is_identity_and_averaging_is_linear() {
        let (config, t) = task(7);
        let mut rng = Rng::new(3);
        let base = Mlp::new(&[FEATURE_DIM, 8, ACTION_HEADS], &mut rng);
        let mut cfg = small_cfg();

        cfg.outer_lr = 0.0;
        let mut net = base.clone();
        maml_outer_step(&mut net, &config, std::slice::from_ref(&t), &cfg, 1).unwrap();
        for i in 0..net.param_len() {
            assert_eq!(net.get_param(i), base.get_param(i));
        }

        // two identical tasks average to the single-task update
        cfg.outer_lr = 0.1;
        let mut single = base.clone();
        maml_outer_step(&mut single, &config, std::slice::from_ref(&t), &cfg, 2).unwrap();
        let mut double = base.clone();
        maml_outer_step(&mut double, &config, &[t.clone(), t.clone()], &cfg, 2).unwrap();
        for i in 0..double.param_len() {
            assert!((double.get_param(i) - single.get_param(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn reptile_outer_step_limits() {
        let (config, t) = task(8);
        let mut rng = Rng::new(4);
        let base = Mlp::new(&[FEATURE_DIM, 8, ACTION_HEADS], &mut rng);
        let mut cfg = small_cfg();

        // eps = 1, one task: lands exactly on the adapted parameters
        cfg.outer_lr = 1.0;
        let mut net = base.clone();
        reptile_outer_step(&mut net, &config, std::slice::from_ref(&t), &cfg, 3).unwrap();
        let per_step = (cfg.support_episodes / cfg.inner_steps).max(1);
        let adapted = inner_adapt(
            &base, &config, &t, per_step, cfg.inner_steps, cfg.inner_lr, cfg.gamma, 3,
        );
        for i in 0..net.param_len() {
            assert!((net.get_param(i) - adapted.get_param(i)).abs() < 1e-12);
        }

        // eps = 0: unchanged
        cfg.outer_lr = 0.0;
        let mut net = base.clone();
        reptile_outer_step(&mut net, &config, std::slice::from_ref(&t), &cfg, 3).unwrap();
        for i in 0..net.param_len() {
            assert_eq!(net.get_param(i), base.get_param(i));
        }

        // no adaptation movement: fixed point for any eps
        cfg.outer_lr = 0.7;
        cfg.inner_lr = 0.0;
        let mut net = base.clone();
        reptile_outer_step(&mut net, &config, std::slice::from_ref(&t), &cfg, 3).unwrap();
        for i in 0..net.param_len() {
            assert_eq!(net.get_param(i), base.get_param(i));
        }
    }

    #[test]
    fn adaptation_disabled_equals_frozen_evaluation() {
        let (config, t) = task(9);
        let mut rng = Rng::new(5);
        let net = Mlp::new(&[FEATURE_DIM, 8, ACTION_HEADS], &mut rng);
        let cfg = small_cfg();
        let (frozen, traces_off) = test_time_adapt_and_eval(&net, &config, &t, &cfg, false, 11);
        for i in 0..net.param_len() {
            assert_eq!(frozen.get_param(i), net.get_param(i));
        }
        assert_eq!(traces_off.len(), cfg.test_query);
        // repeatable
        let (_, traces_again) = test_time_adapt_and_eval(&net, &config, &t, &cfg, false, 11);
        assert_eq!(traces_off, traces_again);
    }
}
