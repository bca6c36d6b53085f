//! Value-based attackers: single- and dual-replay-buffer DQN over the
//! 12-dimensional candidate features, and an embedding-based DDQN baseline
//! that scores the full action catalogue from a deterministic token-hash
//! state embedding.
//!
//! DQN action selection works on an `N x 5` table: the network maps each
//! candidate row to five per-type values and the greedy choice maximizes the
//! value at the cell matching the candidate's own type (the executed action
//! always inherits the candidate's parameters). TD targets bootstrap from
//! the stored next-step candidate matrix with a periodically synced target
//! network.

use std::cell::Cell;
use std::collections::{BTreeMap, VecDeque};
use std::rc::Rc;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::agents::{Agent, AgentError};
use crate::engine::{enumerate_catalogue, Action, EndReason, GameHandle, Observation};
use crate::features::{CandidateMatrix, MatrixBuilder, FEATURE_DIM};
use crate::nn::{Gradients, Mlp, Scratch};
use crate::rng::{fnv1a64, Rng};
use crate::scenario::{IpAssignment, ScenarioConfig};

pub const ACTION_HEADS: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum ValueError {
    #[error("candidate matrix is empty")]
    EmptyMatrix,
    #[error("empty transition batch")]
    EmptyBatch,
    #[error("checkpoint does not match this scenario: {0}")]
    CheckpointMismatch(String),
}

/// One stored experience: candidate vector, executed head, reward, the next
/// step's full candidate matrix (empty if terminal), and the terminal flag.
#[derive(Clone, Debug)]
pub struct Transition {
    pub state: [f64; FEATURE_DIM],
    pub head: usize,
    pub reward: f64,
    pub next: Vec<[f64; FEATURE_DIM]>,
    /// Own action-type head of each next-matrix row; the bootstrap max is
    /// restricted to these cells, mirroring the selection rule.
    pub next_heads: Vec<u8>,
    pub done: bool,
    /// Bootstrapped max over the next matrix, cached per target-net version.
    cached_max: Cell<(u64, f64)>,
}

impl Transition {
    pub fn new(
        state: [f64; FEATURE_DIM],
        head: usize,
        reward: f64,
        next: Vec<[f64; FEATURE_DIM]>,
        next_heads: Vec<u8>,
        done: bool,
    ) -> Self {
        debug_assert_eq!(next.len(), next_heads.len());
        Transition {
            state,
            head,
            reward,
            next,
            next_heads,
            done,
            cached_max: Cell::new((u64::MAX, 0.0)),
        }
    }

    fn max_next(&self, target: &Mlp, version: u64, scratch: &mut Scratch) -> f64 {
        if self.done || self.next.is_empty() {
            return 0.0;
        }
        let (cached_version, value) = self.cached_max.get();
        if cached_version == version {
            return value;
        }
        let best = target.batch_max_heads(&self.next, &self.next_heads, scratch);
        self.cached_max.set((version, best));
        best
    }
}

/// Uniform replay plus an optional compact success buffer that duplicates
/// progress and terminal-success transitions.
pub struct ReplayBuffers {
    pub all: VecDeque<Rc<Transition>>,
    pub succ: VecDeque<Rc<Transition>>,
    all_capacity: usize,
    succ_capacity: usize,
}

impl ReplayBuffers {
    pub fn new(all_capacity: usize, succ_capacity: usize) -> Self {
        ReplayBuffers {
            all: VecDeque::with_capacity(all_capacity.min(4096)),
            succ: VecDeque::with_capacity(succ_capacity.min(4096)),
            all_capacity,
            succ_capacity,
        }
    }

    pub fn push(&mut self, transition: Transition, mirror_to_success: bool) {
        let transition = Rc::new(transition);
        if self.all.len() == self.all_capacity {
            self.all.pop_front();
        }
        self.all.push_back(transition.clone());
        if mirror_to_success {
            if self.succ.len() == self.succ_capacity {
                self.succ.pop_front();
            }
            self.succ.push_back(transition);
        }
    }

    /// Sample a minibatch. With a non-empty success buffer, `success_mix` of
    /// the batch is drawn from it and the remainder from the uniform buffer;
    /// with an empty success buffer the draw is identical to single-buffer
    /// sampling.
    pub fn sample(&self, batch: usize, success_mix: f64, rng: &mut Rng) -> Vec<Rc<Transition>> {
        let mut out = Vec::with_capacity(batch);
        let n_succ = if self.succ.is_empty() {
            0
        } else {
            ((batch as f64 * success_mix).round() as usize).min(batch)
        };
        for _ in 0..n_succ {
            out.push(self.succ[rng.gen_range(self.succ.len())].clone());
        }
        for _ in n_succ..batch {
            out.push(self.all[rng.gen_range(self.all.len())].clone());
        }
        out
    }

    pub fn len(&self) -> usize {
        self.all.len()
    }

    pub fn is_empty(&self) -> bool {
        self.all.is_empty()
    }
}

/// Epsilon-greedy selection over the `N x 5` Q-table: with probability
/// `eps` a uniform candidate, otherwise the candidate whose own-type Q-value
/// is maximal (first row wins ties).
pub fn dqn_select(
    matrix: &CandidateMatrix,
    qnet: &Mlp,
    eps: f64,
    rng: &mut Rng,
) -> Result<usize, ValueError> {
    if matrix.is_empty() {
        return Err(ValueError::EmptyMatrix);
    }
    if eps > 0.0 && rng.gen_bool(eps) {
        return Ok(rng.gen_range(matrix.len()));
    }
    let mut scratch = Scratch::default();
    let mut best = 0;
    let mut best_q = f64::NEG_INFINITY;
    for (i, row) in matrix.rows.iter().enumerate() {
        let q = qnet.forward_scratch(&row.features.vector, &mut scratch)[row.action.kind.index()];
        if q > best_q {
            best_q = q;
            best = i;
        }
    }
    Ok(best)
}

/// One-step TD update on a minibatch with a bootstrapped target from the
/// target network; returns the mean squared error. `target_version` keys the
/// per-transition bootstrap cache and must change whenever `target` does.
pub fn td_update(
    batch: &[Rc<Transition>],
    qnet: &mut Mlp,
    target: &Mlp,
    target_version: u64,
    gamma: f64,
    lr: f64,
) -> Result<f64, ValueError> {
    if batch.is_empty() {
        return Err(ValueError::EmptyBatch);
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = Gradients::zeros(qnet);
    let mut scratch = Scratch::default();
    let mut target_scratch = Scratch::default();
    let mut out_grad = [0.0; ACTION_HEADS];
    let mut loss = 0.0;
    for transition in batch {
        let bootstrap = transition.max_next(target, target_version, &mut target_scratch);
        let pred = qnet.forward_scratch(&transition.state, &mut scratch)[transition.head];
        let tgt = transition.reward + gamma * bootstrap;
        let err = pred - tgt;
        loss += err * err;
        out_grad.fill(0.0);
        out_grad[transition.head] = 2.0 * err * scale;
        qnet.backward_scratch(&transition.state, &out_grad, &mut scratch, &mut grads);
    }
    qnet.apply_gradients(&grads, lr);
    Ok(loss * scale)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DqnConfig {
    pub hidden: usize,
    pub replay_capacity: usize,
    pub success_capacity: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub lr: f64,
    pub target_sync_steps: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of total training episodes over which epsilon decays.
    pub eps_decay_fraction: f64,
    pub min_buffer: usize,
    pub success_mix: f64,
    pub dual_buffer: bool,
    pub update_every: usize,
}

impl Default for DqnConfig {
    fn default() -> Self {
        DqnConfig {
            hidden: 64,
            replay_capacity: 50_000,
            success_capacity: 5_000,
            batch_size: 64,
            gamma: 0.99,
            lr: 1e-3,
            target_sync_steps: 500,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay_fraction: 0.5,
            min_buffer: 500,
            success_mix: 0.5,
            dual_buffer: true,
            update_every: 4,
        }
    }
}

/// Per-episode training curve row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurveRow {
    pub episode: usize,
    pub variant: usize,
    pub win: bool,
    pub ret: f64,
    pub steps: usize,
    pub loss: f64,
}

#[derive(Serialize, Deserialize)]
pub struct DqnCheckpoint {
    pub dual_buffer: bool,
    pub net: Mlp,
}

/// Train a DQN sequentially across the given variants.
pub fn train_dqn(
    scenario: &Arc<ScenarioConfig>,
    assignments: &[Arc<IpAssignment>],
    episodes_per_variant: usize,
    cfg: &DqnConfig,
    master_seed: u64,
) -> (Mlp, Vec<CurveRow>) {
    let hosts = scenario.game_hosts().count();
    let mut init_rng = Rng::from_stream(master_seed, "dqn-init", &[]);
    let mut qnet = Mlp::new(
        &[FEATURE_DIM, cfg.hidden, cfg.hidden, ACTION_HEADS],
        &mut init_rng,
    );
    let mut target = qnet.clone();
    let mut target_version = 0u64;
    let mut buffers = ReplayBuffers::new(cfg.replay_capacity, cfg.success_capacity);
    let mut curve = Vec::new();

    let total_episodes = episodes_per_variant * assignments.len();
    let decay_span = (total_episodes as f64 * cfg.eps_decay_fraction).max(1.0);
    let mut global_step = 0usize;
    let mut episode_index = 0usize;

    for (variant_index, assignment) in assignments.iter().enumerate() {
        for episode in 0..episodes_per_variant {
            let eps = {
                let t = (episode_index as f64 / decay_span).min(1.0);
                cfg.eps_start + (cfg.eps_end - cfg.eps_start) * t
            };
            let episode_seed = crate::rng::derive_seed(
                master_seed,
                "dqn-train-episode",
                &[variant_index as u64, episode as u64],
            );
            let mut rng = Rng::from_stream(episode_seed, "dqn-policy", &[]);
            let (mut game, _) =
                GameHandle::reset(scenario.clone(), assignment.clone(), episode_seed);
            let mut builder = MatrixBuilder::new();
            let mut matrix = builder.build(game.observation(), hosts);
            let mut loss_sum = 0.0;
            let mut loss_count = 0usize;

            while game.ended().is_none() {
                let row = dqn_select(&matrix, &qnet, eps, &mut rng).expect("non-empty matrix");
                let action = matrix.rows[row].action.clone();
                let state = matrix.rows[row].features.vector;
                let pre_obs = game.observation().clone();
                let result = game.step(&action).expect("episode still running");
                builder.record_executed(&action, &pre_obs);
                let next_matrix = if result.ended {
                    CandidateMatrix::default()
                } else {
                    builder.build(game.observation(), hosts)
                };
                let next_features: Vec<[f64; FEATURE_DIM]> = next_matrix
                    .rows
                    .iter()
                    .map(|r| r.features.vector)
                    .collect();
                let next_heads: Vec<u8> = next_matrix
                    .rows
                    .iter()
                    .map(|r| r.action.kind.index() as u8)
                    .collect();
                let mirror = cfg.dual_buffer
                    && (result.progressed || result.end_reason == Some(EndReason::Success));
                buffers.push(
                    Transition::new(
                        state,
                        action.kind.index(),
                        result.reward,
                        next_features,
                        next_heads,
                        result.ended,
                    ),
                    mirror,
                );

                global_step += 1;
                if buffers.len() >= cfg.min_buffer && global_step.is_multiple_of(cfg.update_every) {
                    let batch = buffers.sample(cfg.batch_size, cfg.success_mix, &mut rng);
                    let loss =
                        td_update(&batch, &mut qnet, &target, target_version, cfg.gamma, cfg.lr)
                            .expect("non-empty batch");
                    loss_sum += loss;
                    loss_count += 1;
                    if global_step.is_multiple_of(cfg.target_sync_steps) {
                        target = qnet.clone();
                        target_version += 1;
                    }
                }
                matrix = next_matrix;
            }

            curve.push(CurveRow {
                episode: episode_index,
                variant: variant_index,
                win: game.trace().won(),
                ret: game.trace().total_return(),
                steps: game.trace().steps(),
                loss: if loss_count == 0 {
                    0.0
                } else {
                    loss_sum / loss_count as f64
                },
            });
            episode_index += 1;
        }
    }

    (qnet, curve)
}

/// Frozen greedy DQN policy for evaluation.
pub struct DqnAgent {
    net: Mlp,
    builder: MatrixBuilder,
    scenario_hosts: usize,
}

impl DqnAgent {
    pub fn new(net: Mlp, scenario_hosts: usize) -> Self {
        DqnAgent {
            net,
            builder: MatrixBuilder::new(),
            scenario_hosts,
        }
    }
}

impl Agent for DqnAgent {
    fn select(
        &mut self,
        obs: &Observation,
        _valid: &[Action],
        rng: &mut Rng,
    ) -> Result<Action, AgentError> {
        let matrix = self.builder.build(obs, self.scenario_hosts);
        let row = dqn_select(&matrix, &self.net, 0.0, rng).map_err(|_| AgentError::EmptyValidSet)?;
        let action = matrix.rows[row].action.clone();
        self.builder.record_executed(&action, obs);
        Ok(action)
    }

    fn episode_start(&mut self, _obs: &Observation) {
        self.builder.reset();
    }
}

/// Intrinsic reward shaping for the DDQN: boosted when the state changed,
/// penalized when it did not, in units of one tenth.
pub fn shaped_reward(env_reward: f64, state_changed: bool) -> f64 {
    let bonus = if state_changed { 50.0 } else { -50.0 };
    (env_reward + bonus) / 10.0
}

/// Deterministic bag-of-tokens hash embedding of the serialized observation.
///
/// Tokens are alphanumeric runs of the canonical JSON (IP octets included),
/// folded into `dim` buckets via FNV-1a and L2-normalized. Observations that
/// differ only in address tokens hash to different vectors, reproducing the
/// identifier sensitivity of pretrained text encoders.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HashEmbedding {
    pub dim: usize,
}

impl HashEmbedding {
    pub fn new(dim: usize) -> Self {
        HashEmbedding { dim }
    }

    pub fn embed(&self, obs: &Observation) -> Vec<f64> {
        let json = serde_json::to_string(obs).expect("observation serializes");
        let mut v = vec![0.0f64; self.dim];
        let bytes = json.as_bytes();
        let mut start = None;
        for (i, &b) in bytes
            .iter()
            .enumerate()
            .chain(std::iter::once((bytes.len(), &b' ')))
        {
            let is_token = b.is_ascii_alphanumeric() || b == b'_';
            match (start, is_token) {
                (None, true) => start = Some(i),
                (Some(s), false) => {
                    let token = &bytes[s..i];
                    let mut lower = [0u8; 64];
                    let n = token.len().min(64);
                    for (dst, src) in lower[..n].iter_mut().zip(token) {
                        *dst = src.to_ascii_lowercase();
                    }
                    let bucket = (fnv1a64(&lower[..n]) % self.dim as u64) as usize;
                    v[bucket] += 1.0;
                    start = None;
                }
                _ => {}
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        }
        v
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DdqnConfig {
    pub embedding_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub lr: f64,
    pub target_sync_steps: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay_fraction: f64,
    pub min_buffer: usize,
    pub update_every: usize,
}

impl Default for DdqnConfig {
    fn default() -> Self {
        DdqnConfig {
            embedding_dim: 256,
            hidden1: 1024,
            hidden2: 512,
            replay_capacity: 10_000,
            batch_size: 64,
            gamma: 0.99,
            lr: 1e-3,
            target_sync_steps: 500,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay_fraction: 0.5,
            min_buffer: 500,
            update_every: 4,
        }
    }
}

struct DdqnTransition {
    state: Vec<f64>,
    action_index: usize,
    reward: f64,
    next_state: Vec<f64>,
    next_valid: Vec<u32>,
    done: bool,
}

#[derive(Serialize, Deserialize)]
pub struct DdqnCheckpoint {
    pub embedding_dim: usize,
    pub catalogue_len: usize,
    pub net: Mlp,
}

/// The white-box action interface of the DDQN: the full catalogue for one
/// assignment plus an index for valid-action masking.
pub struct ActionCatalogue {
    pub actions: Vec<Action>,
    index: BTreeMap<Action, usize>,
}

impl ActionCatalogue {
    pub fn new(scenario: &ScenarioConfig, assignment: &IpAssignment) -> Self {
        let actions = enumerate_catalogue(scenario, assignment);
        let index = actions
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, a)| (a, i))
            .collect();
        ActionCatalogue { actions, index }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn index_of(&self, action: &Action) -> Option<usize> {
        self.index.get(action).copied()
    }

    pub fn valid_indices(&self, obs: &Observation) -> Vec<u32> {
        crate::engine::valid_actions(obs)
            .iter()
            .filter_map(|a| self.index_of(a).map(|i| i as u32))
            .collect()
    }
}

fn masked_argmax(q: &[f64], valid: &[u32]) -> usize {
    let mut best = valid[0] as usize;
    let mut best_q = f64::NEG_INFINITY;
    for &i in valid {
        let i = i as usize;
        if q[i] > best_q {
            best_q = q[i];
            best = i;
        }
    }
    best
}

/// Train the DDQN sequentially across variants. Returns the online network
/// and the per-episode curve.
pub fn train_ddqn(
    scenario: &Arc<ScenarioConfig>,
    assignments: &[Arc<IpAssignment>],
    episodes_per_variant: usize,
    cfg: &DdqnConfig,
    master_seed: u64,
) -> (Mlp, Vec<CurveRow>) {
    let embedding = HashEmbedding::new(cfg.embedding_dim);
    let catalogue_len = ActionCatalogue::new(scenario, &assignments[0]).len();
    let mut init_rng = Rng::from_stream(master_seed, "ddqn-init", &[]);
    let mut qnet = Mlp::new(
        &[cfg.embedding_dim, cfg.hidden1, cfg.hidden2, catalogue_len],
        &mut init_rng,
    );
    let mut target = qnet.clone();
    let mut replay: VecDeque<DdqnTransition> = VecDeque::new();
    let mut curve = Vec::new();

    let total_episodes = episodes_per_variant * assignments.len();
    let decay_span = (total_episodes as f64 * cfg.eps_decay_fraction).max(1.0);
    let mut global_step = 0usize;
    let mut episode_index = 0usize;

    for (variant_index, assignment) in assignments.iter().enumerate() {
        let catalogue = ActionCatalogue::new(scenario, assignment);
        assert_eq!(
            catalogue.len(),
            catalogue_len,
            "catalogue size is scenario-determined"
        );
        for episode in 0..episodes_per_variant {
            let eps = {
                let t = (episode_index as f64 / decay_span).min(1.0);
                cfg.eps_start + (cfg.eps_end - cfg.eps_start) * t
            };
            let episode_seed = crate::rng::derive_seed(
                master_seed,
                "ddqn-train-episode",
                &[variant_index as u64, episode as u64],
            );
            let mut rng = Rng::from_stream(episode_seed, "ddqn-policy", &[]);
            let (mut game, obs) =
                GameHandle::reset(scenario.clone(), assignment.clone(), episode_seed);
            let mut state = embedding.embed(&obs);
            let mut valid = catalogue.valid_indices(&obs);
            let mut loss_sum = 0.0;
            let mut loss_count = 0usize;

            while game.ended().is_none() {
                let action_index = if rng.gen_bool(eps) {
                    valid[rng.gen_range(valid.len())] as usize
                } else {
                    masked_argmax(&qnet.forward(&state), &valid)
                };
                let action = catalogue.actions[action_index].clone();
                let result = game.step(&action).expect("episode still running");
                let next_state = if result.ended {
                    Vec::new()
                } else {
                    embedding.embed(&result.observation)
                };
                let next_valid = if result.ended {
                    Vec::new()
                } else {
                    catalogue.valid_indices(&result.observation)
                };
                let transition = DdqnTransition {
                    state: std::mem::take(&mut state),
                    action_index,
                    reward: shaped_reward(result.reward, result.progressed),
                    next_state: next_state.clone(),
                    next_valid: next_valid.clone(),
                    done: result.ended,
                };
                if replay.len() == cfg.replay_capacity {
                    replay.pop_front();
                }
                replay.push_back(transition);

                global_step += 1;
                if replay.len() >= cfg.min_buffer && global_step.is_multiple_of(cfg.update_every) {
                    let mut grads = Gradients::zeros(&qnet);
                    let mut scratch = Scratch::default();
                    let mut aux_scratch = Scratch::default();
                    let mut out_grad = vec![0.0; catalogue_len];
                    let mut loss = 0.0;
                    let scale = 1.0 / cfg.batch_size as f64;
                    for _ in 0..cfg.batch_size {
                        let t = &replay[rng.gen_range(replay.len())];
                        let bootstrap = if t.done || t.next_valid.is_empty() {
                            0.0
                        } else {
                            // double-DQN: online argmax, target evaluation
                            let online_q = qnet.forward_scratch(&t.next_state, &mut aux_scratch);
                            let best = masked_argmax(online_q, &t.next_valid);
                            target.forward_scratch(&t.next_state, &mut aux_scratch)[best]
                        };
                        let pred = qnet.forward_scratch(&t.state, &mut scratch)[t.action_index];
                        let tgt = t.reward + cfg.gamma * bootstrap;
                        let err = pred - tgt;
                        loss += err * err * scale;
                        out_grad.fill(0.0);
                        out_grad[t.action_index] = 2.0 * err * scale;
                        qnet.backward_scratch(&t.state, &out_grad, &mut scratch, &mut grads);
                    }
                    qnet.apply_gradients(&grads, cfg.lr);
                    loss_sum += loss;
                    loss_count += 1;
                    if global_step.is_multiple_of(cfg.target_sync_steps) {
                        target = qnet.clone();
                    }
                }

                state = next_state;
                valid = next_valid;
            }

            curve.push(CurveRow {
                episode: episode_index,
                variant: variant_index,
                win: game.trace().won(),
                ret: game.trace().total_return(),
                steps: game.trace().steps(),
                loss: if loss_count == 0 {
                    0.0
                } else {
                    loss_sum / loss_count as f64
                },
            });
            episode_index += 1;
        }
    }

    (qnet, curve)
}

/// Frozen greedy DDQN policy bound to one assignment's catalogue.
pub struct DdqnAgent {
    net: Mlp,
    embedding: HashEmbedding,
    catalogue: ActionCatalogue,
}

impl DdqnAgent {
    pub fn new(
        checkpoint: DdqnCheckpoint,
        scenario: &ScenarioConfig,
        assignment: &IpAssignment,
    ) -> Result<Self, ValueError> {
        let catalogue = ActionCatalogue::new(scenario, assignment);
        if catalogue.len() != checkpoint.catalogue_len {
            return Err(ValueError::CheckpointMismatch(format!(
                "catalogue length {} vs checkpoint {}",
                catalogue.len(),
                checkpoint.catalogue_len
            )));
        }
        Ok(DdqnAgent {
            net: checkpoint.net,
            embedding: HashEmbedding::new(checkpoint.embedding_dim),
            catalogue,
        })
    }
}

impl Agent for DdqnAgent {
    fn select(
        &mut self,
        obs: &Observation,
        _valid: &[Action],
        _rng: &mut Rng,
    ) -> Result<Action, AgentError> {
        let valid = self.catalogue.valid_indices(obs);
        if valid.is_empty() {
            return Err(AgentError::EmptyValidSet);
        }
        let q = self.net.forward(&self.embedding.embed(obs));
        Ok(self.catalogue.actions[masked_argmax(&q, &valid)].clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::IpPermutation;
    use crate::nn::{max_relative_error, numeric_gradient};
    use crate::scenario::{canonical_scenario, generate_variant, HOST_COUNT};

    fn sample_matrix(seed: u64) -> CandidateMatrix {
        let config = Arc::new(canonical_scenario());
        let assignment = Arc::new(generate_variant(&config, seed));
        let (game, _) = GameHandle::reset(config, assignment, seed);
        MatrixBuilder::new().build(game.observation(), HOST_COUNT)
    }

    #[test]
    fn eps_one_is_uniform_over_candidates() {
        let matrix = sample_matrix(1);
        let qnet = Mlp::zeros(&[FEATURE_DIM, 8, ACTION_HEADS]);
        let mut rng = Rng::new(5);
        let mut counts = vec![0u32; matrix.len()];
        let draws = 20_000;
        for _ in 0..draws {
            counts[dqn_select(&matrix, &qnet, 1.0, &mut rng).unwrap()] += 1;
        }
        let expected = draws as f64 / matrix.len() as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // chi-square critical value, df = 13, alpha = 0.01
        assert!(chi2 < 27.688, "chi2 = {chi2}");
    }

    #[test]
    fn greedy_picks_hand_set_maximum() {
        let matrix = sample_matrix(2);
        let mut qnet = Mlp::zeros(&[FEATURE_DIM, 4, ACTION_HEADS]);
        // zero weights: outputs equal the final-layer bias; crank one head
        let last_row_head = matrix.rows[matrix.len() - 1].action.kind.index();
        let final_bias_start = qnet.param_len() - ACTION_HEADS;
        qnet.set_param(final_bias_start + last_row_head, 10.0);
        let mut rng = Rng::new(1);
        let row = dqn_select(&matrix, &qnet, 0.0, &mut rng).unwrap();
        // all candidates of that type tie at 10.0; the first of them wins
        let first_of_type = matrix
            .rows
            .iter()
            .position(|r| r.action.kind.index() == last_row_head)
            .unwrap();
        assert_eq!(row, first_of_type);
    }

    #[test]
    fn zero_net_ties_break_to_first_candidate() {
        let matrix = sample_matrix(3);
        let qnet = Mlp::zeros(&[FEATURE_DIM, 8, ACTION_HEADS]);
        let values: Vec<f64> = matrix
            .rows
            .iter()
            .map(|r| qnet.forward(&r.features.vector)[r.action.kind.index()])
            .collect();
        assert!(values.iter().all(|&v| v == 0.0));
        let mut rng = Rng::new(9);
        assert_eq!(dqn_select(&matrix, &qnet, 0.0, &mut rng).unwrap(), 0);
    }

    #[test]
    fn terminal_transition_target_is_reward() {
        let mut rng = Rng::new(4);
        let mut qnet = Mlp::new(&[FEATURE_DIM, 8, ACTION_HEADS], &mut rng);
        let target = qnet.clone();
        let t = Rc::new(Transition::new(
            [0.5; FEATURE_DIM],
            2,
            -11.0,
            Vec::new(),
            Vec::new(),
            true,
        ));
        for _ in 0..2000 {
            td_update(std::slice::from_ref(&t), &mut qnet, &target, 0, 0.99, 0.05).unwrap();
        }
        let pred = qnet.forward(&t.state)[2];
        assert!((pred - -11.0).abs() < 1e-3, "pred {pred}");
    }

    #[test]
    fn td_gradient_matches_finite_differences() {
        let mut rng = Rng::new(6);
        let mut qnet = Mlp::new(&[FEATURE_DIM, 10, ACTION_HEADS], &mut rng);
        let target = Mlp::new(&[FEATURE_DIM, 10, ACTION_HEADS], &mut rng);
        let mut batch = Vec::new();
        for k in 0..6 {
            let state = std::array::from_fn(|i| ((i + k) as f64 * 0.371).sin().abs());
            let next: Vec<[f64; FEATURE_DIM]> = (0..4)
                .map(|j| std::array::from_fn(|i| ((i * j + k) as f64 * 0.173).cos().abs()))
                .collect();
            let heads: Vec<u8> = (0..next.len()).map(|j| (j % ACTION_HEADS) as u8).collect();
            batch.push(Rc::new(Transition::new(
                state,
                k % ACTION_HEADS,
                -1.0 + k as f64,
                next,
                heads,
                k == 5,
            )));
        }
        let gamma = 0.97;
        let loss_fn = |net: &Mlp| -> f64 {
            batch
                .iter()
                .map(|t| {
                    let pred = net.forward(&t.state)[t.head];
                    let bootstrap = if t.done || t.next.is_empty() {
                        0.0
                    } else {
                        t.next
                            .iter()
                            .zip(&t.next_heads)
                            .map(|(row, &head)| target.forward(row)[head as usize])
                            .fold(f64::NEG_INFINITY, f64::max)
                    };
                    let err = pred - (t.reward + gamma * bootstrap);
                    err * err
                })
                .sum::<f64>()
                / batch.len() as f64
        };

        let mut analytic = Gradients::zeros(&qnet);
        let scale = 1.0 / batch.len() as f64;
        for t in &batch {
            let acts = qnet.forward_cached(&t.state);
            let pred = acts.output()[t.head];
            let bootstrap = t.max_next(&target, 0, &mut Scratch::default());
            let err = pred - (t.reward + gamma * bootstrap);
            let mut out_grad = vec![0.0; ACTION_HEADS];
            out_grad[t.head] = 2.0 * err * scale;
            qnet.backward(&t.state, &acts, &out_grad, &mut analytic);
        }
        let numeric = numeric_gradient(&mut qnet, loss_fn, 1e-6);
        let err = max_relative_error(&analytic, &numeric);
        assert!(err <= 1e-5, "rel err {err}");
    }

    #[test]
    fn repeated_updates_converge_on_fixed_transition() {
        let mut rng = Rng::new(8);
        let mut qnet = Mlp::new(&[FEATURE_DIM, 16, ACTION_HEADS], &mut rng);
        let target = qnet.clone();
        let next: Vec<[f64; FEATURE_DIM]> = vec![[0.25; FEATURE_DIM]];
        let heads = vec![1u8; next.len()];
        let t = Rc::new(Transition::new([0.7; FEATURE_DIM], 1, -1.0, next, heads, false));
        let mut losses = Vec::new();
        for _ in 0..500 {
            losses.push(td_update(std::slice::from_ref(&t), &mut qnet, &target, 0, 0.99, 0.02).unwrap());
        }
        let early: f64 = losses[5..15].iter().sum();
        let late: f64 = losses[490..].iter().sum();
        assert!(late < early.max(1e-12), "early {early} late {late}");
        assert!(losses.last().unwrap() < &1e-6);
    }

    #[test]
    fn dual_and_single_sampling_agree_when_success_empty() {
        let mut single = ReplayBuffers::new(100, 10);
        let mut dual = ReplayBuffers::new(100, 10);
        for k in 0..50 {
            let t = Transition::new([k as f64 / 50.0; FEATURE_DIM], 0, -1.0, Vec::new(), Vec::new(), false);
            single.push(t.clone(), false);
            dual.push(t, false); // no progress: success buffer stays empty
        }
        let mut rng_a = Rng::new(42);
        let mut rng_b = Rng::new(42);
        let a = single.sample(16, 0.5, &mut rng_a);
        let b = dual.sample(16, 0.5, &mut rng_b);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.state, y.state);
        }
        assert_eq!(rng_a, rng_b, "identical draw streams");
    }

    #[test]
    fn shaped_reward_arithmetic() {
        assert_eq!(shaped_reward(-1.0, true), 4.9);
        assert_eq!(shaped_reward(-1.0, false), -5.1);
        assert_eq!(shaped_reward(99.0, true), 14.9);
        assert_eq!(shaped_reward(-11.0, false), -6.1);
    }

    #[test]
    fn hash_embedding_is_deterministic_and_ip_sensitive() {
        let config = Arc::new(canonical_scenario());
        let a = Arc::new(generate_variant(&config, 51));
        let b = Arc::new(generate_variant(&config, 52));
        let (_game, obs_a) = GameHandle::reset_with_start(config.clone(), a.clone(), "client_1");
        let perm = IpPermutation::between(&a, &b);
        let obs_b = perm.map_observation(&obs_a);
        let embedding = HashEmbedding::new(256);
        let va = embedding.embed(&obs_a);
        let vb = embedding.embed(&obs_b);
        assert_eq!(va, embedding.embed(&obs_a));
        let cos = cosine_similarity(&va, &vb);
        assert!(cos < 1.0 - 1e-6, "cosine {cos}");
        assert!((cosine_similarity(&va, &va) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn catalogue_masking_never_emits_invalid_actions() {
        let config = Arc::new(canonical_scenario());
        let assignment = Arc::new(generate_variant(&config, 61));
        let catalogue = ActionCatalogue::new(&config, &assignment);
        assert_eq!(catalogue.len(), 1034);
        let (mut game, obs) = GameHandle::reset(config.clone(), assignment.clone(), 3);
        let valid = catalogue.valid_indices(&obs);
        assert_eq!(valid.len(), game.valid_actions().len());
        let mut rng = Rng::new(2);
        for _ in 0..30 {
            if game.ended().is_some() {
                break;
            }
            let valid = catalogue.valid_indices(game.observation());
            let action = catalogue.actions[valid[rng.gen_range(valid.len())] as usize].clone();
            assert!(crate::engine::is_valid_action(game.observation(), &action));
            game.step(&action).unwrap();
        }
    }
}
