//! Experiment orchestration shared by the CLI and the acceptance suite:
//! the episode runner, the agent registry, training/evaluation dispatch,
//! and the experiment configuration file.
//!
//! Every source of randomness is derived from the experiment's master seed
//! with counter-based stream derivation (see [`crate::rng`]), so a given
//! configuration produces byte-identical artifacts on every run, including
//! under multi-threaded evaluation.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agents::{Agent, AgentError, OracleAgent, RandomAgent};
use crate::concepts::{train_conceptual, ConceptualAgent, ConceptualCheckpoint, ConceptualConfig};
use crate::engine::{EngineError, EpisodeTrace, GameHandle};
use crate::meta::{
    meta_train, test_time_adapt_and_eval, MetaCheckpoint, MetaConfig, MetaKind, PolicyAgent,
    TaskSpec,
};
use crate::rng::{derive_seed, Rng};
use crate::scenario::{generate_variant, IpAssignment, ScenarioConfig, ScenarioError};
use crate::value::{
    train_ddqn, train_dqn, CurveRow, DdqnAgent, DdqnCheckpoint, DdqnConfig, DqnAgent,
    DqnCheckpoint, DqnConfig,
};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("agent {0} is not trainable")]
    NotTrainable(AgentKind),
    #[error("checkpoint/agent mismatch: {0}")]
    CheckpointMismatch(String),
}

/// Every registered attacker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Random,
    Oracle,
    DqnSingle,
    DqnDual,
    Ddqn,
    Conceptual,
    Maml,
    Reptile,
}

pub const AGENT_KINDS: [AgentKind; 8] = [
    AgentKind::Random,
    AgentKind::Oracle,
    AgentKind::DqnSingle,
    AgentKind::DqnDual,
    AgentKind::Ddqn,
    AgentKind::Conceptual,
    AgentKind::Maml,
    AgentKind::Reptile,
];

impl AgentKind {
    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Random => "random",
            AgentKind::Oracle => "oracle",
            AgentKind::DqnSingle => "dqn_single",
            AgentKind::DqnDual => "dqn_dual",
            AgentKind::Ddqn => "ddqn",
            AgentKind::Conceptual => "conceptual",
            AgentKind::Maml => "maml",
            AgentKind::Reptile => "reptile",
        }
    }

    pub fn trainable(self) -> bool {
        !matches!(self, AgentKind::Random | AgentKind::Oracle)
    }

    /// Meta agents adapt on the unseen task before frozen evaluation.
    pub fn adapts_at_test_time(self) -> bool {
        matches!(self, AgentKind::Maml | AgentKind::Reptile)
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AgentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AGENT_KINDS
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                format!(
                    "unknown agent {s:?}; expected one of {}",
                    AGENT_KINDS.map(|k| k.name()).join(", ")
                )
            })
    }
}

/// Experiment configuration file: scenario path, the six variant seeds
/// (five training, one held-out test), agent choice with hyperparameters,
/// episode budgets, output directory, and the master seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: PathBuf,
    pub variant_seeds: Vec<u64>,
    pub agent: AgentKind,
    #[serde(default)]
    pub agent_params: Value,
    #[serde(default = "default_train_episodes")]
    pub train_episodes_per_variant: usize,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    pub out_dir: PathBuf,
    pub master_seed: u64,
}

fn default_train_episodes() -> usize {
    1000
}

fn default_eval_episodes() -> usize {
    500
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)?;
        let config: ExperimentConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.variant_seeds.len() != 6 {
            return Err(ExperimentError::Config(format!(
                "exactly 6 variant seeds required (5 train + 1 test), got {}",
                self.variant_seeds.len()
            )));
        }
        let distinct: BTreeSet<u64> = self.variant_seeds.iter().copied().collect();
        if distinct.len() != 6 {
            return Err(ExperimentError::Config("variant seeds must be distinct".into()));
        }
        Ok(())
    }

    pub fn load_scenario(&self) -> Result<Arc<ScenarioConfig>, ExperimentError> {
        Ok(Arc::new(crate::scenario::load_scenario(&self.scenario)?))
    }

    /// All six assignments in seed order; the last one is the held-out test.
    pub fn assignments(&self, scenario: &ScenarioConfig) -> Vec<Arc<IpAssignment>> {
        self.variant_seeds
            .iter()
            .map(|&seed| Arc::new(generate_variant(scenario, seed)))
            .collect()
    }
}

/// Run one full episode with any agent; returns the engine trace.
pub fn run_episode(
    agent: &mut dyn Agent,
    scenario: &Arc<ScenarioConfig>,
    assignment: &Arc<IpAssignment>,
    seed: u64,
) -> Result<EpisodeTrace, ExperimentError> {
    let (mut game, obs) = GameHandle::reset(
        scenario.clone(),
        assignment.clone(),
        derive_seed(seed, "episode", &[]),
    );
    let mut rng = Rng::from_stream(seed, "agent", &[]);
    agent.episode_start(&obs);
    while game.ended().is_none() {
        let valid = game.valid_actions();
        let action = agent.select(game.observation(), &valid, &mut rng)?;
        let result = game.step(&action)?;
        agent.observe(&result);
    }
    agent.episode_end(game.ended());
    Ok(game.into_trace())
}

/// Run `episodes` evaluation episodes, parallelized across threads. Results
/// are indexed by episode, so thread scheduling never changes the output.
/// `factory` must build a fresh (or episode-reset) agent per worker.
pub fn run_episodes<F>(
    factory: F,
    scenario: &Arc<ScenarioConfig>,
    assignment: &Arc<IpAssignment>,
    episodes: usize,
    eval_seed: u64,
    threads: usize,
) -> Result<Vec<EpisodeTrace>, ExperimentError>
where
    F: Fn() -> Box<dyn Agent> + Sync,
{
    let threads = threads.clamp(1, episodes.max(1));
    let mut slots: Vec<Option<EpisodeTrace>> = vec![None; episodes];
    let chunk = episodes.div_ceil(threads);
    let errors = std::sync::Mutex::new(Vec::<ExperimentError>::new());
    std::thread::scope(|scope| {
        for (worker, slot_chunk) in slots.chunks_mut(chunk).enumerate() {
            let factory = &factory;
            let errors = &errors;
            scope.spawn(move || {
                let mut agent = factory();
                for (offset, slot) in slot_chunk.iter_mut().enumerate() {
                    let episode = worker * chunk + offset;
                    let seed = derive_seed(eval_seed, "eval-episode", &[episode as u64]);
                    match run_episode(agent.as_mut(), scenario, assignment, seed) {
                        Ok(trace) => *slot = Some(trace),
                        Err(e) => errors.lock().expect("no poisoned lock").push(e),
                    }
                }
            });
        }
    });
    if let Some(e) = errors.into_inner().expect("no poisoned lock").pop() {
        return Err(e);
    }
    Ok(slots.into_iter().map(|s| s.expect("episode ran")).collect())
}

/// A trained artifact: the serialized checkpoint plus per-episode curves.
#[derive(Debug)]
pub struct TrainOutput {
    pub checkpoint: Value,
    pub curve: Vec<CurveRow>,
}

fn params<T: serde::de::DeserializeOwned + Default>(value: &Value) -> Result<T, ExperimentError> {
    if value.is_null() {
        return Ok(T::default());
    }
    serde_json::from_value(value.clone()).map_err(ExperimentError::Json)
}

fn tasks_from(assignments: &[Arc<IpAssignment>], master_seed: u64) -> Vec<TaskSpec> {
    assignments
        .iter()
        .enumerate()
        .map(|(i, assignment)| TaskSpec {
            assignment: assignment.clone(),
            base_seed: derive_seed(master_seed, "task", &[i as u64]),
            randomize_start: true,
        })
        .collect()
}

/// Train `kind` on the training assignments and return the checkpoint.
pub fn train(
    kind: AgentKind,
    scenario: &Arc<ScenarioConfig>,
    train_assignments: &[Arc<IpAssignment>],
    episodes_per_variant: usize,
    agent_params: &Value,
    master_seed: u64,
) -> Result<TrainOutput, ExperimentError> {
    if !kind.trainable() {
        return Err(ExperimentError::NotTrainable(kind));
    }
    if episodes_per_variant == 0 {
        return Err(ExperimentError::Config("episode budget must be positive".into()));
    }
    let output = match kind {
        AgentKind::DqnSingle | AgentKind::DqnDual => {
            let mut cfg: DqnConfig = params(agent_params)?;
            cfg.dual_buffer = kind == AgentKind::DqnDual;
            let (net, curve) =
                train_dqn(scenario, train_assignments, episodes_per_variant, &cfg, master_seed);
            TrainOutput {
                checkpoint: checkpoint_value(
                    kind,
                    &DqnCheckpoint {
                        dual_buffer: cfg.dual_buffer,
                        net,
                    },
                )?,
                curve,
            }
        }
        AgentKind::Ddqn => {
            let cfg: DdqnConfig = params(agent_params)?;
            let (net, curve) =
                train_ddqn(scenario, train_assignments, episodes_per_variant, &cfg, master_seed);
            TrainOutput {
                checkpoint: checkpoint_value(
                    kind,
                    &DdqnCheckpoint {
                        embedding_dim: cfg.embedding_dim,
                        catalogue_len: net_output_dim_hint(scenario, train_assignments),
                        net,
                    },
                )?,
                curve,
            }
        }
        AgentKind::Conceptual => {
            let mut cfg: ConceptualConfig = params(agent_params)?;
            cfg.episodes_per_variant = episodes_per_variant;
            let (q, curve, _) = train_conceptual(scenario, train_assignments, &cfg, master_seed);
            TrainOutput {
                checkpoint: checkpoint_value(kind, &ConceptualCheckpoint { q })?,
                curve,
            }
        }
        AgentKind::Maml | AgentKind::Reptile => {
            let cfg: MetaConfig = params(agent_params)?;
            let meta_kind = if kind == AgentKind::Maml {
                MetaKind::Maml
            } else {
                MetaKind::Reptile
            };
            let tasks = tasks_from(train_assignments, master_seed);
            let (net, meta_curve) =
                meta_train(meta_kind, scenario, &tasks, None, &cfg, master_seed)
                    .map_err(|e| ExperimentError::Config(e.to_string()))?;
            let curve = meta_curve
                .iter()
                .map(|row| CurveRow {
                    episode: row.epoch,
                    variant: 0,
                    win: false,
                    ret: row.meta_loss,
                    steps: 0,
                    loss: row.meta_loss,
                })
                .collect();
            TrainOutput {
                checkpoint: checkpoint_value(
                    kind,
                    &MetaCheckpoint {
                        kind: meta_kind,
                        net,
                    },
                )?,
                curve,
            }
        }
        AgentKind::Random | AgentKind::Oracle => unreachable!("checked above"),
    };
    Ok(output)
}

fn net_output_dim_hint(scenario: &ScenarioConfig, assignments: &[Arc<IpAssignment>]) -> usize {
    crate::engine::enumerate_catalogue(scenario, &assignments[0]).len()
}

fn checkpoint_value<T: Serialize>(kind: AgentKind, data: &T) -> Result<Value, ExperimentError> {
    Ok(serde_json::json!({
        "agent": kind,
        "data": serde_json::to_value(data)?,
    }))
}

fn checkpoint_data<T: serde::de::DeserializeOwned>(
    kind: AgentKind,
    checkpoint: &Value,
) -> Result<T, ExperimentError> {
    let stored = checkpoint
        .get("agent")
        .and_then(|v| serde_json::from_value::<AgentKind>(v.clone()).ok())
        .ok_or_else(|| ExperimentError::CheckpointMismatch("missing agent tag".into()))?;
    if stored != kind {
        return Err(ExperimentError::CheckpointMismatch(format!(
            "checkpoint is for {stored}, not {kind}"
        )));
    }
    let data = checkpoint
        .get("data")
        .ok_or_else(|| ExperimentError::CheckpointMismatch("missing data field".into()))?;
    serde_json::from_value(data.clone()).map_err(ExperimentError::Json)
}

/// Frozen evaluation of any agent on one assignment. Meta agents run their
/// test-time adaptation phase first unless `adapt` is false; everything
/// else ignores `adapt`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    kind: AgentKind,
    scenario: &Arc<ScenarioConfig>,
    assignment: &Arc<IpAssignment>,
    checkpoint: Option<&Value>,
    agent_params: &Value,
    episodes: usize,
    adapt: bool,
    eval_seed: u64,
    threads: usize,
) -> Result<Vec<EpisodeTrace>, ExperimentError> {
    let hosts = scenario.game_hosts().count();
    match kind {
        AgentKind::Random => run_episodes(
            || Box::new(RandomAgent) as Box<dyn Agent>,
            scenario,
            assignment,
            episodes,
            eval_seed,
            threads,
        ),
        AgentKind::Oracle => {
            let scenario_ref = scenario.clone();
            let assignment_ref = assignment.clone();
            run_episodes(
                move || {
                    Box::new(OracleAgent::new(scenario_ref.clone(), assignment_ref.clone()))
                        as Box<dyn Agent>
                },
                scenario,
                assignment,
                episodes,
                eval_seed,
                threads,
            )
        }
        AgentKind::DqnSingle | AgentKind::DqnDual => {
            let ckpt: DqnCheckpoint = checkpoint_data(
                kind,
                checkpoint.ok_or_else(|| {
                    ExperimentError::CheckpointMismatch("dqn evaluation requires a checkpoint".into())
                })?,
            )?;
            let net = ckpt.net;
            run_episodes(
                move || Box::new(DqnAgent::new(net.clone(), hosts)) as Box<dyn Agent>,
                scenario,
                assignment,
                episodes,
                eval_seed,
                threads,
            )
        }
        AgentKind::Ddqn => {
            let ckpt: DdqnCheckpoint = checkpoint_data(
                kind,
                checkpoint.ok_or_else(|| {
                    ExperimentError::CheckpointMismatch("ddqn evaluation requires a checkpoint".into())
                })?,
            )?;
            let agent = DdqnAgent::new(ckpt, scenario, assignment)
                .map_err(|e| ExperimentError::CheckpointMismatch(e.to_string()))?;
            // The DDQN net is large; share one agent across a single thread.
            let agent = std::sync::Mutex::new(agent);
            let mut traces = Vec::with_capacity(episodes);
            for episode in 0..episodes {
                let seed = derive_seed(eval_seed, "eval-episode", &[episode as u64]);
                let mut guard = agent.lock().expect("no poisoned lock");
                traces.push(run_episode(&mut *guard, scenario, assignment, seed)?);
            }
            Ok(traces)
        }
        AgentKind::Conceptual => {
            let ckpt: ConceptualCheckpoint = checkpoint_data(
                kind,
                checkpoint.ok_or_else(|| {
                    ExperimentError::CheckpointMismatch(
                        "conceptual evaluation requires a checkpoint".into(),
                    )
                })?,
            )?;
            let q = ckpt.q;
            run_episodes(
                move || Box::new(ConceptualAgent::new(q.clone())) as Box<dyn Agent>,
                scenario,
                assignment,
                episodes,
                eval_seed,
                threads,
            )
        }
        AgentKind::Maml | AgentKind::Reptile => {
            let ckpt: MetaCheckpoint = checkpoint_data(
                kind,
                checkpoint.ok_or_else(|| {
                    ExperimentError::CheckpointMismatch("meta evaluation requires a checkpoint".into())
                })?,
            )?;
            let mut cfg: MetaConfig = params(agent_params)?;
            cfg.test_query = episodes;
            let task = TaskSpec {
                assignment: assignment.clone(),
                base_seed: derive_seed(eval_seed, "test-task", &[]),
                randomize_start: true,
            };
            if adapt {
                let (_, traces) =
                    test_time_adapt_and_eval(&ckpt.net, scenario, &task, &cfg, true, eval_seed);
                Ok(traces)
            } else {
                let net = ckpt.net;
                run_episodes(
                    move || Box::new(PolicyAgent::new(net.clone(), hosts)) as Box<dyn Agent>,
                    scenario,
                    assignment,
                    episodes,
                    eval_seed,
                    threads,
                )
            }
        }
    }
}

/// Render training curves as CSV.
pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("episode,variant,win,return,steps,loss\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{:.3},{},{:.6}\n",
            row.episode,
            row.variant,
            row.win as u8,
            row.ret,
            row.steps,
            row.loss
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::canonical_scenario;

    fn setup() -> (Arc<ScenarioConfig>, Arc<IpAssignment>) {
        let scenario = Arc::new(canonical_scenario());
        let assignment = Arc::new(generate_variant(&scenario, 5));
        (scenario, assignment)
    }

    #[test]
    fn agent_kind_round_trip() {
        for kind in AGENT_KINDS {
            assert_eq!(kind.name().parse::<AgentKind>().unwrap(), kind);
        }
        assert!("gpt".parse::<AgentKind>().is_err());
    }

    #[test]
    fn untrainable_agents_are_rejected() {
        let (scenario, assignment) = setup();
        for kind in [AgentKind::Random, AgentKind::Oracle] {
            let err = train(
                kind,
                &scenario,
                std::slice::from_ref(&assignment),
                10,
                &Value::Null,
                1,
            )
            .unwrap_err();
            assert!(err.to_string().contains("not trainable"), "{err}");
        }
    }

    #[test]
    fn run_episodes_is_thread_count_invariant() {
        let (scenario, assignment) = setup();
        let serial = run_episodes(
            || Box::new(RandomAgent) as Box<dyn Agent>,
            &scenario,
            &assignment,
            20,
            77,
            1,
        )
        .unwrap();
        let parallel = run_episodes(
            || Box::new(RandomAgent) as Box<dyn Agent>,
            &scenario,
            &assignment,
            20,
            77,
            4,
        )
        .unwrap();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn checkpoint_kind_mismatch_is_detected() {
        let (scenario, assignment) = setup();
        let out = train(
            AgentKind::DqnSingle,
            &scenario,
            std::slice::from_ref(&assignment),
            3,
            &serde_json::json!({"hidden": 8, "min_buffer": 16, "batch_size": 8}),
            1,
        )
        .unwrap();
        let err = evaluate(
            AgentKind::Conceptual,
            &scenario,
            &assignment,
            Some(&out.checkpoint),
            &Value::Null,
            3,
            false,
            1,
            1,
        )
        .unwrap_err();
        assert!(matches!(err, ExperimentError::CheckpointMismatch(_)), "{err}");
    }

    #[test]
    fn experiment_config_validation() {
        let mut config = ExperimentConfig {
            scenario: "scenarios/data_exfiltration.json".into(),
            variant_seeds: vec![1, 2, 3, 4, 5, 6],
            agent: AgentKind::Random,
            agent_params: Value::Null,
            train_episodes_per_variant: 10,
            eval_episodes: 10,
            out_dir: "out/test".into(),
            master_seed: 7,
        };
        config.validate().unwrap();
        config.variant_seeds = vec![1, 2, 3];
        assert!(config.validate().is_err());
        config.variant_seeds = vec![1, 1, 2, 3, 4, 5];
        assert!(config.validate().is_err());
    }
}
