//! Agent contract, the random baseline, the scripted solvability oracle,
//! and a line-delimited JSON adapter for out-of-process agents.

use std::io::{BufRead, BufReader, Write};
use std::net::Ipv4Addr;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::{Action, ActionWire, EndReason, Observation, ServiceRef, StepResult};
use crate::rng::Rng;
use crate::scenario::{IpAssignment, NetworkRole, ScenarioConfig};

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("no valid actions to select from")]
    EmptyValidSet,
    #[error("oracle plan precondition unavailable: {0}")]
    OracleBroken(String),
    #[error("no concrete host compatible with concept {0}")]
    Grounding(String),
    #[error("external agent failure: {0}")]
    External(String),
}

/// Common contract for every attacker.
///
/// Agents receive the engine's valid-action list instead of recomputing it;
/// the list is observation-equivalent to what they could derive themselves.
/// A frozen agent must not mutate internal parameters between calls.
pub trait Agent {
    fn select(
        &mut self,
        obs: &Observation,
        valid: &[Action],
        rng: &mut Rng,
    ) -> Result<Action, AgentError>;

    /// Step feedback; frozen agents typically ignore it.
    fn observe(&mut self, _result: &StepResult) {}

    fn episode_start(&mut self, _obs: &Observation) {}

    fn episode_end(&mut self, _end: Option<EndReason>) {}

    /// Frozen agents perform no parameter updates during evaluation.
    fn frozen(&self) -> bool {
        true
    }
}

/// Uniform selection over the valid-action set; no memory, no learning.
#[derive(Default)]
pub struct RandomAgent;

impl Agent for RandomAgent {
    fn select(
        &mut self,
        _obs: &Observation,
        valid: &[Action],
        rng: &mut Rng,
    ) -> Result<Action, AgentError> {
        if valid.is_empty() {
            return Err(AgentError::EmptyValidSet);
        }
        Ok(valid[rng.gen_range(valid.len())].clone())
    }
}

/// Scripted oracle that executes the five-step optimal exfiltration plan:
/// scan the server network, find services on the goal server, exploit it,
/// find its data, exfiltrate to the C&C host. Used to certify that every
/// generated variant is solvable with return `success - 5`.
pub struct OracleAgent {
    config: Arc<ScenarioConfig>,
    assignment: Arc<IpAssignment>,
}

impl OracleAgent {
    pub fn new(config: Arc<ScenarioConfig>, assignment: Arc<IpAssignment>) -> Self {
        OracleAgent { config, assignment }
    }

    fn goal_server(&self) -> Result<(Ipv4Addr, ServiceRef), AgentError> {
        let host = self
            .config
            .game_hosts()
            .find(|h| h.data.iter().any(|d| d.id == self.config.goal.data_id))
            .ok_or_else(|| {
                AgentError::OracleBroken(format!(
                    "goal data {:?} is on no host",
                    self.config.goal.data_id
                ))
            })?;
        let service = host.services.iter().find(|s| s.exploitable).ok_or_else(|| {
            AgentError::OracleBroken(format!(
                "goal host {:?} has no exploitable service",
                host.role_id
            ))
        })?;
        let ip = self.assignment.ip_of(&host.role_id).ok_or_else(|| {
            AgentError::OracleBroken(format!("goal host {:?} has no address", host.role_id))
        })?;
        Ok((
            ip,
            ServiceRef {
                name: Arc::from(service.name.as_str()),
                port: service.port,
            },
        ))
    }
}

impl Agent for OracleAgent {
    fn select(
        &mut self,
        obs: &Observation,
        _valid: &[Action],
        _rng: &mut Rng,
    ) -> Result<Action, AgentError> {
        let (goal_ip, goal_service) = self.goal_server()?;
        let goal_data = self
            .config
            .game_hosts()
            .flat_map(|h| h.data.iter())
            .find(|d| d.id == self.config.goal.data_id)
            .expect("goal host located above");
        let cc = self
            .assignment
            .ip_of(&self.config.goal.destination)
            .ok_or_else(|| AgentError::OracleBroken("goal destination unassigned".into()))?;
        // The controlled foothold inside a client-role network.
        let foothold = obs
            .controlled_hosts
            .iter()
            .copied()
            .find(|&ip| {
                self.assignment
                    .network_containing(ip)
                    .and_then(|name| self.config.networks.iter().find(|n| n.name == name))
                    .is_some_and(|n| n.role == NetworkRole::Client)
            })
            .ok_or_else(|| AgentError::OracleBroken("no controlled client foothold".into()))?;

        if !obs.known_hosts.contains(&goal_ip) {
            let server_net = self
                .config
                .networks
                .iter()
                .find(|n| n.role == NetworkRole::Server)
                .and_then(|n| self.assignment.prefix_of(&n.name))
                .ok_or_else(|| AgentError::OracleBroken("no server network".into()))?;
            if !obs.known_networks.contains(&server_net) {
                return Err(AgentError::OracleBroken(
                    "server network unknown at start".into(),
                ));
            }
            return Ok(Action::scan_network(foothold, server_net));
        }
        if !obs.known_services.contains_key(&goal_ip) {
            return Ok(Action::find_services(foothold, goal_ip));
        }
        if !obs.controlled_hosts.contains(&goal_ip) {
            if !obs.known_services[&goal_ip].contains(&goal_service) {
                return Err(AgentError::OracleBroken(format!(
                    "service {}:{} not discovered on goal host",
                    goal_service.name, goal_service.port
                )));
            }
            return Ok(Action::exploit_service(foothold, goal_ip, goal_service));
        }
        let data_ref = crate::engine::DataRef {
            owner: Arc::from(goal_data.owner.as_str()),
            id: Arc::from(goal_data.id.as_str()),
        };
        match obs.known_data.get(&goal_ip) {
            None => Ok(Action::find_data(foothold, goal_ip)),
            Some(items) if !items.contains(&data_ref) => Err(AgentError::OracleBroken(
                "goal data missing from goal host".into(),
            )),
            Some(_) => Ok(Action::exfiltrate_data(goal_ip, cc, data_ref)),
        }
    }
}

/// One decision request sent to an external agent process.
#[derive(Serialize, Deserialize)]
pub struct ExternalRequest {
    pub step: u32,
    pub observation: Observation,
    pub valid_actions: Vec<ActionWire>,
}

/// Reply from an external agent: either a fully parameterized action or an
/// index into the offered valid-action list.
#[derive(Serialize, Deserialize, Default)]
pub struct ExternalReply {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<ActionWire>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice: Option<usize>,
}

/// End-of-episode notification.
#[derive(Serialize, Deserialize)]
pub struct ExternalEvent {
    pub event: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_reason: Option<EndReason>,
}

/// Adapter that delegates decisions to a child process over line-delimited
/// JSON: one [`ExternalRequest`] per line on its stdin, one
/// [`ExternalReply`] per line on its stdout. Lets LLM-backed agents plug in
/// without linking against this crate.
pub struct ExternalProcessAgent {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
    step: u32,
}

impl ExternalProcessAgent {
    pub fn spawn(mut command: Command) -> Result<Self, AgentError> {
        let mut child = command
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| AgentError::External(format!("spawn failed: {e}")))?;
        let stdin = child
            .stdin
            .take()
            .ok_or_else(|| AgentError::External("child stdin unavailable".into()))?;
        let stdout = child
            .stdout
            .take()
            .ok_or_else(|| AgentError::External("child stdout unavailable".into()))?;
        Ok(ExternalProcessAgent {
            child,
            stdin,
            stdout: BufReader::new(stdout),
            step: 0,
        })
    }

    fn send<T: Serialize>(&mut self, value: &T) -> Result<(), AgentError> {
        let line = serde_json::to_string(value)
            .map_err(|e| AgentError::External(format!("encode failed: {e}")))?;
        writeln!(self.stdin, "{line}")
            .and_then(|_| self.stdin.flush())
            .map_err(|e| AgentError::External(format!("write failed: {e}")))
    }
}

impl Agent for ExternalProcessAgent {
    fn select(
        &mut self,
        obs: &Observation,
        valid: &[Action],
        _rng: &mut Rng,
    ) -> Result<Action, AgentError> {
        if valid.is_empty() {
            return Err(AgentError::EmptyValidSet);
        }
        let request = ExternalRequest {
            step: self.step,
            observation: obs.clone(),
            valid_actions: valid.iter().cloned().map(ActionWire::from).collect(),
        };
        self.send(&request)?;
        let mut line = String::new();
        self.stdout
            .read_line(&mut line)
            .map_err(|e| AgentError::External(format!("read failed: {e}")))?;
        if line.trim().is_empty() {
            return Err(AgentError::External("external agent closed stream".into()));
        }
        let reply: ExternalReply = serde_json::from_str(line.trim())
            .map_err(|e| AgentError::External(format!("bad reply {line:?}: {e}")))?;
        self.step += 1;
        if let Some(wire) = reply.action {
            return Action::try_from(wire).map_err(AgentError::External);
        }
        if let Some(choice) = reply.choice {
            return valid
                .get(choice)
                .cloned()
                .ok_or_else(|| AgentError::External(format!("choice {choice} out of range")));
        }
        Err(AgentError::External(
            "reply carries neither action nor choice".into(),
        ))
    }

    fn episode_start(&mut self, _obs: &Observation) {
        self.step = 0;
    }

    fn episode_end(&mut self, end: Option<EndReason>) {
        let _ = self.send(&ExternalEvent {
            event: "episode_end".into(),
            end_reason: end,
        });
    }
}

impl Drop for ExternalProcessAgent {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
