//! Ground-truth game dynamics: observation construction, valid-action
//! enumeration, transition and reward semantics, and termination.
//!
//! The attacker only ever sees an [`Observation`]: the assets it has
//! discovered so far. Actions are parameterized by arguments drawn from that
//! observation, and the engine resolves them against the hidden ground truth
//! (scenario plus IP assignment).
//!
//! Reward semantics:
//! * every executed step pays the step cost;
//! * a parameter-invalid or firewall-blocked attempt additionally pays the
//!   fail penalty and leaves the state unchanged;
//! * landing the goal data on the exfiltration destination additionally pays
//!   the success reward and ends the episode;
//! * reaching the step horizon ends the episode with no extra reward.
//!
//! A winning episode's return is therefore exactly
//! `success - steps - |fail| * failed_attempts`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::Ipv4Addr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::rng::{fnv1a64, Rng};
use crate::scenario::{Cidr, IpAssignment, NetworkRole, ScenarioConfig};

/// A discovered service on a host.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ServiceRef {
    pub name: Arc<str>,
    pub port: u16,
}

/// A discovered data item.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DataRef {
    pub owner: Arc<str>,
    pub id: Arc<str>,
}

/// The attacker's view of the world: everything discovered so far.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub known_networks: BTreeSet<Cidr>,
    pub known_hosts: BTreeSet<Ipv4Addr>,
    pub controlled_hosts: BTreeSet<Ipv4Addr>,
    pub known_services: BTreeMap<Ipv4Addr, BTreeSet<ServiceRef>>,
    pub known_data: BTreeMap<Ipv4Addr, BTreeSet<DataRef>>,
    pub known_blocks: BTreeSet<(Ipv4Addr, Ipv4Addr)>,
}

impl Observation {
    /// Structural invariants from the state-space definition.
    pub fn check_invariants(&self) -> Result<(), EngineError> {
        if !self.controlled_hosts.is_subset(&self.known_hosts) {
            return Err(EngineError::CorruptObservation(
                "controlled_hosts not a subset of known_hosts".into(),
            ));
        }
        for ip in self.known_services.keys().chain(self.known_data.keys()) {
            if !self.known_hosts.contains(ip) {
                return Err(EngineError::CorruptObservation(format!(
                    "map key {ip} not in known_hosts"
                )));
            }
        }
        Ok(())
    }

    /// Stable content digest of the canonical JSON serialization.
    pub fn digest(&self) -> u64 {
        let json = serde_json::to_string(self).expect("observation serializes");
        fnv1a64(json.as_bytes())
    }
}

/// The five attacker action types, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    ScanNetwork,
    FindServices,
    FindData,
    ExploitService,
    ExfiltrateData,
}

pub const ACTION_KINDS: [ActionKind; 5] = [
    ActionKind::ScanNetwork,
    ActionKind::FindServices,
    ActionKind::FindData,
    ActionKind::ExploitService,
    ActionKind::ExfiltrateData,
];

impl ActionKind {
    pub fn index(self) -> usize {
        match self {
            ActionKind::ScanNetwork => 0,
            ActionKind::FindServices => 1,
            ActionKind::FindData => 2,
            ActionKind::ExploitService => 3,
            ActionKind::ExfiltrateData => 4,
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ActionKind::ScanNetwork => "ScanNetwork",
            ActionKind::FindServices => "FindServices",
            ActionKind::FindData => "FindData",
            ActionKind::ExploitService => "ExploitService",
            ActionKind::ExfiltrateData => "ExfiltrateData",
        };
        f.write_str(name)
    }
}

/// Action target: a network prefix (scans) or a host address (everything else).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ActionTarget {
    Network(Cidr),
    Host(Ipv4Addr),
}

/// A fully parameterized attacker action.
///
/// Construct through the per-type constructors so that parameter presence
/// always matches the action type.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[derive(Serialize, Deserialize)]
#[serde(try_from = "ActionWire", into = "ActionWire")]
pub struct Action {
    pub kind: ActionKind,
    pub source_host: Ipv4Addr,
    pub target: ActionTarget,
    pub service: Option<ServiceRef>,
    pub data: Option<DataRef>,
}

impl Action {
    pub fn scan_network(source: Ipv4Addr, network: Cidr) -> Self {
        Action {
            kind: ActionKind::ScanNetwork,
            source_host: source,
            target: ActionTarget::Network(network),
            service: None,
            data: None,
        }
    }

    pub fn find_services(source: Ipv4Addr, target: Ipv4Addr) -> Self {
        Action {
            kind: ActionKind::FindServices,
            source_host: source,
            target: ActionTarget::Host(target),
            service: None,
            data: None,
        }
    }

    pub fn find_data(source: Ipv4Addr, target: Ipv4Addr) -> Self {
        Action {
            kind: ActionKind::FindData,
            source_host: source,
            target: ActionTarget::Host(target),
            service: None,
            data: None,
        }
    }

    pub fn exploit_service(source: Ipv4Addr, target: Ipv4Addr, service: ServiceRef) -> Self {
        Action {
            kind: ActionKind::ExploitService,
            source_host: source,
            target: ActionTarget::Host(target),
            service: Some(service),
            data: None,
        }
    }

    pub fn exfiltrate_data(source: Ipv4Addr, target: Ipv4Addr, data: DataRef) -> Self {
        Action {
            kind: ActionKind::ExfiltrateData,
            source_host: source,
            target: ActionTarget::Host(target),
            service: None,
            data: Some(data),
        }
    }

    pub fn target_host(&self) -> Option<Ipv4Addr> {
        match self.target {
            ActionTarget::Host(ip) => Some(ip),
            ActionTarget::Network(_) => None,
        }
    }

    pub fn target_network(&self) -> Option<Cidr> {
        match self.target {
            ActionTarget::Network(c) => Some(c),
            ActionTarget::Host(_) => None,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{} -> ", self.kind, self.source_host)?;
        match self.target {
            ActionTarget::Network(net) => write!(f, "{net}")?,
            ActionTarget::Host(ip) => write!(f, "{ip}")?,
        }
        if let Some(service) = &self.service {
            write!(f, " svc {}:{}", service.name, service.port)?;
        }
        if let Some(data) = &self.data {
            write!(f, " data {}:{}", data.owner, data.id)?;
        }
        f.write_str("]")
    }
}

/// Serialized form of an action, shared by traces and the external-agent
/// wire protocol.
#[derive(Clone, Serialize, Deserialize)]
pub struct ActionWire {
    #[serde(rename = "type")]
    pub kind: ActionKind,
    pub source_host: Ipv4Addr,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_network: Option<Cidr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_host: Option<Ipv4Addr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service: Option<ServiceRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataRef>,
}

impl From<Action> for ActionWire {
    fn from(a: Action) -> Self {
        ActionWire {
            kind: a.kind,
            source_host: a.source_host,
            target_network: a.target_network(),
            target_host: a.target_host(),
            service: a.service,
            data: a.data,
        }
    }
}

impl TryFrom<ActionWire> for Action {
    type Error = String;

    fn try_from(w: ActionWire) -> Result<Self, Self::Error> {
        let target = match (w.kind, w.target_network, w.target_host) {
            (ActionKind::ScanNetwork, Some(net), None) => ActionTarget::Network(net),
            (ActionKind::ScanNetwork, _, _) => {
                return Err("ScanNetwork requires target_network".into())
            }
            (_, None, Some(host)) => ActionTarget::Host(host),
            (kind, _, _) => return Err(format!("{kind} requires target_host")),
        };
        match w.kind {
            ActionKind::ExploitService if w.service.is_none() => {
                return Err("ExploitService requires service".into())
            }
            ActionKind::ExfiltrateData if w.data.is_none() => {
                return Err("ExfiltrateData requires data".into())
            }
            _ => {}
        }
        Ok(Action {
            kind: w.kind,
            source_host: w.source_host,
            target,
            service: w.service,
            data: w.data,
        })
    }
}

/// Why an episode ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    Success,
    Timeout,
    /// Detection by a defender; unreachable in the shipped scenarios but part
    /// of the agent-facing contract.
    Fail,
}

/// Result of one environment step.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub ended: bool,
    pub end_reason: Option<EndReason>,
    /// Whether the observation changed (a progress action).
    pub progressed: bool,
}

/// One per-step record of an episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u32,
    pub obs_digest: u64,
    pub action: Action,
    pub reward: f64,
    pub progressed: bool,
    pub end_reason: Option<EndReason>,
}

/// Full per-step record of a single episode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub records: Vec<StepRecord>,
}

impl EpisodeTrace {
    pub fn steps(&self) -> usize {
        self.records.len()
    }

    pub fn total_return(&self) -> f64 {
        self.records.iter().map(|r| r.reward).sum()
    }

    pub fn end_reason(&self) -> Option<EndReason> {
        self.records.last().and_then(|r| r.end_reason)
    }

    pub fn won(&self) -> bool {
        self.end_reason() == Some(EndReason::Success)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("episode already ended")]
    EpisodeEnded,
    #[error("address {0} is not part of this assignment")]
    UnknownAddress(Ipv4Addr),
    #[error("corrupt observation: {0}")]
    CorruptObservation(String),
    #[error("trace format error: {0}")]
    TraceFormat(String),
}

/// JSON-lines record of one trace step:
/// `{step, action_type, action_params, reward, progressed, end_reason}`.
#[derive(Serialize, Deserialize)]
struct TraceLine {
    step: u32,
    action_type: ActionKind,
    action_params: serde_json::Value,
    reward: f64,
    progressed: bool,
    end_reason: Option<EndReason>,
}

/// Serialize traces to JSON-lines, one record per step; episodes are
/// concatenated and a new episode starts at `step == 0`.
pub fn traces_to_jsonl(traces: &[EpisodeTrace]) -> String {
    let mut out = String::new();
    for trace in traces {
        for record in &trace.records {
            let mut wire = serde_json::to_value(ActionWire::from(record.action.clone()))
                .expect("action serializes");
            let map = wire.as_object_mut().expect("action wire is an object");
            map.remove("type");
            let line = TraceLine {
                step: record.step,
                action_type: record.action.kind,
                action_params: wire,
                reward: record.reward,
                progressed: record.progressed,
                end_reason: record.end_reason,
            };
            out.push_str(&serde_json::to_string(&line).expect("trace line serializes"));
            out.push('\n');
        }
    }
    out
}

/// Parse JSON-lines traces written by [`traces_to_jsonl`]. Observation
/// digests are not part of the wire format and come back as zero.
pub fn traces_from_jsonl(text: &str) -> Result<Vec<EpisodeTrace>, EngineError> {
    let mut traces = Vec::new();
    let mut current = EpisodeTrace::default();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine = serde_json::from_str(line)
            .map_err(|e| EngineError::TraceFormat(format!("line {}: {e}", lineno + 1)))?;
        if parsed.step == 0 && !current.records.is_empty() {
            traces.push(std::mem::take(&mut current));
        }
        let mut wire = parsed.action_params;
        if let Some(map) = wire.as_object_mut() {
            map.insert("type".into(), serde_json::to_value(parsed.action_type).unwrap());
        }
        let action: Action = serde_json::from_value(wire)
            .map_err(|e| EngineError::TraceFormat(format!("line {}: {e}", lineno + 1)))?;
        current.records.push(StepRecord {
            step: parsed.step,
            obs_digest: 0,
            action,
            reward: parsed.reward,
            progressed: parsed.progressed,
            end_reason: parsed.end_reason,
        });
    }
    if !current.records.is_empty() {
        traces.push(current);
    }
    Ok(traces)
}

/// Destination argument for [`reachable`].
#[derive(Clone, Copy, Debug)]
pub enum ReachTarget {
    Host(Ipv4Addr),
    Network(Cidr),
}

impl From<Ipv4Addr> for ReachTarget {
    fn from(ip: Ipv4Addr) -> Self {
        ReachTarget::Host(ip)
    }
}

impl From<Cidr> for ReachTarget {
    fn from(net: Cidr) -> Self {
        ReachTarget::Network(net)
    }
}

/// Ground-truth reachability between concrete addresses under the firewall.
///
/// For a network destination this asks whether any host of that network (or
/// the network itself, when empty) accepts traffic from `src`.
pub fn reachable(
    config: &ScenarioConfig,
    assignment: &IpAssignment,
    src: Ipv4Addr,
    dst: impl Into<ReachTarget>,
) -> Result<bool, EngineError> {
    let src_role = assignment
        .role_of(src)
        .ok_or(EngineError::UnknownAddress(src))?;
    match dst.into() {
        ReachTarget::Host(ip) => {
            let dst_role = assignment
                .role_of(ip)
                .ok_or(EngineError::UnknownAddress(ip))?;
            config
                .reachable_roles(src_role, dst_role)
                .map_err(|e| EngineError::CorruptObservation(e.to_string()))
        }
        ReachTarget::Network(net) => {
            let net_name = config
                .networks
                .iter()
                .find(|n| assignment.prefix_of(&n.name) == Some(net))
                .map(|n| n.name.clone());
            let Some(net_name) = net_name else {
                return Ok(false);
            };
            for host in &config.hosts {
                let host_net = config.network_of(host).expect("validated config");
                if host_net.name == net_name
                    && config
                        .reachable_roles(src_role, &host.role_id)
                        .map_err(|e| EngineError::CorruptObservation(e.to_string()))?
                {
                    return Ok(true);
                }
            }
            Ok(false)
        }
    }
}

/// Enumerate every action available in `obs`, in canonical sorted order:
/// by action type, then source, target, service, and data.
pub fn valid_actions(obs: &Observation) -> Vec<Action> {
    let mut actions = Vec::new();
    for &src in &obs.controlled_hosts {
        for &net in &obs.known_networks {
            actions.push(Action::scan_network(src, net));
        }
    }
    for &src in &obs.controlled_hosts {
        for &tgt in &obs.known_hosts {
            actions.push(Action::find_services(src, tgt));
        }
    }
    for &src in &obs.controlled_hosts {
        for &tgt in &obs.known_hosts {
            actions.push(Action::find_data(src, tgt));
        }
    }
    for &src in &obs.controlled_hosts {
        for (&tgt, services) in &obs.known_services {
            for service in services {
                actions.push(Action::exploit_service(src, tgt, service.clone()));
            }
        }
    }
    for (&holder, items) in &obs.known_data {
        if !obs.controlled_hosts.contains(&holder) {
            continue;
        }
        for item in items {
            for &tgt in &obs.controlled_hosts {
                actions.push(Action::exfiltrate_data(holder, tgt, item.clone()));
            }
        }
    }
    actions
}

/// Cheap membership test equivalent to `valid_actions(obs).contains(action)`.
pub fn is_valid_action(obs: &Observation, action: &Action) -> bool {
    if !obs.controlled_hosts.contains(&action.source_host) {
        return false;
    }
    match action.kind {
        ActionKind::ScanNetwork => action
            .target_network()
            .is_some_and(|net| obs.known_networks.contains(&net)),
        ActionKind::FindServices | ActionKind::FindData => action
            .target_host()
            .is_some_and(|ip| obs.known_hosts.contains(&ip)),
        ActionKind::ExploitService => match (action.target_host(), &action.service) {
            (Some(ip), Some(service)) => obs
                .known_services
                .get(&ip)
                .is_some_and(|set| set.contains(service)),
            _ => false,
        },
        ActionKind::ExfiltrateData => match (action.target_host(), &action.data) {
            (Some(tgt), Some(data)) => {
                obs.controlled_hosts.contains(&tgt)
                    && obs.controlled_hosts.contains(&action.source_host)
                    && obs
                        .known_data
                        .get(&action.source_host)
                        .is_some_and(|set| set.contains(data))
            }
            _ => false,
        },
    }
}

/// The full parameterized action catalogue of a scenario under a concrete
/// assignment: every (type, arguments) combination that exists in the
/// configuration, before observability and validity constraints.
///
/// Its length equals [`crate::scenario::catalogue_size`] applied to the
/// scenario counts.
pub fn enumerate_catalogue(config: &ScenarioConfig, assignment: &IpAssignment) -> Vec<Action> {
    let hosts: Vec<Ipv4Addr> = config
        .game_hosts()
        .map(|h| assignment.ip_of(&h.role_id).expect("assigned host"))
        .collect();
    let networks: Vec<Cidr> = config
        .networks
        .iter()
        .map(|n| assignment.prefix_of(&n.name).expect("assigned network"))
        .collect();
    let mut services: Vec<(Ipv4Addr, ServiceRef)> = Vec::new();
    let mut data: Vec<(Ipv4Addr, DataRef)> = Vec::new();
    for host in config.game_hosts() {
        if host.network_role == NetworkRole::Internet {
            // The C&C listener is not part of the catalogue counts.
            continue;
        }
        let ip = assignment.ip_of(&host.role_id).unwrap();
        for s in &host.services {
            services.push((
                ip,
                ServiceRef {
                    name: Arc::from(s.name.as_str()),
                    port: s.port,
                },
            ));
        }
        for d in &host.data {
            data.push((
                ip,
                DataRef {
                    owner: Arc::from(d.owner.as_str()),
                    id: Arc::from(d.id.as_str()),
                },
            ));
        }
    }

    let mut catalogue = Vec::new();
    for &src in &hosts {
        for &net in &networks {
            catalogue.push(Action::scan_network(src, net));
        }
    }
    for &src in &hosts {
        for &tgt in &hosts {
            catalogue.push(Action::find_services(src, tgt));
        }
    }
    for &src in &hosts {
        for &tgt in &hosts {
            catalogue.push(Action::find_data(src, tgt));
        }
    }
    for &src in &hosts {
        for (tgt, service) in &services {
            catalogue.push(Action::exploit_service(src, *tgt, service.clone()));
        }
    }
    for &src in &hosts {
        for &tgt in &hosts {
            for (_, item) in &data {
                catalogue.push(Action::exfiltrate_data(src, tgt, item.clone()));
            }
        }
    }
    catalogue.sort();
    catalogue
}

/// Episode progress snapshot.
#[derive(Debug)]
pub struct EpisodeStatus<'a> {
    pub step_index: u32,
    pub trace: &'a EpisodeTrace,
}

/// A running episode.
pub struct GameHandle {
    config: Arc<ScenarioConfig>,
    assignment: Arc<IpAssignment>,
    obs: Observation,
    step_index: u32,
    end: Option<EndReason>,
    start_host: Ipv4Addr,
    goal_destination: Ipv4Addr,
    trace: EpisodeTrace,
    /// Ground-truth lookup tables built once per episode.
    host_services: BTreeMap<Ipv4Addr, BTreeSet<ServiceRef>>,
    host_data: BTreeMap<Ipv4Addr, BTreeSet<DataRef>>,
    exploitable: BTreeSet<(Ipv4Addr, ServiceRef)>,
    routers: BTreeSet<Ipv4Addr>,
}

impl GameHandle {
    /// Start a fresh episode. The starting foothold is drawn uniformly from
    /// the scenario's start pool using `rng_seed`; the initial observation
    /// contains the two controlled hosts (foothold and C&C), their networks,
    /// and the server subnet.
    pub fn reset(
        config: Arc<ScenarioConfig>,
        assignment: Arc<IpAssignment>,
        rng_seed: u64,
    ) -> (GameHandle, Observation) {
        let mut rng = Rng::from_stream(rng_seed, "episode-reset", &[]);
        let pool: Vec<String> = config.start_pool.iter().cloned().collect();
        let start_role = pool[rng.gen_range(pool.len())].clone();
        Self::reset_with_start(config, assignment, &start_role)
    }

    /// Start an episode from a fixed foothold role.
    pub fn reset_with_start(
        config: Arc<ScenarioConfig>,
        assignment: Arc<IpAssignment>,
        start_role: &str,
    ) -> (GameHandle, Observation) {
        let start_host = assignment.ip_of(start_role).expect("start host assigned");
        let goal_destination = assignment
            .ip_of(&config.goal.destination)
            .expect("goal destination assigned");

        let mut known_networks = BTreeSet::new();
        let start_spec = config.host(start_role).expect("start host exists");
        let start_net = config.network_of(start_spec).expect("start host network");
        known_networks.insert(assignment.prefix_of(&start_net.name).unwrap());
        for net in &config.networks {
            if matches!(net.role, NetworkRole::Server | NetworkRole::Internet) {
                known_networks.insert(assignment.prefix_of(&net.name).unwrap());
            }
        }

        let mut obs = Observation {
            known_networks,
            ..Observation::default()
        };
        obs.known_hosts.insert(start_host);
        obs.known_hosts.insert(goal_destination);
        obs.controlled_hosts.insert(start_host);
        obs.controlled_hosts.insert(goal_destination);

        let mut host_services = BTreeMap::new();
        let mut host_data = BTreeMap::new();
        let mut exploitable = BTreeSet::new();
        let mut routers = BTreeSet::new();
        for host in &config.hosts {
            let ip = assignment.ip_of(&host.role_id).unwrap();
            if host.is_router {
                routers.insert(ip);
                continue;
            }
            let services: BTreeSet<ServiceRef> = host
                .services
                .iter()
                .map(|s| ServiceRef {
                    name: Arc::from(s.name.as_str()),
                    port: s.port,
                })
                .collect();
            for (spec, service) in host.services.iter().zip(services.iter()) {
                if spec.exploitable {
                    exploitable.insert((ip, service.clone()));
                }
            }
            host_services.insert(ip, services);
            host_data.insert(
                ip,
                host.data
                    .iter()
                    .map(|d| DataRef {
                        owner: Arc::from(d.owner.as_str()),
                        id: Arc::from(d.id.as_str()),
                    })
                    .collect(),
            );
        }

        let handle = GameHandle {
            config,
            assignment,
            obs: obs.clone(),
            step_index: 0,
            end: None,
            start_host,
            goal_destination,
            trace: EpisodeTrace::default(),
            host_services,
            host_data,
            exploitable,
            routers,
        };
        (handle, obs)
    }

    pub fn observation(&self) -> &Observation {
        &self.obs
    }

    pub fn ended(&self) -> Option<EndReason> {
        self.end
    }

    pub fn start_host(&self) -> Ipv4Addr {
        self.start_host
    }

    pub fn status(&self) -> EpisodeStatus<'_> {
        EpisodeStatus {
            step_index: self.step_index,
            trace: &self.trace,
        }
    }

    pub fn trace(&self) -> &EpisodeTrace {
        &self.trace
    }

    pub fn into_trace(self) -> EpisodeTrace {
        self.trace
    }

    pub fn valid_actions(&self) -> Vec<Action> {
        valid_actions(&self.obs)
    }

    fn host_reachable(&self, src: Ipv4Addr, dst: Ipv4Addr) -> bool {
        reachable(&self.config, &self.assignment, src, dst).unwrap_or(false)
    }

    /// Execute one action. Acting on an ended episode is a protocol error.
    pub fn step(&mut self, action: &Action) -> Result<StepResult, EngineError> {
        if self.end.is_some() {
            return Err(EngineError::EpisodeEnded);
        }

        let rewards = self.config.rewards;
        let mut reward = rewards.step;
        let mut progressed = false;
        let mut failed = false;
        let mut success = false;

        if !self.obs.controlled_hosts.contains(&action.source_host) {
            failed = true;
        } else {
            match action.kind {
                ActionKind::ScanNetwork => {
                    let Some(net) = action.target_network() else {
                        failed = true;
                        return self.finish_step(action, reward, progressed, failed, success);
                    };
                    if !self.obs.known_networks.contains(&net) {
                        failed = true;
                    } else {
                        // Hosts respond only if reachable; routers never do.
                        let discovered: Vec<Ipv4Addr> = self
                            .host_services
                            .keys()
                            .copied()
                            .filter(|&ip| net.contains(ip))
                            .filter(|&ip| self.host_reachable(action.source_host, ip))
                            .collect();
                        for ip in discovered {
                            progressed |= self.obs.known_hosts.insert(ip);
                        }
                    }
                }
                ActionKind::FindServices => {
                    let tgt = action.target_host().expect("host target");
                    if !self.obs.known_hosts.contains(&tgt) || self.routers.contains(&tgt) {
                        failed = true;
                    } else if !self.host_reachable(action.source_host, tgt) {
                        failed = true; // blocked by the firewall
                    } else {
                        let services = self.host_services.get(&tgt).cloned().unwrap_or_default();
                        let entry = self.obs.known_services.entry(tgt);
                        match entry {
                            std::collections::btree_map::Entry::Vacant(v) => {
                                v.insert(services);
                                progressed = true;
                            }
                            std::collections::btree_map::Entry::Occupied(mut o) => {
                                for s in services {
                                    progressed |= o.get_mut().insert(s);
                                }
                            }
                        }
                    }
                }
                ActionKind::FindData => {
                    let tgt = action.target_host().expect("host target");
                    if !self.obs.known_hosts.contains(&tgt) || self.routers.contains(&tgt) {
                        failed = true;
                    } else if !self.host_reachable(action.source_host, tgt) {
                        failed = true;
                    } else if self.obs.controlled_hosts.contains(&tgt) {
                        // Data can only be read on hosts the attacker controls.
                        let data = self.host_data.get(&tgt).cloned().unwrap_or_default();
                        let entry = self.obs.known_data.entry(tgt);
                        match entry {
                            std::collections::btree_map::Entry::Vacant(v) => {
                                v.insert(data);
                                progressed = true;
                            }
                            std::collections::btree_map::Entry::Occupied(mut o) => {
                                for d in data {
                                    progressed |= o.get_mut().insert(d);
                                }
                            }
                        }
                    }
                }
                ActionKind::ExploitService => {
                    let tgt = action.target_host().expect("host target");
                    let service = action.service.as_ref().expect("service argument");
                    let known = self
                        .obs
                        .known_services
                        .get(&tgt)
                        .is_some_and(|set| set.contains(service));
                    if !known {
                        failed = true;
                    } else if !self.host_reachable(action.source_host, tgt) {
                        failed = true;
                    } else if self.exploitable.contains(&(tgt, service.clone())) {
                        progressed |= self.obs.controlled_hosts.insert(tgt);
                    }
                }
                ActionKind::ExfiltrateData => {
                    let tgt = action.target_host().expect("host target");
                    let data = action.data.as_ref().expect("data argument");
                    let holds = self
                        .obs
                        .known_data
                        .get(&action.source_host)
                        .is_some_and(|set| set.contains(data));
                    if !holds || !self.obs.controlled_hosts.contains(&tgt) {
                        failed = true;
                    } else if !self.host_reachable(action.source_host, tgt) {
                        failed = true;
                    } else {
                        let inserted = self
                            .obs
                            .known_data
                            .entry(tgt)
                            .or_default()
                            .insert(data.clone());
                        progressed |= inserted;
                        if inserted
                            && tgt == self.goal_destination
                            && *data.id == *self.config.goal.data_id
                        {
                            success = true;
                        }
                    }
                }
            }
        }

        if failed {
            reward += rewards.fail;
        }
        if success {
            reward += rewards.success;
        }
        self.finish_step(action, reward, progressed, failed, success)
    }

    fn finish_step(
        &mut self,
        action: &Action,
        reward: f64,
        progressed: bool,
        _failed: bool,
        success: bool,
    ) -> Result<StepResult, EngineError> {
        self.step_index += 1;
        if success {
            self.end = Some(EndReason::Success);
        } else if self.step_index >= self.config.max_steps {
            self.end = Some(EndReason::Timeout);
        }

        self.trace.records.push(StepRecord {
            step: self.step_index - 1,
            obs_digest: self.obs.digest(),
            action: action.clone(),
            reward,
            progressed,
            end_reason: self.end,
        });

        Ok(StepResult {
            observation: self.obs.clone(),
            reward,
            ended: self.end.is_some(),
            end_reason: self.end,
            progressed,
        })
    }
}

/// A structure-preserving renaming of addresses between two assignments of
/// the same scenario: networks map by name, hosts map by role.
#[derive(Clone, Debug)]
pub struct IpPermutation {
    pub hosts: BTreeMap<Ipv4Addr, Ipv4Addr>,
    pub networks: BTreeMap<Cidr, Cidr>,
}

impl IpPermutation {
    pub fn between(a: &IpAssignment, b: &IpAssignment) -> Self {
        let hosts = a
            .host_ips
            .iter()
            .map(|(role, &ip)| (ip, b.ip_of(role).expect("same scenario")))
            .collect();
        let networks = a
            .network_prefixes
            .iter()
            .map(|(name, &net)| (net, b.prefix_of(name).expect("same scenario")))
            .collect();
        IpPermutation { hosts, networks }
    }

    pub fn map_host(&self, ip: Ipv4Addr) -> Ipv4Addr {
        *self.hosts.get(&ip).unwrap_or(&ip)
    }

    pub fn map_network(&self, net: Cidr) -> Cidr {
        *self.networks.get(&net).unwrap_or(&net)
    }

    pub fn map_action(&self, action: &Action) -> Action {
        let mut mapped = action.clone();
        mapped.source_host = self.map_host(action.source_host);
        mapped.target = match action.target {
            ActionTarget::Host(ip) => ActionTarget::Host(self.map_host(ip)),
            ActionTarget::Network(net) => ActionTarget::Network(self.map_network(net)),
        };
        mapped
    }

    pub fn map_observation(&self, obs: &Observation) -> Observation {
        Observation {
            known_networks: obs
                .known_networks
                .iter()
                .map(|&n| self.map_network(n))
                .collect(),
            known_hosts: obs.known_hosts.iter().map(|&h| self.map_host(h)).collect(),
            controlled_hosts: obs
                .controlled_hosts
                .iter()
                .map(|&h| self.map_host(h))
                .collect(),
            known_services: obs
                .known_services
                .iter()
                .map(|(&h, set)| (self.map_host(h), set.clone()))
                .collect(),
            known_data: obs
                .known_data
                .iter()
                .map(|(&h, set)| (self.map_host(h), set.clone()))
                .collect(),
            known_blocks: obs
                .known_blocks
                .iter()
                .map(|&(a, b)| (self.map_host(a), self.map_host(b)))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{canonical_scenario, catalogue_size, generate_variant};

    fn setup(seed: u64) -> (Arc<ScenarioConfig>, Arc<IpAssignment>) {
        let config = Arc::new(canonical_scenario());
        let assignment = Arc::new(generate_variant(&config, seed));
        (config, assignment)
    }

    fn ip(assignment: &IpAssignment, role: &str) -> Ipv4Addr {
        assignment.ip_of(role).unwrap()
    }

    /// Drive the five-step optimal exfiltration plan by hand.
    fn run_optimal_plan(game: &mut GameHandle, assignment: &IpAssignment) -> Vec<StepResult> {
        let start = game.start_host();
        let server_net = assignment.prefix_of("server_net").unwrap();
        let db = ip(assignment, "db_server");
        let cc = ip(assignment, "cc_server");
        let mysql = ServiceRef { name: Arc::from("mysql"), port: 3306 };
        let goal = DataRef { owner: Arc::from("dba"), id: Arc::from("customer_records") };
        [
            Action::scan_network(start, server_net),
            Action::find_services(start, db),
            Action::exploit_service(start, db, mysql),
            Action::find_data(start, db),
            Action::exfiltrate_data(db, cc, goal),
        ]
        .iter()
        .map(|a| game.step(a).unwrap())
        .collect()
    }

    #[test]
    fn reset_is_deterministic_and_minimal() {
        let (config, assignment) = setup(1);
        let (g1, o1) = GameHandle::reset(config.clone(), assignment.clone(), 5);
        let (g2, o2) = GameHandle::reset(config, assignment, 5);
        assert_eq!(g1.start_host(), g2.start_host());
        assert_eq!(o1, o2);
        assert_eq!(o1.controlled_hosts.len(), 2);
        assert_eq!(o1.known_hosts, o1.controlled_hosts);
        assert_eq!(o1.known_networks.len(), 3);
        assert!(o1.known_services.is_empty());
        assert!(o1.known_data.is_empty());
        assert!(o1.known_blocks.is_empty());
    }

    #[test]
    fn initial_valid_actions_are_discovery_only() {
        let (config, assignment) = setup(2);
        let (game, obs) = GameHandle::reset(config, assignment, 0);
        let actions = game.valid_actions();
        assert_eq!(actions.len(), 14); // 2x3 scans + 2x2 find-services + 2x2 find-data
        assert!(actions.iter().all(|a| matches!(
            a.kind,
            ActionKind::ScanNetwork | ActionKind::FindServices | ActionKind::FindData
        )));
        assert!(obs.known_data.is_empty());
        for action in &actions {
            assert!(is_valid_action(&obs, action));
        }
    }

    #[test]
    fn optimal_plan_wins_in_five_steps_with_return_95() {
        for seed in 0..6 {
            let (config, assignment) = setup(seed);
            let (mut game, _) =
                GameHandle::reset_with_start(config, assignment.clone(), "client_3");
            let results = run_optimal_plan(&mut game, &assignment);
            assert_eq!(results.len(), 5);
            assert!(results[4].ended);
            assert_eq!(results[4].end_reason, Some(EndReason::Success));
            let total: f64 = results.iter().map(|r| r.reward).sum();
            assert_eq!(total, 95.0);
            assert_eq!(game.trace().total_return(), 95.0);
            assert!(game.trace().won());
        }
    }

    #[test]
    fn scan_reveals_only_reachable_hosts() {
        let (config, assignment) = setup(3);
        let (mut game, _) =
            GameHandle::reset_with_start(config, assignment.clone(), "client_1");
        let server_net = assignment.prefix_of("server_net").unwrap();
        let result = game
            .step(&Action::scan_network(game.start_host(), server_net))
            .unwrap();
        assert!(result.progressed);
        let obs = result.observation;
        for role in ["smb_server", "db_server", "web_server"] {
            assert!(obs.known_hosts.contains(&ip(&assignment, role)), "{role}");
        }
        for role in ["backup_server", "dc_server", "router"] {
            assert!(!obs.known_hosts.contains(&ip(&assignment, role)), "{role}");
        }
    }

    #[test]
    fn blocked_find_services_fails_and_leaves_state_unchanged() {
        let (config, assignment) = setup(4);
        let (mut game, _) =
            GameHandle::reset_with_start(config.clone(), assignment.clone(), "client_2");
        let start = game.start_host();
        let server_net = assignment.prefix_of("server_net").unwrap();
        let db = ip(&assignment, "db_server");
        let mysql = ServiceRef { name: Arc::from("mysql"), port: 3306 };
        game.step(&Action::scan_network(start, server_net)).unwrap();
        game.step(&Action::find_services(start, db)).unwrap();
        game.step(&Action::exploit_service(start, db, mysql)).unwrap();

        let before = game.observation().clone();
        // db_server is a server host; client hosts are unreachable from it.
        let result = game.step(&Action::find_services(db, start)).unwrap();
        assert_eq!(
            result.reward,
            config.rewards.step + config.rewards.fail,
            "blocked attempt pays step plus fail"
        );
        assert!(!result.progressed);
        assert_eq!(result.observation, before);
    }

    #[test]
    fn find_data_on_uncontrolled_host_is_a_noop() {
        let (config, assignment) = setup(5);
        let (mut game, _) =
            GameHandle::reset_with_start(config, assignment.clone(), "client_1");
        let start = game.start_host();
        let server_net = assignment.prefix_of("server_net").unwrap();
        game.step(&Action::scan_network(start, server_net)).unwrap();
        let db = ip(&assignment, "db_server");
        let result = game.step(&Action::find_data(start, db)).unwrap();
        assert_eq!(result.reward, -1.0);
        assert!(!result.progressed);
        assert!(!result.observation.known_data.contains_key(&db));
    }

    #[test]
    fn timeout_after_max_steps() {
        let (config, assignment) = setup(6);
        let (mut game, obs) = GameHandle::reset(config.clone(), assignment, 9);
        let scan = Action::scan_network(
            *obs.controlled_hosts.iter().next().unwrap(),
            *obs.known_networks.iter().next().unwrap(),
        );
        for i in 0..config.max_steps {
            let result = game.step(&scan).unwrap();
            assert_eq!(result.ended, i + 1 == config.max_steps);
        }
        assert_eq!(game.ended(), Some(EndReason::Timeout));
        assert!(matches!(game.step(&scan), Err(EngineError::EpisodeEnded)));
    }

    #[test]
    fn acting_from_uncontrolled_source_fails() {
        let (config, assignment) = setup(7);
        let (mut game, _) =
            GameHandle::reset_with_start(config, assignment.clone(), "client_1");
        let other = ip(&assignment, "client_4");
        let net = assignment.prefix_of("client_net").unwrap();
        let result = game.step(&Action::scan_network(other, net)).unwrap();
        assert_eq!(result.reward, -11.0);
        assert!(!result.progressed);
    }

    #[test]
    fn exfiltration_is_a_copy_and_supports_multi_hop() {
        let (config, assignment) = setup(8);
        let (mut game, _) =
            GameHandle::reset_with_start(config, assignment.clone(), "client_5");
        let start = game.start_host();
        let server_net = assignment.prefix_of("server_net").unwrap();
        let smb = ip(&assignment, "smb_server");
        let cc = ip(&assignment, "cc_server");
        let ssh = ServiceRef { name: Arc::from("ssh"), port: 22 };
        let reports = DataRef { owner: Arc::from("fileshare"), id: Arc::from("quarterly_reports") };
        game.step(&Action::scan_network(start, server_net)).unwrap();
        game.step(&Action::find_services(start, smb)).unwrap();
        game.step(&Action::exploit_service(start, smb, ssh)).unwrap();
        game.step(&Action::find_data(start, smb)).unwrap();
        let result = game
            .step(&Action::exfiltrate_data(smb, cc, reports.clone()))
            .unwrap();
        // non-goal data: progress but no success
        assert!(result.progressed);
        assert!(!result.ended);
        assert!(result.observation.known_data[&cc].contains(&reports));
        assert!(result.observation.known_data[&smb].contains(&reports));
        // repeating the same exfiltration is a no-op
        let repeat = game
            .step(&Action::exfiltrate_data(smb, cc, reports))
            .unwrap();
        assert!(!repeat.progressed);
        assert_eq!(repeat.reward, -1.0);
    }

    #[test]
    fn observations_grow_monotonically() {
        let (config, assignment) = setup(9);
        let (mut game, mut prev) = GameHandle::reset(config, assignment, 3);
        let mut rng = Rng::new(17);
        while game.ended().is_none() {
            let actions = game.valid_actions();
            let action = actions[rng.gen_range(actions.len())].clone();
            let result = game.step(&action).unwrap();
            let obs = result.observation;
            assert!(prev.known_hosts.is_subset(&obs.known_hosts));
            assert!(prev.controlled_hosts.is_subset(&obs.controlled_hosts));
            assert!(prev.known_networks.is_subset(&obs.known_networks));
            obs.check_invariants().unwrap();
            prev = obs;
        }
    }

    #[test]
    fn full_knowledge_valid_actions_bounded_by_catalogue() {
        let (config, assignment) = setup(10);
        let (mut game, _) =
            GameHandle::reset_with_start(config.clone(), assignment.clone(), "client_1");
        // brute-force play to saturation: control everything controllable
        let mut rng = Rng::new(5);
        for _ in 0..90 {
            if game.ended().is_some() {
                break;
            }
            let actions = game.valid_actions();
            // prefer knowledge-expanding kinds to saturate quickly
            let pick = actions
                .iter()
                .find(|a| {
                    matches!(a.kind, ActionKind::ScanNetwork | ActionKind::FindServices
                        | ActionKind::FindData | ActionKind::ExploitService)
                        && rng.gen_bool(0.7)
                })
                .unwrap_or(&actions[0])
                .clone();
            game.step(&pick).unwrap();
        }
        let n = game.valid_actions().len() as u128;
        assert!(n <= catalogue_size(11, 4, 13, 5));
    }

    #[test]
    fn catalogue_enumeration_matches_formula() {
        let (config, assignment) = setup(11);
        let catalogue = enumerate_catalogue(&config, &assignment);
        assert_eq!(catalogue.len() as u128, catalogue_size(11, 4, 13, 5));
        assert_eq!(catalogue.len(), 1034);
        let mut sorted = catalogue.clone();
        sorted.sort();
        assert_eq!(catalogue, sorted);
    }

    #[test]
    fn reachability_matches_allow_table() {
        let (config, assignment) = setup(12);
        let client = ip(&assignment, "client_1");
        let client2 = ip(&assignment, "client_2");
        let db = ip(&assignment, "db_server");
        let backup = ip(&assignment, "backup_server");
        let cc = ip(&assignment, "cc_server");
        let router = ip(&assignment, "router");
        let ok = |src, dst| reachable(&config, &assignment, src, dst).unwrap();
        assert!(ok(client, client2));
        assert!(ok(client, db));
        assert!(!ok(client, backup));
        assert!(ok(client, cc));
        assert!(ok(db, backup));
        assert!(ok(db, cc));
        assert!(!ok(db, client));
        assert!(!ok(cc, client));
        assert!(!ok(cc, db));
        assert!(!ok(client, router));
        assert!(!ok(db, router));
        // network destination form
        let server_net = assignment.prefix_of("server_net").unwrap();
        let guest_net = assignment.prefix_of("guest_net").unwrap();
        assert!(ok(client, db));
        assert!(reachable(&config, &assignment, client, server_net).unwrap());
        assert!(!reachable(&config, &assignment, cc, server_net).unwrap());
        assert!(!reachable(&config, &assignment, client, guest_net).unwrap());
        // unknown address errors
        let stranger = Ipv4Addr::new(8, 8, 8, 8);
        assert!(reachable(&config, &assignment, stranger, db).is_err());
    }

    #[test]
    fn action_wire_round_trip() {
        let (config, assignment) = setup(13);
        let catalogue = enumerate_catalogue(&config, &assignment);
        for action in catalogue.iter().step_by(97) {
            let json = serde_json::to_string(action).unwrap();
            let back: Action = serde_json::from_str(&json).unwrap();
            assert_eq!(*action, back);
        }
        // malformed wire forms are rejected
        assert!(serde_json::from_str::<Action>(
            r#"{"type":"ScanNetwork","source_host":"10.0.0.2","target_host":"10.0.0.3"}"#
        )
        .is_err());
        assert!(serde_json::from_str::<Action>(
            r#"{"type":"ExploitService","source_host":"10.0.0.2","target_host":"10.0.0.3"}"#
        )
        .is_err());
    }

    #[test]
    fn trace_jsonl_round_trip() {
        let (config, assignment) = setup(21);
        let mut traces = Vec::new();
        for episode in 0..3u64 {
            let (mut game, _) = GameHandle::reset(config.clone(), assignment.clone(), episode);
            let mut rng = Rng::new(episode);
            while game.ended().is_none() {
                let actions = game.valid_actions();
                let action = actions[rng.gen_range(actions.len())].clone();
                game.step(&action).unwrap();
            }
            traces.push(game.into_trace());
        }
        let jsonl = traces_to_jsonl(&traces);
        let parsed = traces_from_jsonl(&jsonl).unwrap();
        assert_eq!(parsed.len(), traces.len());
        for (original, round) in traces.iter().zip(&parsed) {
            assert_eq!(original.steps(), round.steps());
            assert_eq!(original.total_return(), round.total_return());
            assert_eq!(original.end_reason(), round.end_reason());
            for (a, b) in original.records.iter().zip(&round.records) {
                assert_eq!(a.action, b.action);
                assert_eq!(a.progressed, b.progressed);
            }
        }
        // wire format carries exactly the documented fields, in order
        let first_line = jsonl.lines().next().unwrap();
        assert!(first_line.starts_with("{\"step\":"), "{first_line}");
        for key in ["action_type", "action_params", "reward", "progressed", "end_reason"] {
            assert!(first_line.contains(&format!("\"{key}\":")), "{first_line}");
        }
        assert!(traces_from_jsonl("{oops").is_err());
    }

    #[test]
    fn engine_is_ip_equivariant() {
        let config = Arc::new(canonical_scenario());
        let a = Arc::new(generate_variant(&config, 100));
        let b = Arc::new(generate_variant(&config, 200));
        let perm = IpPermutation::between(&a, &b);
        let (mut game_a, obs_a) =
            GameHandle::reset_with_start(config.clone(), a.clone(), "client_2");
        let (mut game_b, obs_b) = GameHandle::reset_with_start(config, b, "client_2");
        assert_eq!(perm.map_observation(&obs_a), obs_b);
        let mut rng = Rng::new(99);
        while game_a.ended().is_none() {
            let actions = game_a.valid_actions();
            let action = actions[rng.gen_range(actions.len())].clone();
            let ra = game_a.step(&action).unwrap();
            let rb = game_b.step(&perm.map_action(&action)).unwrap();
            assert_eq!(perm.map_observation(&ra.observation), rb.observation);
            assert_eq!(ra.reward, rb.reward);
            assert_eq!(ra.progressed, rb.progressed);
            assert_eq!(ra.end_reason, rb.end_reason);
        }
    }
}
