//! Address-invariant abstraction for the conceptual agent: hosts and
//! networks are renamed to role-like labels, actions are chosen at the
//! concept level and grounded back to concrete addresses, and a tabular
//! Q-learner runs entirely on the abstracted state with an engineered
//! dense reward.
//!
//! The abstraction is many-to-one (all uncontrolled internal hosts with the
//! same discovered service surface share one label) while grounding is
//! one-to-many (a compatible concrete host is drawn uniformly at random).

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::agents::{Agent, AgentError};
use crate::engine::{
    valid_actions, Action, ActionKind, ActionTarget, DataRef, EndReason, GameHandle, Observation,
    ServiceRef,
};
use crate::rng::{derive_seed, Rng};
use crate::scenario::{Cidr, IpAssignment, ScenarioConfig};

/// RFC1918 private space marks a host or prefix as internal; everything
/// else (the fixed internet range included) is external.
pub fn is_private(ip: Ipv4Addr) -> bool {
    let o = ip.octets();
    o[0] == 10 || (o[0] == 172 && (16..=31).contains(&o[1])) || (o[0] == 192 && o[1] == 168)
}

/// Address-free host label: `external_k`, `host_k` (internal controlled) or
/// `unknown_k` (internal uncontrolled), refined with sorted `p<port>/TCP`
/// tags once services are discovered.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HostConcept(pub String);

/// Address-free network label: `net_k_<n>hosts` for internal prefixes with
/// `n` currently known member hosts, `external_net_k` otherwise.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NetworkConcept(pub String);

pub fn host_concept(obs: &Observation, ip: Ipv4Addr) -> HostConcept {
    if !is_private(ip) {
        return HostConcept("external_k".into());
    }
    let base = if obs.controlled_hosts.contains(&ip) {
        "host_k"
    } else {
        "unknown_k"
    };
    let mut label = String::from(base);
    if let Some(services) = obs.known_services.get(&ip) {
        let mut tags: Vec<(u16, &str)> = services.iter().map(|s| (s.port, &*s.name)).collect();
        tags.sort();
        tags.dedup();
        for (port, _) in tags {
            label.push_str(&format!("_p{port}/TCP"));
        }
    }
    HostConcept(label)
}

pub fn network_concept(obs: &Observation, net: Cidr) -> NetworkConcept {
    if !is_private(net.base) {
        return NetworkConcept("external_net_k".into());
    }
    let members = obs.known_hosts.iter().filter(|h| net.contains(**h)).count();
    NetworkConcept(format!("net_k_{members}hosts"))
}

/// Concept analogue of the six observation components.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptState {
    pub controlled: BTreeSet<HostConcept>,
    pub known: BTreeSet<HostConcept>,
    pub services: BTreeMap<HostConcept, BTreeSet<ServiceRef>>,
    pub data: BTreeMap<HostConcept, BTreeSet<DataRef>>,
    pub networks: BTreeSet<NetworkConcept>,
    pub blocks: BTreeSet<(HostConcept, HostConcept)>,
}

impl ConceptState {
    /// Canonical string form, the Q-table key.
    pub fn digest(&self) -> String {
        let mut out = String::with_capacity(256);
        out.push_str("C:");
        for c in &self.controlled {
            out.push_str(&c.0);
            out.push(',');
        }
        out.push_str("|K:");
        for c in &self.known {
            out.push_str(&c.0);
            out.push(',');
        }
        out.push_str("|S:");
        for (c, services) in &self.services {
            out.push_str(&c.0);
            out.push('{');
            for s in services {
                out.push_str(&format!("{}:{};", s.name, s.port));
            }
            out.push('}');
        }
        out.push_str("|D:");
        for (c, items) in &self.data {
            out.push_str(&c.0);
            out.push('{');
            for d in items {
                out.push_str(&format!("{}:{};", d.owner, d.id));
            }
            out.push('}');
        }
        out.push_str("|N:");
        for n in &self.networks {
            out.push_str(&n.0);
            out.push(',');
        }
        out.push_str("|B:");
        for (a, b) in &self.blocks {
            out.push_str(&format!("{}>{};", a.0, b.0));
        }
        out
    }
}

/// Abstract a concrete observation into its concept state.
pub fn abstract_state(obs: &Observation) -> ConceptState {
    let mut cs = ConceptState::default();
    for &ip in &obs.known_hosts {
        cs.known.insert(host_concept(obs, ip));
    }
    for &ip in &obs.controlled_hosts {
        cs.controlled.insert(host_concept(obs, ip));
    }
    for (&ip, services) in &obs.known_services {
        if services.is_empty() {
            continue;
        }
        cs.services
            .entry(host_concept(obs, ip))
            .or_default()
            .extend(services.iter().cloned());
    }
    for (&ip, items) in &obs.known_data {
        if items.is_empty() {
            continue;
        }
        cs.data
            .entry(host_concept(obs, ip))
            .or_default()
            .extend(items.iter().cloned());
    }
    for &net in &obs.known_networks {
        cs.networks.insert(network_concept(obs, net));
    }
    for &(a, b) in &obs.known_blocks {
        cs.blocks.insert((host_concept(obs, a), host_concept(obs, b)));
    }
    cs
}

/// Concept-level action target.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConceptTarget {
    Host(HostConcept),
    Network(NetworkConcept),
}

/// A fully concept-typed action.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConceptAction {
    pub kind: ActionKind,
    pub source: HostConcept,
    pub target: ConceptTarget,
    pub service: Option<ServiceRef>,
    pub data: Option<DataRef>,
}

impl ConceptAction {
    /// Canonical string form, the per-state Q-table key.
    pub fn key(&self) -> String {
        let target = match &self.target {
            ConceptTarget::Host(h) => h.0.clone(),
            ConceptTarget::Network(n) => n.0.clone(),
        };
        let mut out = format!("{}|{}|{}", self.kind, self.source.0, target);
        if let Some(s) = &self.service {
            out.push_str(&format!("|svc:{}:{}", s.name, s.port));
        }
        if let Some(d) = &self.data {
            out.push_str(&format!("|data:{}:{}", d.owner, d.id));
        }
        out
    }

    /// The repeat-filter signature: (source, target, type).
    pub fn triple(&self) -> (ActionKind, HostConcept, ConceptTarget) {
        (self.kind, self.source.clone(), self.target.clone())
    }
}

/// Concept image of a concrete action under the current observation.
pub fn abstract_action(obs: &Observation, action: &Action) -> ConceptAction {
    let target = match action.target {
        ActionTarget::Host(ip) => ConceptTarget::Host(host_concept(obs, ip)),
        ActionTarget::Network(net) => ConceptTarget::Network(network_concept(obs, net)),
    };
    ConceptAction {
        kind: action.kind,
        source: host_concept(obs, action.source_host),
        target,
        service: action.service.clone(),
        data: action.data.clone(),
    }
}

/// Ground a concept action into a concrete one: the source is drawn from
/// controlled hosts matching the source concept, the target from hosts or
/// networks matching the target concept (uniformly among compatibles), and
/// service/data payloads pass through unchanged.
pub fn ground_action(
    ca: &ConceptAction,
    obs: &Observation,
    rng: &mut Rng,
) -> Result<Action, AgentError> {
    let sources: Vec<Ipv4Addr> = obs
        .controlled_hosts
        .iter()
        .copied()
        .filter(|&ip| host_concept(obs, ip) == ca.source)
        .collect();
    let source = *sources
        .get(if sources.is_empty() { 0 } else { rng.gen_range(sources.len()) })
        .ok_or_else(|| AgentError::Grounding(ca.source.0.clone()))?;

    match (&ca.target, ca.kind) {
        (ConceptTarget::Network(nc), ActionKind::ScanNetwork) => {
            let nets: Vec<Cidr> = obs
                .known_networks
                .iter()
                .copied()
                .filter(|&n| network_concept(obs, n) == *nc)
                .collect();
            if nets.is_empty() {
                return Err(AgentError::Grounding(nc.0.clone()));
            }
            let net = nets[rng.gen_range(nets.len())];
            Ok(Action::scan_network(source, net))
        }
        (ConceptTarget::Host(hc), kind) => {
            // Exfiltration targets must be controlled; every other kind
            // grounds among known hosts. Control status is already encoded
            // in the label (host_k vs unknown_k), so label matching keeps
            // the concept's own class either way.
            let pool: Vec<Ipv4Addr> = match kind {
                ActionKind::ExfiltrateData => obs
                    .controlled_hosts
                    .iter()
                    .copied()
                    .filter(|&ip| host_concept(obs, ip) == *hc)
                    .collect(),
                _ => obs
                    .known_hosts
                    .iter()
                    .copied()
                    .filter(|&ip| host_concept(obs, ip) == *hc)
                    .collect(),
            };
            if pool.is_empty() {
                return Err(AgentError::Grounding(hc.0.clone()));
            }
            let target = pool[rng.gen_range(pool.len())];
            match kind {
                ActionKind::FindServices => Ok(Action::find_services(source, target)),
                ActionKind::FindData => Ok(Action::find_data(source, target)),
                ActionKind::ExploitService => Ok(Action::exploit_service(
                    source,
                    target,
                    ca.service
                        .clone()
                        .ok_or_else(|| AgentError::Grounding("missing service".into()))?,
                )),
                ActionKind::ExfiltrateData => {
                    // The exfiltration source is the data holder itself.
                    let data = ca
                        .data
                        .clone()
                        .ok_or_else(|| AgentError::Grounding("missing data".into()))?;
                    let holders: Vec<Ipv4Addr> = obs
                        .controlled_hosts
                        .iter()
                        .copied()
                        .filter(|&ip| {
                            host_concept(obs, ip) == ca.source
                                && obs.known_data.get(&ip).is_some_and(|set| set.contains(&data))
                        })
                        .collect();
                    if holders.is_empty() {
                        return Err(AgentError::Grounding(ca.source.0.clone()));
                    }
                    let holder = holders[rng.gen_range(holders.len())];
                    Ok(Action::exfiltrate_data(holder, target, data))
                }
                ActionKind::ScanNetwork => Err(AgentError::Grounding(
                    "scan requires a network target".into(),
                )),
            }
        }
        (ConceptTarget::Network(nc), _) => Err(AgentError::Grounding(nc.0.clone())),
    }
}

fn is_external(concept: &HostConcept) -> bool {
    concept.0.starts_with("external")
}

/// Generate the concept-level candidate set and apply the pruning filters:
/// internal-only targets (exfiltration exempt) and firewall-aware; no
/// repeated (source, target, type); service discovery only where services
/// are unknown; no exploits on controlled/self targets; data search only on
/// controlled hosts without known data; exfiltrate only data new at a
/// different controlled destination.
pub fn filter_concept_actions(
    cs: &ConceptState,
    history: &BTreeSet<(ActionKind, HostConcept, ConceptTarget)>,
) -> Vec<ConceptAction> {
    let mut out = Vec::new();
    let mut push = |ca: ConceptAction| {
        if cs.blocks.contains(&(
            ca.source.clone(),
            match &ca.target {
                ConceptTarget::Host(h) => h.clone(),
                ConceptTarget::Network(_) => ca.source.clone(),
            },
        )) {
            return; // traverses a known blocked link
        }
        if history.contains(&ca.triple()) {
            return; // no repeats of the same concept-action
        }
        out.push(ca);
    };

    for src in &cs.controlled {
        // ScanNetwork: internal networks only.
        for net in &cs.networks {
            if net.0.starts_with("external") {
                continue;
            }
            push(ConceptAction {
                kind: ActionKind::ScanNetwork,
                source: src.clone(),
                target: ConceptTarget::Network(net.clone()),
                service: None,
                data: None,
            });
        }
        // FindServices: internal hosts whose services are still unknown.
        for tgt in &cs.known {
            if is_external(tgt) || cs.services.contains_key(tgt) {
                continue;
            }
            push(ConceptAction {
                kind: ActionKind::FindServices,
                source: src.clone(),
                target: ConceptTarget::Host(tgt.clone()),
                service: None,
                data: None,
            });
        }
        // ExploitService: only uncontrolled internal targets, never self.
        for (tgt, services) in &cs.services {
            if is_external(tgt) || cs.controlled.contains(tgt) || tgt == src {
                continue;
            }
            for service in services {
                push(ConceptAction {
                    kind: ActionKind::ExploitService,
                    source: src.clone(),
                    target: ConceptTarget::Host(tgt.clone()),
                    service: Some(service.clone()),
                    data: None,
                });
            }
        }
        // FindData: controlled internal hosts without known data.
        for tgt in &cs.controlled {
            if is_external(tgt) || cs.data.contains_key(tgt) {
                continue;
            }
            push(ConceptAction {
                kind: ActionKind::FindData,
                source: src.clone(),
                target: ConceptTarget::Host(tgt.clone()),
                service: None,
                data: None,
            });
        }
    }
    // ExfiltrateData: move data the destination does not already hold to a
    // different controlled host (the external C&C included).
    for (holder, items) in &cs.data {
        if !cs.controlled.contains(holder) {
            continue;
        }
        for data in items {
            for tgt in &cs.controlled {
                if tgt == holder {
                    continue; // no self-exfiltration
                }
                if cs.data.get(tgt).is_some_and(|set| set.contains(data)) {
                    continue; // already delivered
                }
                push(ConceptAction {
                    kind: ActionKind::ExfiltrateData,
                    source: holder.clone(),
                    target: ConceptTarget::Host(tgt.clone()),
                    service: None,
                    data: Some(data.clone()),
                });
            }
        }
    }
    out.sort();
    out.dedup();
    out
}

/// Engineered reward for the conceptual learner: terminal detection -1000,
/// terminal success +1000, timeout -100; otherwise -100 for a step that
/// left the state unchanged and -1 for one that made progress. The raw
/// environment reward is accepted for interface parity but overwritten.
pub fn recompute_reward(
    _env_reward: f64,
    end_reason: Option<EndReason>,
    state_changed: bool,
) -> f64 {
    match end_reason {
        Some(EndReason::Fail) => -1000.0,
        Some(EndReason::Success) => 1000.0,
        Some(EndReason::Timeout) => -100.0,
        None => {
            if state_changed {
                -1.0
            } else {
                -100.0
            }
        }
    }
}

/// Q-table over (concept-state digest, concept-action key), serialized with
/// deterministic key order.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct QTable {
    pub values: BTreeMap<String, BTreeMap<String, f64>>,
}

impl QTable {
    pub fn get(&self, state: &str, action: &str) -> f64 {
        self.values
            .get(state)
            .and_then(|row| row.get(action))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn max_over(&self, state: &str, actions: &[ConceptAction]) -> f64 {
        actions
            .iter()
            .map(|a| self.get(state, &a.key()))
            .fold(0.0f64, f64::max)
    }

    pub fn update(&mut self, state: &str, action: &str, alpha: f64, target: f64) {
        let entry = self
            .values
            .entry(state.to_string())
            .or_default()
            .entry(action.to_string())
            .or_insert(0.0);
        *entry += alpha * (target - *entry);
    }

    pub fn states(&self) -> usize {
        self.values.len()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ConceptualConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of the per-variant episode cap over which epsilon decays.
    pub eps_decay_fraction: f64,
    /// Hard cap on training episodes per variant.
    pub episodes_per_variant: usize,
    /// Frozen-evaluation cadence (episodes) for the early-stop check.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Early-stop once the frozen evaluation win rate reaches this level.
    pub stop_threshold: f64,
}

impl Default for ConceptualConfig {
    fn default() -> Self {
        ConceptualConfig {
            alpha: 0.1,
            gamma: 0.9,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay_fraction: 0.5,
            episodes_per_variant: 40_000,
            eval_interval: 1_000,
            eval_episodes: 200,
            stop_threshold: 0.95,
        }
    }
}

#[derive(Serialize, Deserialize)]
pub struct ConceptualCheckpoint {
    pub q: QTable,
}

/// Select a concept action epsilon-greedily and ground it; falls back to
/// the unfiltered concept images of the engine's valid actions when the
/// filtered set is empty or ungroundable.
fn select_and_ground(
    q: &QTable,
    obs: &Observation,
    cs: &ConceptState,
    digest: &str,
    history: &BTreeSet<(ActionKind, HostConcept, ConceptTarget)>,
    eps: f64,
    rng: &mut Rng,
) -> (ConceptAction, Action) {
    let mut candidates = filter_concept_actions(cs, history);
    loop {
        if candidates.is_empty() {
            // fallback: concept images of all valid actions, always groundable
            let valid = valid_actions(obs);
            let mut images: Vec<ConceptAction> =
                valid.iter().map(|a| abstract_action(obs, a)).collect();
            images.sort();
            images.dedup();
            candidates = images;
        }
        let choice = if eps > 0.0 && rng.gen_bool(eps) {
            rng.gen_range(candidates.len())
        } else {
            let mut best = 0;
            let mut best_q = f64::NEG_INFINITY;
            for (i, ca) in candidates.iter().enumerate() {
                let v = q.get(digest, &ca.key());
                if v > best_q {
                    best_q = v;
                    best = i;
                }
            }
            best
        };
        let ca = candidates[choice].clone();
        match ground_action(&ca, obs, rng) {
            Ok(action) => return (ca, action),
            Err(_) => {
                candidates.remove(choice);
                // exhausted candidates re-enter through the fallback branch
            }
        }
    }
}

/// Train tabular Q-learning on concept states, sequentially across the
/// given variants with per-variant early stopping; returns the Q-table, the
/// per-episode curve, and the total number of training episodes consumed.
pub fn train_conceptual(
    scenario: &Arc<ScenarioConfig>,
    assignments: &[Arc<IpAssignment>],
    cfg: &ConceptualConfig,
    master_seed: u64,
) -> (QTable, Vec<crate::value::CurveRow>, usize) {
    let mut q = QTable::default();
    let mut curve = Vec::new();
    let mut total_episodes = 0usize;

    for (variant_index, assignment) in assignments.iter().enumerate() {
        let decay_span = (cfg.episodes_per_variant as f64 * cfg.eps_decay_fraction).max(1.0);
        for episode in 0..cfg.episodes_per_variant {
            let eps = {
                let t = (episode as f64 / decay_span).min(1.0);
                cfg.eps_start + (cfg.eps_end - cfg.eps_start) * t
            };
            let episode_seed = derive_seed(
                master_seed,
                "conceptual-train",
                &[variant_index as u64, episode as u64],
            );
            let mut rng = Rng::from_stream(episode_seed, "conceptual-policy", &[]);
            let (mut game, _) =
                GameHandle::reset(scenario.clone(), assignment.clone(), episode_seed);
            let mut history = BTreeSet::new();

            let mut cs = abstract_state(game.observation());
            let mut digest = cs.digest();
            while game.ended().is_none() {
                let (ca, action) =
                    select_and_ground(&q, game.observation(), &cs, &digest, &history, eps, &mut rng);
                let result = game.step(&action).expect("episode still running");
                history.insert(ca.triple());
                let reward = recompute_reward(result.reward, result.end_reason, result.progressed);
                let next_cs = abstract_state(&result.observation);
                let next_digest = next_cs.digest();
                let bootstrap = if result.ended {
                    0.0
                } else {
                    let next_candidates = filter_concept_actions(&next_cs, &history);
                    q.max_over(&next_digest, &next_candidates)
                };
                q.update(
                    &digest,
                    &ca.key(),
                    cfg.alpha,
                    reward + cfg.gamma * bootstrap,
                );
                cs = next_cs;
                digest = next_digest;
            }

            curve.push(crate::value::CurveRow {
                episode: total_episodes,
                variant: variant_index,
                win: game.trace().won(),
                ret: game.trace().total_return(),
                steps: game.trace().steps(),
                loss: 0.0,
            });
            total_episodes += 1;

            // periodic frozen evaluation for the early-stop rule
            if (episode + 1) % cfg.eval_interval == 0 {
                let wins = (0..cfg.eval_episodes)
                    .filter(|&e| {
                        let seed = derive_seed(
                            master_seed,
                            "conceptual-earlystop",
                            &[variant_index as u64, episode as u64, e as u64],
                        );
                        let mut agent = ConceptualAgent::new(q.clone());
                        crate::experiment::run_episode(&mut agent, scenario, assignment, seed)
                            .map(|t| t.won())
                            .unwrap_or(false)
                    })
                    .count();
                let rate = wins as f64 / cfg.eval_episodes.max(1) as f64;
                if rate >= cfg.stop_threshold {
                    break;
                }
            }
        }
    }

    (q, curve, total_episodes)
}

/// Frozen greedy policy over the learned Q-table.
pub struct ConceptualAgent {
    q: QTable,
    history: BTreeSet<(ActionKind, HostConcept, ConceptTarget)>,
}

impl ConceptualAgent {
    pub fn new(q: QTable) -> Self {
        ConceptualAgent {
            q,
            history: BTreeSet::new(),
        }
    }
}

impl Agent for ConceptualAgent {
    fn select(
        &mut self,
        obs: &Observation,
        _valid: &[Action],
        rng: &mut Rng,
    ) -> Result<Action, AgentError> {
        let cs = abstract_state(obs);
        let digest = cs.digest();
        let (ca, action) =
            select_and_ground(&self.q, obs, &cs, &digest, &self.history, 0.0, rng);
        self.history.insert(ca.triple());
        Ok(action)
    }

    fn episode_start(&mut self, _obs: &Observation) {
        self.history.clear();
    }
}
