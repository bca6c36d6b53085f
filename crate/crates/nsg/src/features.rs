//! Candidate-centric feature extraction shared by the DQN and meta-learning
//! agents: each valid action is summarized by a fixed 12-dimensional vector
//! `[source(3) | target(6) | global(3)]`, all entries in `[0, 1]`.
//!
//! Features reference structure only, never address values, so extraction
//! is invariant under IP reassignment:
//! * source: service count, member-of-known-subnet flag, degree centrality;
//! * target: progress stage, controlled flag, service count, has-data flag,
//!   blocked-from-source flag, degree;
//! * global: owned ratio, average degree, graph density.
//!
//! The discovered graph places an edge between two known hosts that share a
//! known network prefix; counts are normalized by the scenario host count
//! and degrees by the number of discovered hosts.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use crate::engine::{is_valid_action, valid_actions, Action, ActionTarget, Observation};

pub const FEATURE_DIM: usize = 12;

/// Attack-progress stages for a target host.
const STAGE_KNOWN: f64 = 0.25;
const STAGE_SERVICES: f64 = 0.5;
const STAGE_CONTROLLED: f64 = 0.75;
const STAGE_DATA: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("candidate is not a valid action for this observation")]
    InvalidCandidate,
}

/// The 12-dimensional representation of one (observation, candidate) pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CandidateFeatures {
    pub vector: [f64; FEATURE_DIM],
}

/// View of the topology discovered so far, used for degree-based features.
pub struct DiscoveredGraph {
    /// Known hosts in sorted order.
    nodes: Vec<Ipv4Addr>,
    degree: BTreeMap<Ipv4Addr, usize>,
    edges: usize,
    /// Hosts per known network, for network-target degrees.
    net_members: BTreeMap<crate::scenario::Cidr, usize>,
    /// Total number of hosts in the scenario, for count normalization.
    scenario_hosts: usize,
}

impl DiscoveredGraph {
    pub fn new(obs: &Observation, scenario_hosts: usize) -> Self {
        let nodes: Vec<Ipv4Addr> = obs.known_hosts.iter().copied().collect();
        let mut degree: BTreeMap<Ipv4Addr, usize> = nodes.iter().map(|&n| (n, 0)).collect();
        let mut net_members: BTreeMap<crate::scenario::Cidr, usize> =
            obs.known_networks.iter().map(|&n| (n, 0)).collect();
        let mut edges = 0;
        for (i, &a) in nodes.iter().enumerate() {
            let net_a = obs.known_networks.iter().copied().find(|n| n.contains(a));
            if let Some(net) = net_a {
                *net_members.get_mut(&net).unwrap() += 1;
            }
            for &b in nodes.iter().skip(i + 1) {
                let connected = match net_a {
                    Some(net) => net.contains(b),
                    None => false,
                };
                if connected {
                    edges += 1;
                    *degree.get_mut(&a).unwrap() += 1;
                    *degree.get_mut(&b).unwrap() += 1;
                }
            }
        }
        DiscoveredGraph {
            nodes,
            degree,
            edges,
            net_members,
            scenario_hosts,
        }
    }

    pub fn discovered(&self) -> usize {
        self.nodes.len()
    }

    fn norm_degree(&self, raw: usize) -> f64 {
        let denom = self.discovered().saturating_sub(1).max(1);
        raw as f64 / denom as f64
    }

    pub fn degree_of(&self, host: Ipv4Addr) -> f64 {
        self.norm_degree(self.degree.get(&host).copied().unwrap_or(0))
    }

    pub fn average_degree(&self) -> f64 {
        if self.nodes.is_empty() {
            return 0.0;
        }
        let total: usize = self.degree.values().sum();
        self.norm_degree(total) / self.nodes.len() as f64
    }

    pub fn density(&self) -> f64 {
        let n = self.discovered();
        if n < 2 {
            return 0.0;
        }
        2.0 * self.edges as f64 / (n as f64 * (n as f64 - 1.0))
    }
}

fn service_count(obs: &Observation, host: Ipv4Addr) -> usize {
    obs.known_services.get(&host).map_or(0, |s| s.len())
}

fn has_data(obs: &Observation, host: Ipv4Addr) -> bool {
    obs.known_data.get(&host).is_some_and(|d| !d.is_empty())
}

fn progress_stage(obs: &Observation, host: Ipv4Addr) -> f64 {
    if has_data(obs, host) {
        STAGE_DATA
    } else if obs.controlled_hosts.contains(&host) {
        STAGE_CONTROLLED
    } else if obs.known_services.contains_key(&host) {
        STAGE_SERVICES
    } else {
        STAGE_KNOWN
    }
}

/// Compute the 12-vector for one candidate action.
pub fn featurize(
    obs: &Observation,
    candidate: &Action,
    graph: &DiscoveredGraph,
) -> Result<CandidateFeatures, FeatureError> {
    if !is_valid_action(obs, candidate) {
        return Err(FeatureError::InvalidCandidate);
    }
    let hosts = graph.scenario_hosts.max(1) as f64;
    let src = candidate.source_host;
    let src_in_subnet = obs.known_networks.iter().any(|n| n.contains(src));

    let mut v = [0.0; FEATURE_DIM];
    v[0] = service_count(obs, src) as f64 / hosts;
    v[1] = if src_in_subnet { 1.0 } else { 0.0 };
    v[2] = graph.degree_of(src);

    match candidate.target {
        ActionTarget::Host(tgt) => {
            v[3] = progress_stage(obs, tgt);
            v[4] = if obs.controlled_hosts.contains(&tgt) {
                1.0
            } else {
                0.0
            };
            v[5] = service_count(obs, tgt) as f64 / hosts;
            v[6] = if has_data(obs, tgt) { 1.0 } else { 0.0 };
            v[7] = if obs.known_blocks.contains(&(src, tgt)) {
                1.0
            } else {
                0.0
            };
            v[8] = graph.degree_of(tgt);
        }
        ActionTarget::Network(net) => {
            // A network target is merely known; its degree is the number of
            // hosts discovered inside it.
            v[3] = STAGE_KNOWN;
            let members = graph.net_members.get(&net).copied().unwrap_or(0);
            v[8] = members as f64 / graph.discovered().saturating_sub(1).max(1) as f64;
        }
    }

    let known = obs.known_hosts.len().max(1) as f64;
    v[9] = obs.controlled_hosts.len() as f64 / known;
    v[10] = graph.average_degree();
    v[11] = graph.density();

    debug_assert!(v.iter().all(|x| (0.0..=1.0).contains(x)), "features {v:?}");
    Ok(CandidateFeatures { vector: v })
}

/// One row of the candidate matrix.
#[derive(Clone, Debug)]
pub struct CandidateRow {
    pub action: Action,
    pub features: CandidateFeatures,
}

/// The N x 12 matrix of featurized candidates, ordered like `valid_actions`.
#[derive(Clone, Debug, Default)]
pub struct CandidateMatrix {
    pub rows: Vec<CandidateRow>,
}

impl CandidateMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Builds candidate matrices while filtering redundant actions: a
/// `(type, params)` combination already executed this episode is dropped
/// for as long as its target remains in the progress stage it was executed
/// under. Once the target advances (a host becomes controlled, say), the
/// action stops being redundant and is offered again. If the filter would
/// empty the matrix, all valid actions are re-admitted so the agent never
/// deadlocks.
#[derive(Default)]
pub struct MatrixBuilder {
    executed: std::collections::BTreeSet<(Action, u8)>,
}

/// Progress stage of an action's target, bucketed for the redundancy key.
fn stage_bucket(obs: &Observation, action: &Action) -> u8 {
    match action.target {
        ActionTarget::Network(_) => 0,
        ActionTarget::Host(tgt) => (progress_stage(obs, tgt) * 4.0) as u8,
    }
}

impl MatrixBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_executed(&mut self, action: &Action, obs: &Observation) {
        self.executed.insert((action.clone(), stage_bucket(obs, action)));
    }

    pub fn reset(&mut self) {
        self.executed.clear();
    }

    pub fn build(&self, obs: &Observation, scenario_hosts: usize) -> CandidateMatrix {
        let graph = DiscoveredGraph::new(obs, scenario_hosts);
        let valid = valid_actions(obs);
        let retained: Vec<&Action> = valid
            .iter()
            .filter(|a| !self.executed.contains(&((*a).clone(), stage_bucket(obs, a))))
            .collect();
        let chosen: Vec<&Action> = if retained.is_empty() {
            valid.iter().collect()
        } else {
            retained
        };
        let rows = chosen
            .into_iter()
            .map(|action| CandidateRow {
                action: action.clone(),
                features: featurize(obs, action, &graph).expect("valid candidate"),
            })
            .collect();
        CandidateMatrix { rows }
    }
}
