//! Scenario definition: the ground-truth enterprise network, reward table,
//! goal, and the IP-reassignment variant generator.
//!
//! A scenario is loaded from a single JSON document (see
//! `scenarios/data_exfiltration.json` and the schema chapter of the guide).
//! The logical scenario is expressed entirely in terms of *roles*
//! (`db_server`, `client_3`, ...): concrete addresses only exist in an
//! [`IpAssignment`], so generating a task variant means drawing a fresh
//! role-to-address bijection while the scenario itself stays fixed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::Ipv4Addr;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::rng::Rng;

/// An IPv4 network in CIDR notation. Serialized as `"a.b.c.d/len"`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cidr {
    pub base: Ipv4Addr,
    pub prefix_len: u8,
}

impl Cidr {
    pub fn new(base: Ipv4Addr, prefix_len: u8) -> Self {
        let mask = Self::mask(prefix_len);
        Cidr {
            base: Ipv4Addr::from(u32::from(base) & mask),
            prefix_len,
        }
    }

    fn mask(prefix_len: u8) -> u32 {
        if prefix_len == 0 {
            0
        } else {
            u32::MAX << (32 - prefix_len as u32)
        }
    }

    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        u32::from(ip) & Self::mask(self.prefix_len) == u32::from(self.base)
    }
}

impl fmt::Display for Cidr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.base, self.prefix_len)
    }
}

impl fmt::Debug for Cidr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl FromStr for Cidr {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (addr, len) = s
            .split_once('/')
            .ok_or_else(|| format!("invalid CIDR {s:?}: missing '/'"))?;
        let base: Ipv4Addr = addr
            .parse()
            .map_err(|e| format!("invalid CIDR {s:?}: {e}"))?;
        let prefix_len: u8 = len
            .parse()
            .map_err(|e| format!("invalid CIDR {s:?}: {e}"))?;
        if prefix_len > 32 {
            return Err(format!("invalid CIDR {s:?}: prefix length > 32"));
        }
        Ok(Cidr::new(base, prefix_len))
    }
}

impl Serialize for Cidr {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Cidr {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which kind of network a host or prefix belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkRole {
    Client,
    Server,
    Internet,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub role: NetworkRole,
    /// Canonical prefix; variant generation replaces it for non-internet
    /// networks and keeps internet prefixes fixed.
    pub prefix: Cidr,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub name: String,
    pub port: u16,
    pub exploitable: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSpec {
    pub owner: String,
    pub id: String,
    #[serde(default)]
    pub is_goal: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostSpec {
    /// Stable symbolic name, unique within the scenario.
    pub role_id: String,
    pub network_role: NetworkRole,
    /// Routers are infrastructure: excluded from host counts, never
    /// revealed by scans, and unreachable by firewall policy.
    #[serde(default)]
    pub is_router: bool,
    #[serde(default)]
    pub services: Vec<ServiceSpec>,
    #[serde(default)]
    pub data: Vec<DataSpec>,
}

/// One endpoint set of a firewall rule.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointSet {
    Network(String),
    Host(String),
    Any,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FirewallRule {
    pub src: EndpointSet,
    pub dst: EndpointSet,
    pub allow: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardTable {
    pub success: f64,
    pub step: f64,
    pub fail: f64,
    /// Parsed for config parity; never emitted without a defender.
    pub false_positive: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalSpec {
    /// Identifier of the data item that must be exfiltrated.
    pub data_id: String,
    /// Role id of the exfiltration destination (the C&C host).
    pub destination: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub hosts: Vec<HostSpec>,
    pub networks: Vec<NetworkSpec>,
    pub firewall_rules: Vec<FirewallRule>,
    pub rewards: RewardTable,
    pub goal: GoalSpec,
    /// Role ids eligible as the randomly assigned starting foothold.
    pub start_pool: BTreeSet<String>,
    pub max_steps: u32,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("failed to read scenario file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse scenario JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("scenario invariant violated: {0}")]
    Invariant(String),
}

/// Canonical scenario shape: counts fixed by the exfiltration scenario.
pub const HOST_COUNT: usize = 11;
pub const NETWORK_COUNT: usize = 4;
pub const SERVICE_COUNT: usize = 13;
pub const DATA_COUNT: usize = 5;
pub const BLOCKABLE_PAIR_COUNT: usize = 20;

impl ScenarioConfig {
    /// Hosts that count toward the scenario size (everything but routers).
    pub fn game_hosts(&self) -> impl Iterator<Item = &HostSpec> {
        self.hosts.iter().filter(|h| !h.is_router)
    }

    pub fn host(&self, role_id: &str) -> Option<&HostSpec> {
        self.hosts.iter().find(|h| h.role_id == role_id)
    }

    /// Network a host belongs to: the first declared network whose role
    /// matches the host's `network_role`.
    pub fn network_of(&self, host: &HostSpec) -> Option<&NetworkSpec> {
        self.networks.iter().find(|n| n.role == host.network_role)
    }

    /// Non-local service instances: services on internal (client/server)
    /// hosts. Listeners on internet hosts are not counted.
    pub fn internal_service_count(&self) -> usize {
        self.game_hosts()
            .filter(|h| h.network_role != NetworkRole::Internet)
            .map(|h| h.services.len())
            .sum()
    }

    pub fn data_count(&self) -> usize {
        self.game_hosts().map(|h| h.data.len()).sum()
    }

    /// Role-level reachability: may `src` open a connection to `dst`?
    ///
    /// Self-access is always permitted, routers are never reachable (and
    /// never act), traffic inside one network is unfiltered, and everything
    /// else is decided by the firewall rules, first match wins, default deny.
    pub fn reachable_roles(&self, src: &str, dst: &str) -> Result<bool, ScenarioError> {
        let src_host = self
            .host(src)
            .ok_or_else(|| ScenarioError::Invariant(format!("unknown host role {src:?}")))?;
        let dst_host = self
            .host(dst)
            .ok_or_else(|| ScenarioError::Invariant(format!("unknown host role {dst:?}")))?;
        if src_host.is_router || dst_host.is_router {
            return Ok(false);
        }
        if src == dst {
            return Ok(true);
        }
        let src_net = self
            .network_of(src_host)
            .ok_or_else(|| ScenarioError::Invariant(format!("host {src:?} has no network")))?;
        let dst_net = self
            .network_of(dst_host)
            .ok_or_else(|| ScenarioError::Invariant(format!("host {dst:?} has no network")))?;
        if src_net.name == dst_net.name {
            return Ok(true);
        }
        for rule in &self.firewall_rules {
            let src_match = match &rule.src {
                EndpointSet::Any => true,
                EndpointSet::Network(n) => *n == src_net.name,
                EndpointSet::Host(h) => *h == src,
            };
            let dst_match = match &rule.dst {
                EndpointSet::Any => true,
                EndpointSet::Network(n) => *n == dst_net.name,
                EndpointSet::Host(h) => *h == dst,
            };
            if src_match && dst_match {
                return Ok(rule.allow);
            }
        }
        Ok(false)
    }

    /// Host pairs whose traffic crosses the router firewall and is explicitly
    /// allowed, i.e. the flows a defender could block: every client-network
    /// host paired with each cross-network destination it may reach.
    pub fn blockable_pairs(&self) -> Vec<(String, String)> {
        let mut pairs = Vec::new();
        for src in self.game_hosts() {
            if src.network_role != NetworkRole::Client {
                continue;
            }
            for dst in self.game_hosts() {
                if src.role_id == dst.role_id || dst.network_role == NetworkRole::Client {
                    continue;
                }
                if self
                    .reachable_roles(&src.role_id, &dst.role_id)
                    .unwrap_or(false)
                {
                    pairs.push((src.role_id.clone(), dst.role_id.clone()));
                }
            }
        }
        pairs
    }

    /// Validate all scenario invariants, canonical counts included.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let inv = |msg: String| Err(ScenarioError::Invariant(msg));

        let mut seen = BTreeSet::new();
        for host in &self.hosts {
            if !seen.insert(host.role_id.as_str()) {
                return inv(format!("duplicate role_id {:?}", host.role_id));
            }
        }
        let game_hosts = self.game_hosts().count();
        if game_hosts != HOST_COUNT {
            return inv(format!(
                "host count mismatch: expected {HOST_COUNT} non-router hosts, found {game_hosts}"
            ));
        }
        if self.networks.len() != NETWORK_COUNT {
            return inv(format!(
                "network count mismatch: expected {NETWORK_COUNT}, found {}",
                self.networks.len()
            ));
        }
        let mut net_names = BTreeSet::new();
        for net in &self.networks {
            if !net_names.insert(net.name.as_str()) {
                return inv(format!("duplicate network name {:?}", net.name));
            }
        }
        for host in &self.hosts {
            if self.network_of(host).is_none() {
                return inv(format!(
                    "host {:?} has network_role {:?} but no network with that role exists",
                    host.role_id, host.network_role
                ));
            }
        }
        let svc = self.internal_service_count();
        if svc != SERVICE_COUNT {
            return inv(format!(
                "service count mismatch: expected {SERVICE_COUNT} non-local services, found {svc}"
            ));
        }
        for host in self.game_hosts() {
            if host.network_role == NetworkRole::Internet && host.services.len() > 1 {
                return inv(format!(
                    "internet host {:?} may only run the C&C listener",
                    host.role_id
                ));
            }
        }
        let data = self.data_count();
        if data != DATA_COUNT {
            return inv(format!(
                "data count mismatch: expected {DATA_COUNT} data items, found {data}"
            ));
        }
        let blockable = self.blockable_pairs().len();
        if blockable != BLOCKABLE_PAIR_COUNT {
            return inv(format!(
                "blockable pair count mismatch: expected {BLOCKABLE_PAIR_COUNT}, found {blockable}"
            ));
        }
        if !(self.rewards.success > 0.0 && self.rewards.step < 0.0) {
            return inv("reward table must satisfy success > 0 > step".into());
        }
        if self.start_pool.is_empty() {
            return inv("start_pool is empty".into());
        }
        for role in &self.start_pool {
            let host = self
                .host(role)
                .ok_or_else(|| ScenarioError::Invariant(format!("start_pool host {role:?} does not exist")))?;
            if host.network_role != NetworkRole::Client || host.is_router {
                return inv(format!("start_pool host {role:?} is not a client host"));
            }
        }
        let dest = self.host(&self.goal.destination).ok_or_else(|| {
            ScenarioError::Invariant(format!(
                "goal destination {:?} does not exist",
                self.goal.destination
            ))
        })?;
        if dest.network_role != NetworkRole::Internet {
            return inv(format!(
                "goal destination {:?} must be an internet host",
                self.goal.destination
            ));
        }
        let goal_holders: Vec<&HostSpec> = self
            .game_hosts()
            .filter(|h| h.data.iter().any(|d| d.id == self.goal.data_id))
            .collect();
        if goal_holders.len() != 1 || goal_holders[0].network_role != NetworkRole::Server {
            return inv(format!(
                "goal data {:?} must reside on exactly one server host",
                self.goal.data_id
            ));
        }
        for host in self.game_hosts() {
            for d in &host.data {
                if d.is_goal != (d.id == self.goal.data_id) {
                    return inv(format!(
                        "data item {:?} on {:?} has inconsistent is_goal flag",
                        d.id, host.role_id
                    ));
                }
            }
        }
        if self.max_steps == 0 {
            return inv("max_steps must be positive".into());
        }
        Ok(())
    }
}

/// Load and validate a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioConfig, ScenarioError> {
    let text = std::fs::read_to_string(path)?;
    let config: ScenarioConfig = serde_json::from_str(&text)?;
    config.validate()?;
    Ok(config)
}

/// The canonical data-exfiltration scenario, embedded so library users and
/// tests do not depend on the working directory.
pub const CANONICAL_SCENARIO_JSON: &str =
    include_str!("../../../scenarios/data_exfiltration.json");

/// Parse and validate the embedded canonical scenario.
pub fn canonical_scenario() -> ScenarioConfig {
    let config: ScenarioConfig =
        serde_json::from_str(CANONICAL_SCENARIO_JSON).expect("embedded scenario parses");
    config.validate().expect("embedded scenario is valid");
    config
}

/// A concrete role-to-address assignment: one task variant.
///
/// Exported as JSON `{variant_id, prefixes, host_ips}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IpAssignment {
    pub variant_id: u64,
    /// Network name to assigned prefix.
    #[serde(rename = "prefixes")]
    pub network_prefixes: BTreeMap<String, Cidr>,
    /// Host role id to assigned address.
    pub host_ips: BTreeMap<String, Ipv4Addr>,
}

impl IpAssignment {
    pub fn ip_of(&self, role_id: &str) -> Option<Ipv4Addr> {
        self.host_ips.get(role_id).copied()
    }

    pub fn role_of(&self, ip: Ipv4Addr) -> Option<&str> {
        self.host_ips
            .iter()
            .find(|(_, &addr)| addr == ip)
            .map(|(role, _)| role.as_str())
    }

    pub fn prefix_of(&self, network_name: &str) -> Option<Cidr> {
        self.network_prefixes.get(network_name).copied()
    }

    /// Name of the network whose assigned prefix contains `ip`.
    pub fn network_containing(&self, ip: Ipv4Addr) -> Option<&str> {
        self.network_prefixes
            .iter()
            .find(|(_, cidr)| cidr.contains(ip))
            .map(|(name, _)| name.as_str())
    }

    pub fn validate(&self, config: &ScenarioConfig) -> Result<(), ScenarioError> {
        let mut used = BTreeSet::new();
        for host in &config.hosts {
            let ip = self.ip_of(&host.role_id).ok_or_else(|| {
                ScenarioError::Invariant(format!("host {:?} has no assigned IP", host.role_id))
            })?;
            if !used.insert(ip) {
                return Err(ScenarioError::Invariant(format!(
                    "duplicate IP {ip} in assignment"
                )));
            }
            let net = config.network_of(host).unwrap();
            let prefix = self.prefix_of(&net.name).ok_or_else(|| {
                ScenarioError::Invariant(format!("network {:?} has no assigned prefix", net.name))
            })?;
            if !prefix.contains(ip) {
                return Err(ScenarioError::Invariant(format!(
                    "host {:?} IP {ip} outside its network prefix {prefix}",
                    host.role_id
                )));
            }
        }
        Ok(())
    }
}

/// Draw a fresh /24 prefix from the private pools, avoiding `taken`.
fn draw_private_prefix(rng: &mut Rng, taken: &BTreeSet<Cidr>) -> Cidr {
    loop {
        let candidate = match rng.gen_range(3) {
            0 => Cidr::new(
                Ipv4Addr::new(10, rng.gen_range(256) as u8, rng.gen_range(256) as u8, 0),
                24,
            ),
            1 => Cidr::new(
                Ipv4Addr::new(
                    172,
                    16 + rng.gen_range(16) as u8,
                    rng.gen_range(256) as u8,
                    0,
                ),
                24,
            ),
            _ => Cidr::new(Ipv4Addr::new(192, 168, rng.gen_range(256) as u8, 0), 24),
        };
        if !taken.contains(&candidate) {
            return candidate;
        }
    }
}

/// Generate a deterministic IP assignment for `(config, seed)`.
///
/// Non-internet networks get fresh private /24 prefixes; internet prefixes
/// stay as declared. Routers take the `.1` gateway address; all other hosts
/// draw distinct octets in `2..=254`. The result is bijective by
/// construction and is validated before being returned.
pub fn generate_variant(config: &ScenarioConfig, seed: u64) -> IpAssignment {
    let mut rng = Rng::from_stream(seed, "variant", &[]);
    let mut network_prefixes = BTreeMap::new();
    let mut taken: BTreeSet<Cidr> = config
        .networks
        .iter()
        .filter(|n| n.role == NetworkRole::Internet)
        .map(|n| n.prefix)
        .collect();
    for net in &config.networks {
        let prefix = if net.role == NetworkRole::Internet {
            net.prefix
        } else {
            let p = draw_private_prefix(&mut rng, &taken);
            taken.insert(p);
            p
        };
        network_prefixes.insert(net.name.clone(), prefix);
    }

    let mut host_ips = BTreeMap::new();
    let mut used_octets: BTreeMap<String, BTreeSet<u8>> = BTreeMap::new();
    for host in &config.hosts {
        let net = config.network_of(host).expect("validated config");
        let prefix = network_prefixes[&net.name];
        let used = used_octets.entry(net.name.clone()).or_default();
        let octet = if host.is_router {
            1
        } else {
            loop {
                let o = 2 + rng.gen_range(253) as u8;
                if !used.contains(&o) {
                    break o;
                }
            }
        };
        used.insert(octet);
        let base = u32::from(prefix.base);
        host_ips.insert(host.role_id.clone(), Ipv4Addr::from(base | octet as u32));
    }

    let assignment = IpAssignment {
        variant_id: seed,
        network_prefixes,
        host_ips,
    };
    assignment.validate(config).expect("generated assignment is valid");
    assignment
}

/// Size of the full parameterized action catalogue:
/// `N*M + 2*N^2 + N*S + N^2*D` for `N` hosts, `M` networks, `S` service
/// instances and `D` data items.
pub fn catalogue_size(hosts: u64, networks: u64, services: u64, data: u64) -> u128 {
    let n = hosts as u128;
    let m = networks as u128;
    let s = services as u128;
    let d = data as u128;
    n * m + 2 * n * n + n * s + n * n * d
}

/// Approximate environment state-space size as an exact integer:
/// `3^H * 2^(N_svc + N_data + N_net + N_block)`.
pub fn state_space_size(hosts: u32, services: u32, data: u32, networks: u32, blocks: u32) -> u128 {
    let exp = services + data + networks + blocks;
    3u128
        .checked_pow(hosts)
        .and_then(|a| 2u128.checked_pow(exp).and_then(|b| a.checked_mul(b)))
        .expect("state-space size overflows u128")
}
