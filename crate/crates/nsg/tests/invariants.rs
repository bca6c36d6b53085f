//! Property tests for the structural invariants of the game and its
//! abstractions: catalogue counting against brute force on small
//! configurations, observation monotonicity, reward arithmetic, and
//! permutation invariance of the concept abstraction.

use std::net::Ipv4Addr;
use std::sync::Arc;

use proptest::prelude::*;

use nsg::agents::{Agent, RandomAgent};
use nsg::concepts::abstract_state;
use nsg::engine::{EndReason, GameHandle, IpPermutation};
use nsg::rng::Rng;
use nsg::scenario::{
    canonical_scenario, catalogue_size, generate_variant, DataSpec, EndpointSet, FirewallRule,
    GoalSpec, HostSpec, NetworkRole, NetworkSpec, RewardTable, ScenarioConfig, ServiceSpec,
};

/// Build a tiny ad-hoc configuration (bypasses canonical-count validation).
fn small_config(hosts: usize, services_per_host: usize, data_items: usize) -> ScenarioConfig {
    let mut host_specs = Vec::new();
    for i in 0..hosts {
        let services = (0..services_per_host)
            .map(|s| ServiceSpec {
                name: format!("svc{s}"),
                port: 1000 + s as u16,
                exploitable: true,
            })
            .collect();
        let data = if i == 0 {
            (0..data_items)
                .map(|d| DataSpec {
                    owner: "owner".into(),
                    id: format!("item{d}"),
                    is_goal: d == 0,
                })
                .collect()
        } else {
            Vec::new()
        };
        host_specs.push(HostSpec {
            role_id: format!("host_{i}"),
            network_role: NetworkRole::Client,
            is_router: false,
            services,
            data,
        });
    }
    ScenarioConfig {
        hosts: host_specs,
        networks: vec![NetworkSpec {
            name: "net0".into(),
            role: NetworkRole::Client,
            prefix: "10.0.0.0/24".parse().unwrap(),
        }],
        firewall_rules: vec![FirewallRule {
            src: EndpointSet::Any,
            dst: EndpointSet::Any,
            allow: true,
        }],
        rewards: RewardTable {
            success: 100.0,
            step: -1.0,
            fail: -10.0,
            false_positive: -5.0,
        },
        goal: GoalSpec {
            data_id: "item0".into(),
            destination: "host_0".into(),
        },
        start_pool: std::iter::once("host_0".to_string()).collect(),
        max_steps: 100,
    }
}

/// Brute force the catalogue by direct enumeration of (type, arguments).
fn brute_force_catalogue(config: &ScenarioConfig) -> usize {
    let hosts: Vec<&HostSpec> = config.game_hosts().collect();
    let n = hosts.len();
    let networks = config.networks.len();
    let mut count = 0;
    count += n * networks; // ScanNetwork
    count += n * n; // FindServices
    count += n * n; // FindData
    for host in &hosts {
        count += n * host.services.len(); // ExploitService per instance
    }
    let data: usize = hosts.iter().map(|h| h.data.len()).sum();
    count += n * n * data; // ExfiltrateData
    count
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn catalogue_formula_matches_enumeration(
        hosts in 1usize..=4,
        services in 0usize..=3,
        data in 0usize..=2,
    ) {
        let config = small_config(hosts, services, data);
        let formula = catalogue_size(
            hosts as u64,
            config.networks.len() as u64,
            (hosts * services) as u64,
            data as u64,
        );
        prop_assert_eq!(formula, brute_force_catalogue(&config) as u128);
    }

    #[test]
    fn winning_return_arithmetic(seed in 0u64..500) {
        // Random play until the horizon; verifies
        // return = success - steps - |fail| * failures for winners and
        // return = -steps - |fail| * failures for timeouts.
        let config = Arc::new(canonical_scenario());
        let assignment = Arc::new(generate_variant(&config, seed % 7));
        let (mut game, _) = GameHandle::reset(config.clone(), assignment, seed);
        let mut rng = Rng::new(seed ^ 0xF00D);
        let mut failures = 0u32;
        while game.ended().is_none() {
            let valid = game.valid_actions();
            let action = valid[rng.gen_range(valid.len())].clone();
            let before = game.observation().clone();
            let result = game.step(&action).unwrap();
            if !result.progressed
                && result.observation == before
                && result.reward <= config.rewards.step + config.rewards.fail
            {
                failures += 1;
            }
        }
        let trace = game.trace();
        let steps = trace.steps() as f64;
        let expected = match trace.end_reason() {
            Some(EndReason::Success) => 100.0 - steps - 10.0 * failures as f64,
            _ => -steps - 10.0 * failures as f64,
        };
        prop_assert_eq!(trace.total_return(), expected);
    }

    #[test]
    fn knowledge_is_monotone_and_invariants_hold(seed in 0u64..300) {
        let config = Arc::new(canonical_scenario());
        let assignment = Arc::new(generate_variant(&config, 1 + seed % 5));
        let (mut game, mut prev) = GameHandle::reset(config, assignment, seed);
        let mut agent = RandomAgent;
        let mut rng = Rng::new(seed);
        for _ in 0..40 {
            if game.ended().is_some() {
                break;
            }
            let valid = game.valid_actions();
            let action = agent.select(game.observation(), &valid, &mut rng).unwrap();
            let result = game.step(&action).unwrap();
            let obs = result.observation;
            prop_assert!(prev.known_hosts.is_subset(&obs.known_hosts));
            prop_assert!(prev.controlled_hosts.is_subset(&obs.controlled_hosts));
            prop_assert!(prev.known_networks.is_subset(&obs.known_networks));
            prop_assert!(obs.check_invariants().is_ok());
            prev = obs;
        }
    }

    #[test]
    fn abstraction_invariant_under_reassignment(seed in 0u64..200, perm_seed in 1000u64..1100) {
        let config = Arc::new(canonical_scenario());
        let a = Arc::new(generate_variant(&config, seed % 11));
        let b = Arc::new(generate_variant(&config, perm_seed));
        let perm = IpPermutation::between(&a, &b);
        let (mut game, _) = GameHandle::reset(config, a, seed);
        let mut rng = Rng::new(seed);
        for _ in 0..30 {
            if game.ended().is_some() {
                break;
            }
            let obs = game.observation();
            prop_assert_eq!(abstract_state(obs), abstract_state(&perm.map_observation(obs)));
            let valid = game.valid_actions();
            let action = valid[rng.gen_range(valid.len())].clone();
            game.step(&action).unwrap();
        }
    }
}

#[test]
fn variant_generation_round_trips_roles() {
    let config = canonical_scenario();
    for seed in 0..50 {
        let assignment = generate_variant(&config, seed);
        for host in &config.hosts {
            let ip: Ipv4Addr = assignment.ip_of(&host.role_id).unwrap();
            assert_eq!(assignment.role_of(ip), Some(host.role_id.as_str()));
        }
    }
}
