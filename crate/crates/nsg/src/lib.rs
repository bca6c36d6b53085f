//! A deterministic network-security game: an attacker discovers an
//! enterprise network through parameterized actions and tries to exfiltrate
//! a target data item, while the logical scenario stays fixed and only host
//! and subnet addresses change between task variants.
//!
//! The crate bundles the simulator, a suite of attacker agents (random,
//! scripted oracle, DQN variants, an embedding-based DDQN baseline, a
//! concept-abstraction Q-learner, and MAML/Reptile meta-learners), and the
//! evaluation machinery that measures how policies transfer to an unseen
//! address reassignment: aggregate metrics, per-step behavioral signatures,
//! and reproducible experiment orchestration.
//!
//! Start with the guide in `book/` for a narrative tour; the `nsg` binary
//! exposes the full pipeline (`gen-variants`, `train`, `eval`, `analyze`,
//! `oracle-check`).
//!
//! ```
//! use nsg::scenario::{canonical_scenario, generate_variant};
//! use nsg::engine::GameHandle;
//! use std::sync::Arc;
//!
//! let config = Arc::new(canonical_scenario());
//! let assignment = Arc::new(generate_variant(&config, 7));
//! let (game, observation) = GameHandle::reset(config, assignment, 1);
//! assert_eq!(observation.controlled_hosts.len(), 2);
//! assert!(game.ended().is_none());
//! ```

pub mod agents;
pub mod analysis;
pub mod concepts;
pub mod engine;
pub mod experiment;
pub mod features;
pub mod meta;
pub mod nn;
pub mod rng;
pub mod scenario;
pub mod value;

// Book chapters double as doc-tests so the guide never drifts from the API.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            #[allow(dead_code)]
            struct $name;
        };
    }

    chapter!(Scenario, "../../../book/src/scenario.md");
    chapter!(Engine, "../../../book/src/engine.md");
    chapter!(Features, "../../../book/src/features.md");
    chapter!(Concepts, "../../../book/src/concepts.md");
    chapter!(ValueLearning, "../../../book/src/value_learning.md");
    chapter!(MetaLearning, "../../../book/src/meta_learning.md");
    chapter!(Analysis, "../../../book/src/analysis.md");
}
