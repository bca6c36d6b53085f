//! Scratch harness for desk-scale calibration runs. Not part of the
//! deliverable surface; used to size acceptance budgets.

use std::sync::Arc;
use std::time::Instant;

use nsg::agents::RandomAgent;
use nsg::analysis::compute_metrics;
use nsg::concepts::{train_conceptual, ConceptualAgent, ConceptualConfig};
use nsg::experiment::{evaluate, run_episodes, AgentKind};
use nsg::meta::{meta_train, test_time_adapt_and_eval, MetaConfig, MetaKind, TaskSpec};
use nsg::rng::derive_seed;
use nsg::scenario::{canonical_scenario, generate_variant};
use nsg::value::{train_dqn, DqnConfig};

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "random".into());
    let scenario = Arc::new(canonical_scenario());
    let seeds = [101u64, 102, 103, 104, 105, 106];
    let assignments: Vec<_> = seeds
        .iter()
        .map(|&s| Arc::new(generate_variant(&scenario, s)))
        .collect();

    match which.as_str() {
        "random" => {
            let t = Instant::now();
            let traces = run_episodes(
                || Box::new(RandomAgent) as _,
                &scenario,
                &assignments[5],
                1000,
                42,
                2,
            )
            .unwrap();
            let m = compute_metrics(&traces).unwrap();
            println!(
                "random 1000 eps: win {:.2}% return {:.1} steps {:.1} ({:?})",
                m.win_rate,
                m.return_mean,
                m.steps_mean,
                t.elapsed()
            );
        }
        "conceptual" => {
            let t = Instant::now();
            let cfg = ConceptualConfig::default();
            let (q, curve, episodes) =
                train_conceptual(&scenario, &assignments[..5], &cfg, 11);
            println!(
                "conceptual trained: {} episodes, {} states, {:?}",
                episodes,
                q.states(),
                t.elapsed()
            );
            let recent: Vec<_> = curve.iter().rev().take(200).collect();
            let recent_wr =
                recent.iter().filter(|r| r.win).count() as f64 / recent.len().max(1) as f64;
            println!("train-tail win rate {:.2}", recent_wr);
            for (label, variant) in [("seen", 0usize), ("unseen", 5)] {
                let q = q.clone();
                let traces = run_episodes(
                    move || Box::new(ConceptualAgent::new(q.clone())) as _,
                    &scenario,
                    &assignments[variant],
                    500,
                    derive_seed(5, "probe", &[variant as u64]),
                    2,
                )
                .unwrap();
                let m = compute_metrics(&traces).unwrap();
                println!(
                    "conceptual {label}: win {:.2}% return {:.1} steps {:.1}",
                    m.win_rate, m.return_mean, m.steps_mean
                );
            }
        }
        "dqntime" => {
            let mut cfg = DqnConfig::default();
            if let Some(ue) = std::env::args().nth(2) {
                cfg.update_every = ue.parse().unwrap();
            }
            if let Some(ts) = std::env::args().nth(3) {
                cfg.target_sync_steps = ts.parse().unwrap();
            }
            for episodes in [100usize, 300] {
                let t = Instant::now();
                let (_, curve) = train_dqn(&scenario, &assignments[..1], episodes, &cfg, 1);
                let steps: usize = curve.iter().map(|r| r.steps).sum();
                println!(
                    "dqn {episodes} episodes ({steps} steps): {:?} ({:.1} us/step)",
                    t.elapsed(),
                    t.elapsed().as_micros() as f64 / steps as f64
                );
            }
        }
        "dqndiag" => {
            let cfg = DqnConfig::default();
            let (net, curve) = train_dqn(&scenario, &assignments[..1], 1000, &cfg, 1);
            for window in [0..100usize, 400..500, 900..1000] {
                let rows = &curve[window.clone()];
                let wr = 100.0 * rows.iter().filter(|r| r.win).count() as f64 / rows.len() as f64;
                let loss: f64 = rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
                let steps: f64 = rows.iter().map(|r| r.steps as f64).sum::<f64>() / rows.len() as f64;
                println!("episodes {window:?}: wr {wr:.1}% loss {loss:.2} steps {steps:.1}");
            }
            // Q magnitude on a fresh observation
            use nsg::engine::GameHandle;
            use nsg::features::MatrixBuilder;
            let (game, obs) = GameHandle::reset(scenario.clone(), assignments[0].clone(), 77);
            drop(game);
            let matrix = MatrixBuilder::new().build(&obs, 11);
            for row in matrix.rows.iter().take(6) {
                let q = net.forward(&row.features.vector);
                println!("{:?} q={:?}", row.action.kind, q.iter().map(|v| (v*10.0).round()/10.0).collect::<Vec<_>>());
            }
            // frozen evaluation of the diag net on seen and unseen variants
            for (label, variant) in [("same", 0usize), ("unseen", 5)] {
                let ckpt = serde_json::json!({"agent": "dqn_dual", "data": {"dual_buffer": true, "net": net.clone()}});
                let traces = evaluate(
                    AgentKind::DqnDual, &scenario, &assignments[variant], Some(&ckpt),
                    &serde_json::Value::Null, 500, false, derive_seed(9, "diag-eval", &[variant as u64]), 2,
                ).unwrap();
                let m = compute_metrics(&traces).unwrap();
                println!("diag eval {label}: win {:.1}% return {:.1} steps {:.1}", m.win_rate, m.return_mean, m.steps_mean);
            }
            // greedy trajectory dump from one start
            let (mut game, _) = GameHandle::reset_with_start(scenario.clone(), assignments[0].clone(), "client_1");
            let mut agent = nsg::value::DqnAgent::new(net, 11);
            let mut rng = nsg::rng::Rng::new(3);
            use nsg::agents::Agent;
            agent.episode_start(game.observation());
            for step in 0..24 {
                if game.ended().is_some() { break; }
                let valid = game.valid_actions();
                let action = agent.select(game.observation(), &valid, &mut rng).unwrap();
                let r = game.step(&action).unwrap();
                println!("step {step}: {action} r={} prog={}", r.reward, r.progressed);
            }
        }
        "dqn" => {
            let seeds: Vec<u64> = std::env::args()
                .nth(2)
                .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
                .unwrap_or_else(|| vec![1, 2, 3]);
            let sync: usize = std::env::args().nth(3).map_or(500, |s| s.parse().unwrap());
            for seed in seeds {
                let t = Instant::now();
                let cfg = DqnConfig {
                    target_sync_steps: sync,
                    ..DqnConfig::default()
                };
                // Configuration #2: one topology, evaluate on it
                let (net2, curve2) =
                    train_dqn(&scenario, &assignments[..1], 1000, &cfg, seed);
                let tail: Vec<_> = curve2.iter().rev().take(200).collect();
                let train_wr =
                    100.0 * tail.iter().filter(|r| r.win).count() as f64 / tail.len() as f64;
                let ckpt2 = serde_json::json!({"agent": "dqn_dual", "data": {"dual_buffer": true, "net": net2}});
                let same = evaluate(
                    AgentKind::DqnDual,
                    &scenario,
                    &assignments[0],
                    Some(&ckpt2),
                    &serde_json::Value::Null,
                    500,
                    false,
                    derive_seed(seed, "cfg2-eval", &[]),
                    2,
                )
                .unwrap();
                let m_same = compute_metrics(&same).unwrap();

                // Configuration #1: five topologies, evaluate on the sixth
                let (net1, _) = train_dqn(&scenario, &assignments[..5], 1000, &cfg, seed);
                let ckpt1 = serde_json::json!({"agent": "dqn_dual", "data": {"dual_buffer": true, "net": net1}});
                let unseen = evaluate(
                    AgentKind::DqnDual,
                    &scenario,
                    &assignments[5],
                    Some(&ckpt1),
                    &serde_json::Value::Null,
                    500,
                    false,
                    derive_seed(seed, "cfg1-eval", &[]),
                    2,
                )
                .unwrap();
                let m_unseen = compute_metrics(&unseen).unwrap();
                println!(
                    "dqn seed {seed}: train-tail {train_wr:.1}% | cfg2 same {:.1}% | cfg1 unseen {:.1}% | gap {:.1} | {:?}",
                    m_same.win_rate,
                    m_unseen.win_rate,
                    m_same.win_rate - m_unseen.win_rate,
                    t.elapsed()
                );
            }
        }
        "metadiag" => {
            use nsg::features::FEATURE_DIM;
            use nsg::nn::{Gradients, Mlp};
            use nsg::value::ACTION_HEADS;
            let mut rng = nsg::rng::Rng::new(5);
            let net = Mlp::new(&[FEATURE_DIM, 64, 64, ACTION_HEADS], &mut rng);
            let task = TaskSpec {
                assignment: assignments[0].clone(),
                base_seed: 77,
                randomize_start: true,
            };
            let t = Instant::now();
            let eval_wr = |net: &Mlp, tag: u64| -> (f64, f64) {
                let hosts = scenario.game_hosts().count();
                let n = net.clone();
                let traces = run_episodes(
                    move || Box::new(nsg::meta::PolicyAgent::new(n.clone(), hosts)) as _,
                    &scenario, &assignments[0], 60, derive_seed(tag, "metadiag", &[]), 2,
                ).unwrap();
                let m = compute_metrics(&traces).unwrap();
                (m.win_rate, m.steps_mean)
            };
            let (wr0, steps0) = eval_wr(&net, 1);
            println!("pre-adapt: wr {wr0:.1}% steps {steps0:.1} ({:?})", t.elapsed());
            let mut current = net.clone();
            for step in 0..6 {
                let adapted = nsg::meta::inner_adapt(&current, &scenario, &task, 10, 1, 0.01, 0.99, step);
                let mut delta = 0.0f64;
                for i in 0..adapted.param_len() {
                    let d = adapted.get_param(i) - current.get_param(i);
                    delta += d * d;
                }
                current = adapted;
                let (wr, steps) = eval_wr(&current, 100 + step);
                println!(
                    "after step {step}: wr {wr:.1}% steps {steps:.1} delta-norm {:.3} ({:?})",
                    delta.sqrt(),
                    t.elapsed()
                );
            }
            let _ = Gradients::zeros(&net);
        }
        "meta" => {
            let mut cfg = MetaConfig {
                epochs: 50,
                eval_every: 0,
                ..MetaConfig::default()
            };
            cfg.test_query = 350;
            for seed in [1u64, 2, 3] {
                let tasks: Vec<TaskSpec> = assignments[..5]
                    .iter()
                    .enumerate()
                    .map(|(i, a)| TaskSpec {
                        assignment: a.clone(),
                        base_seed: derive_seed(seed, "task", &[i as u64]),
                        randomize_start: true,
                    })
                    .collect();
                let unseen_task = TaskSpec {
                    assignment: assignments[5].clone(),
                    base_seed: derive_seed(seed, "unseen-task", &[]),
                    randomize_start: true,
                };
                for kind in [MetaKind::Maml, MetaKind::Reptile] {
                    let t = Instant::now();
                    let (net, _) =
                        meta_train(kind, &scenario, &tasks, None, &cfg, seed).unwrap();
                    let (_, adapted_traces) = test_time_adapt_and_eval(
                        &net,
                        &scenario,
                        &unseen_task,
                        &cfg,
                        true,
                        derive_seed(seed, "probe-eval", &[]),
                    );
                    let (_, frozen_traces) = test_time_adapt_and_eval(
                        &net,
                        &scenario,
                        &unseen_task,
                        &cfg,
                        false,
                        derive_seed(seed, "probe-eval", &[]),
                    );
                    let ma = compute_metrics(&adapted_traces).unwrap();
                    let mf = compute_metrics(&frozen_traces).unwrap();
                    println!(
                        "{kind:?} seed {seed}: adapted {:.1}% frozen {:.1}% ({:?})",
                        ma.win_rate,
                        mf.win_rate,
                        t.elapsed()
                    );
                }
            }
        }
        other => eprintln!("unknown probe {other}"),
    }
}
