//! Command-line entry point: variant generation, agent training, frozen
//! evaluation, trace analysis, and the oracle solvability check.
//!
//! All subcommands read an experiment configuration file (see
//! `configs/experiment.json`) and derive every
//! random stream from its master seed, so reruns produce byte-identical
//! artifacts under `out/<experiment>/{variants,checkpoints,traces,metrics,figures}`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use nsg::agents::{Agent, OracleAgent};
use nsg::analysis::{
    comparison_csv, compute_metrics, compute_signature, export_signature_plot, ComparisonRow,
};
use nsg::engine::{traces_from_jsonl, traces_to_jsonl};
use nsg::experiment::{curve_csv, evaluate, train, AgentKind, ExperimentConfig};
use nsg::rng::derive_seed;
use nsg::scenario::IpAssignment;

#[derive(Parser)]
#[command(
    name = "nsg",
    about = "Deterministic network-security game: variants, training, evaluation, analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the configuration's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured agent.
    #[arg(long)]
    agent: Option<AgentKind>,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum AdaptFlag {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the six IP-assignment variant files.
    GenVariants(Common),
    /// Train the configured agent on the five training variants.
    Train {
        #[command(flatten)]
        common: Common,
        /// Override training episodes per variant.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Evaluate a frozen policy (meta agents adapt first unless --adapt off).
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint produced by `train` (omit for random/oracle).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Which variant to evaluate on: 0..=5, or "seen" (0) / "unseen" (5).
        #[arg(long, default_value = "unseen")]
        variant: String,
        /// Override evaluation episode count.
        #[arg(long)]
        episodes: Option<usize>,
        /// Test-time adaptation for meta agents.
        #[arg(long, value_enum, default_value = "on")]
        adapt: AdaptFlag,
        /// Label for the emitted trace/metric files.
        #[arg(long)]
        label: Option<String>,
    },
    /// Compute signatures and the consolidated comparison table from traces.
    Analyze {
        /// Trace files (.jsonl) or directories containing them.
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        /// Output directory for figures and the comparison table.
        #[arg(long, default_value = "out/analysis")]
        out: PathBuf,
    },
    /// Verify that the scripted oracle wins every variant in five steps.
    OracleCheck(Common),
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenVariants(common) => gen_variants(&load(&common)?),
        Command::Train { common, episodes } => cmd_train(&load(&common)?, episodes),
        Command::Eval {
            common,
            checkpoint,
            variant,
            episodes,
            adapt,
            label,
        } => cmd_eval(
            &load(&common)?,
            checkpoint.as_deref(),
            &variant,
            episodes,
            adapt == AdaptFlag::On,
            label,
        ),
        Command::Analyze { traces, out } => cmd_analyze(&traces, &out),
        Command::OracleCheck(common) => oracle_check(&load(&common)?),
    }
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&common.config)
        .with_context(|| format!("loading {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        config.master_seed = seed;
    }
    if let Some(agent) = common.agent {
        config.agent = agent;
    }
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    Ok(config)
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn gen_variants(config: &ExperimentConfig) -> Result<()> {
    let scenario = config.load_scenario()?;
    let dir = config.out_dir.join("variants");
    ensure_dir(&dir)?;
    for (i, assignment) in config.assignments(&scenario).iter().enumerate() {
        let path = dir.join(format!("variant_{i}.json"));
        let mut json = serde_json::to_string_pretty(assignment.as_ref())?;
        json.push('\n');
        fs::write(&path, json)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_train(config: &ExperimentConfig, episodes: Option<usize>) -> Result<()> {
    let scenario = config.load_scenario()?;
    let assignments = config.assignments(&scenario);
    let train_set = &assignments[..5];
    let episodes = episodes.unwrap_or(config.train_episodes_per_variant);
    let started = std::time::Instant::now();
    let output = train(
        config.agent,
        &scenario,
        train_set,
        episodes,
        &config.agent_params,
        config.master_seed,
    )?;
    let ckpt_dir = config.out_dir.join("checkpoints");
    let metrics_dir = config.out_dir.join("metrics");
    ensure_dir(&ckpt_dir)?;
    ensure_dir(&metrics_dir)?;
    let ckpt_path = ckpt_dir.join(format!("{}.json", config.agent));
    fs::write(&ckpt_path, serde_json::to_string(&output.checkpoint)?)?;
    let curve_path = metrics_dir.join(format!("{}_train_curve.csv", config.agent));
    fs::write(&curve_path, curve_csv(&output.curve))?;
    println!(
        "trained {} on {} variants x {} episodes in {:.1?}",
        config.agent,
        train_set.len(),
        episodes,
        started.elapsed()
    );
    println!("checkpoint: {}", ckpt_path.display());
    println!("curve: {}", curve_path.display());
    Ok(())
}

fn parse_variant(spec: &str) -> Result<usize> {
    match spec {
        "seen" => Ok(0),
        "unseen" => Ok(5),
        other => {
            let idx: usize = other.parse().with_context(|| {
                format!("variant must be 0..=5, 'seen' or 'unseen', got {other:?}")
            })?;
            if idx > 5 {
                bail!("variant index {idx} out of range 0..=5");
            }
            Ok(idx)
        }
    }
}

fn cmd_eval(
    config: &ExperimentConfig,
    checkpoint: Option<&Path>,
    variant: &str,
    episodes: Option<usize>,
    adapt: bool,
    label: Option<String>,
) -> Result<()> {
    let scenario = config.load_scenario()?;
    let assignments = config.assignments(&scenario);
    let variant_index = parse_variant(variant)?;
    let assignment = &assignments[variant_index];
    let episodes = episodes.unwrap_or(config.eval_episodes);

    let checkpoint_value = match checkpoint {
        Some(path) => Some(serde_json::from_str(
            &fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        )?),
        None => None,
    };
    let eval_seed = derive_seed(config.master_seed, "eval", &[variant_index as u64]);
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let traces = evaluate(
        config.agent,
        &scenario,
        assignment,
        checkpoint_value.as_ref(),
        &config.agent_params,
        episodes,
        adapt,
        eval_seed,
        threads,
    )?;

    let label = label.unwrap_or_else(|| format!("{}_variant{}", config.agent, variant_index));
    let traces_dir = config.out_dir.join("traces");
    let metrics_dir = config.out_dir.join("metrics");
    ensure_dir(&traces_dir)?;
    ensure_dir(&metrics_dir)?;
    let trace_path = traces_dir.join(format!("{label}.jsonl"));
    fs::write(&trace_path, traces_to_jsonl(&traces))?;
    let metrics = compute_metrics(&traces)?;
    let metrics_path = metrics_dir.join(format!("{label}.json"));
    let mut metrics_json = serde_json::to_string_pretty(&metrics)?;
    metrics_json.push('\n');
    fs::write(&metrics_path, metrics_json)?;
    println!(
        "{label}: win rate {:.1}% | return {:.2} | steps {:.1} over {} episodes",
        metrics.win_rate, metrics.return_mean, metrics.steps_mean, metrics.episodes
    );
    println!("traces: {}", trace_path.display());
    println!("metrics: {}", metrics_path.display());
    Ok(())
}

fn collect_trace_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found = Vec::new();
            for entry in fs::read_dir(input)? {
                let path = entry?.path();
                if path.extension().is_some_and(|e| e == "jsonl") {
                    found.push(path);
                }
            }
            if found.is_empty() {
                bail!("no .jsonl traces in {}", input.display());
            }
            found.sort();
            files.extend(found);
        } else if input.exists() {
            files.push(input.clone());
        } else {
            bail!("trace input {} does not exist", input.display());
        }
    }
    Ok(files)
}

fn cmd_analyze(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let files = collect_trace_files(inputs)?;
    let figures = out.join("figures");
    ensure_dir(&figures)?;
    let mut rows = Vec::new();
    for file in &files {
        let text = fs::read_to_string(file)?;
        let traces = traces_from_jsonl(&text)?;
        if traces.is_empty() {
            bail!("{} holds no complete episodes", file.display());
        }
        let label = file
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("traces")
            .to_string();
        let metrics = compute_metrics(&traces)?;
        let signature = compute_signature(&traces)?;
        let svg_path = figures.join(format!("{label}_signature.svg"));
        export_signature_plot(&signature, &label, &svg_path)?;
        println!(
            "{label}: {} episodes, win rate {:.1}%, signature -> {}",
            metrics.episodes,
            metrics.win_rate,
            svg_path.display()
        );
        rows.push(ComparisonRow::from((label.as_str(), &metrics)));
    }
    let table_path = out.join("comparison.csv");
    fs::write(&table_path, comparison_csv(&rows))?;
    println!("comparison table: {}", table_path.display());
    Ok(())
}

fn oracle_check(config: &ExperimentConfig) -> Result<()> {
    let scenario = config.load_scenario()?;
    let mut failures = 0;
    for (i, assignment) in config.assignments(&scenario).iter().enumerate() {
        let trace = run_oracle_once(&scenario, assignment, config.master_seed, i as u64)?;
        let ok = trace.won() && trace.steps() == 5 && trace.total_return() == 95.0;
        println!(
            "variant {i}: {} in {} steps, return {}",
            if trace.won() { "win" } else { "loss" },
            trace.steps(),
            trace.total_return()
        );
        if !ok {
            failures += 1;
        }
    }
    if failures > 0 {
        bail!("{failures} variant(s) failed the oracle check");
    }
    println!("oracle check passed: 6/6 variants solvable in 5 steps with return 95");
    Ok(())
}

fn run_oracle_once(
    scenario: &Arc<nsg::scenario::ScenarioConfig>,
    assignment: &Arc<IpAssignment>,
    master_seed: u64,
    variant: u64,
) -> Result<nsg::engine::EpisodeTrace> {
    let mut agent: Box<dyn Agent> =
        Box::new(OracleAgent::new(scenario.clone(), assignment.clone()));
    let seed = derive_seed(master_seed, "oracle-check", &[variant]);
    Ok(nsg::experiment::run_episode(
        agent.as_mut(),
        scenario,
        assignment,
        seed,
    )?)
}
