//! Command line front end for the training and evaluation harness: training
//! runs, evaluation matrices, MI table dumps, redundancy probes, ablation
//! grids, and the built-in selfcheck diagnostics.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ibal_core::attackers::sample_partition;
use ibal_core::envs::{EnvSpec, ForageSpec};
use ibal_core::harness::{
    ablation_configs, load_checkpoint, load_config, mi_dump, redundancy_probe, run_eval,
    run_training, selfcheck, ExperimentConfig, SelfcheckReport,
};
use ibal_core::rng::stream;
use ibal_core::train::TrainState;
use ibal_core::{AblationVariant, EvalReport, GroupPartition};

/// Probe episodes behind `mi-dump` and `redundancy`.
const PROBE_EPISODES: usize = 32;

/// Optimizer steps the redundancy probe spends on its group model.
const REDUNDANCY_TRAIN_STEPS: usize = 200;

#[derive(Parser)]
#[command(
    name = "ibal",
    version,
    about = "Interaction-breaking adversarial training for cooperative multi-agent policies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy; writes config.json, metrics.csv, and checkpoint.bin.
    Train(Common),
    /// Evaluate a checkpoint over the attack and perturbation matrix.
    Eval(Common),
    /// Dump MI tables before and after masking for a sampled partition.
    MiDump(Common),
    /// Compare a group's joint MI against its summed per-agent scores.
    Redundancy(Common),
    /// Train the base config plus every leg of an ablation variant.
    Ablate(AblateArgs),
    /// Run the gradient, schedule, and equivalence diagnostics.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Seed override: the training seed for `train` and `ablate`, the
    /// single evaluation seed for `eval`, the probe seed otherwise.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Ablation variant as JSON, e.g. '{"kind":"no-obs-attack"}' or
    /// '{"kind":"k-sweep","values":[0,1]}'.
    #[arg(long)]
    variant: String,
}

#[derive(Args)]
struct SelfcheckArgs {
    /// Optional experiment configuration; its environment drives the
    /// equivalence probe (a small foraging grid when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the diagnostics.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for selfcheck.json (defaults to the config's output
    /// directory, or the working directory without a config).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::MiDump(args) => cmd_mi_dump(args),
        Command::Redundancy(args) => cmd_redundancy(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Selfcheck(args) => cmd_selfcheck(args),
    }
}

/// Load the experiment config and apply the output directory override.
fn experiment(common: &Common) -> Result<ExperimentConfig> {
    let mut config = load_config(&common.config)
        .with_context(|| format!("loading {}", common.config.display()))?;
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    Ok(config)
}

fn load_state(out_dir: &Path) -> Result<TrainState> {
    let path = out_dir.join("checkpoint.bin");
    load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let body = serde_json::to_string_pretty(value)?;
    fs::write(path, body + "\n").with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Draw a partition with a non-empty switched group for the probe commands.
fn probe_partition(n_agents: usize, k_max: usize, seed: u64) -> Result<GroupPartition> {
    if k_max == 0 {
        bail!("the checkpoint was trained with interaction breaking disabled (group size cap 0)");
    }
    let mut rng = stream(seed, "cli-partition", 0);
    for _ in 0..64 {
        let partition = sample_partition(n_agents, k_max, &mut rng)?;
        if !partition.is_pass_through() {
            return Ok(partition);
        }
    }
    bail!("no non-empty partition in 64 draws");
}

fn group(set: &std::collections::BTreeSet<usize>) -> String {
    let ids: Vec<String> = set.iter().map(|i| i.to_string()).collect();
    format!("{{{}}}", ids.join(", "))
}

fn cmd_train(args: Common) -> Result<()> {
    let mut config = experiment(&args)?;
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    let run = run_training(&config)?;
    println!(
        "trained {} episodes over {} environment steps into {}",
        run.state.episodes,
        run.state.env_steps,
        config.out_dir.display()
    );
    if let Some(reason) = run.aborted {
        bail!("training aborted: {reason} (diagnostic checkpoint kept)");
    }
    Ok(())
}

fn print_report(report: &EvalReport) {
    println!(
        "{:<24} {:>8} {:>8} {:>10} {:>9}",
        "cell", "success", "std", "return", "episodes"
    );
    for cell in &report.cells {
        println!(
            "{:<24} {:>7.2}% {:>8.2} {:>10.3} {:>9}",
            cell.label, cell.mean_success, cell.std_success, cell.mean_return, cell.episodes
        );
    }
}

fn cmd_eval(args: Common) -> Result<()> {
    let mut config = experiment(&args)?;
    if let Some(seed) = args.seed {
        config.eval_seeds = vec![seed];
    }
    let state = load_state(&config.out_dir)?;
    let report = run_eval(&state, &config)?;
    print_report(&report);
    write_json(&report, &config.out_dir.join("eval.json"))
}

fn cmd_mi_dump(args: Common) -> Result<()> {
    let config = experiment(&args)?;
    let state = load_state(&config.out_dir)?;
    let seed = args.seed.unwrap_or(0);
    let n = state.config.env.n_agents();
    let partition = probe_partition(n, state.config.k_max, seed)?;
    let dump = mi_dump(&state, &partition, PROBE_EPISODES, seed)?;
    println!(
        "partition {} | {} over {PROBE_EPISODES} probe episodes",
        group(&dump.partition.g1),
        group(&dump.partition.g2)
    );
    for agent in &dump.agents {
        let dims: Vec<String> = agent.selected.iter().map(|d| d.to_string()).collect();
        println!("agent {} masks dims [{}]", agent.agent, dims.join(", "));
    }
    println!(
        "mask precision {:.3} recall {:.3} against the layout truth",
        dump.precision, dump.recall
    );
    write_json(&dump, &config.out_dir.join("mi-dump.json"))
}

fn cmd_redundancy(args: Common) -> Result<()> {
    let config = experiment(&args)?;
    let state = load_state(&config.out_dir)?;
    let seed = args.seed.unwrap_or(0);
    let n = state.config.env.n_agents();
    let partition = probe_partition(n, state.config.k_max, seed)?;
    let reports = redundancy_probe(
        &state,
        &partition,
        PROBE_EPISODES,
        REDUNDANCY_TRAIN_STEPS,
        seed,
    )?;
    println!(
        "partition {} | {} over {PROBE_EPISODES} probe episodes",
        group(&partition.g1),
        group(&partition.g2)
    );
    for (observer, report) in &reports {
        println!(
            "observer {observer}: group {:.4} summed {:.4} residual {:+.4} nats",
            report.groupwise, report.summed_dim, report.residual
        );
    }
    write_json(&reports, &config.out_dir.join("redundancy.json"))
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let mut config = experiment(&args.common)?;
    if let Some(seed) = args.common.seed {
        config.train.seed = seed;
    }
    let variant: AblationVariant = serde_json::from_str(&args.variant)
        .map_err(|e| anyhow::anyhow!("unusable ablation variant: {e}"))?;
    let mut legs = vec![("base".to_string(), config.train.clone())];
    legs.extend(ablation_configs(&config.train, &variant)?);

    let mut aborted = Vec::new();
    for (label, train) in legs {
        let leg = ExperimentConfig {
            train,
            out_dir: config.out_dir.join(&label),
            ..config.clone()
        };
        let run = run_training(&leg)?;
        match run.aborted {
            None => println!(
                "{label}: {} episodes, {} environment steps",
                run.state.episodes, run.state.env_steps
            ),
            Some(reason) => {
                println!("{label}: aborted ({reason})");
                aborted.push(label);
            }
        }
    }
    if !aborted.is_empty() {
        bail!("aborted legs: {}", aborted.join(", "));
    }
    Ok(())
}

fn cmd_selfcheck(args: SelfcheckArgs) -> Result<()> {
    let config = match &args.config {
        Some(path) => Some(
            load_config(path).with_context(|| format!("loading {}", path.display()))?,
        ),
        None => None,
    };
    let spec = config
        .as_ref()
        .map(|c| c.train.env.clone())
        .unwrap_or(EnvSpec::Forage(ForageSpec::small(3)));
    let out_dir = args
        .out
        .or_else(|| config.as_ref().map(|c| c.out_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("."));

    let report = selfcheck(&spec, args.seed)?;
    let tol = SelfcheckReport::GRAD_TOLERANCE;
    let grad = |name: &str, err: f64| {
        println!(
            "{name} gradient error {err:.3e} against tolerance {tol:.0e}: {}",
            if err < tol { "ok" } else { "FAIL" }
        );
    };
    grad("agent", report.agent_grad_err);
    grad("mixer", report.mixer_grad_err);
    grad("observation model", report.obs_model_grad_err);
    grad("action model", report.action_model_grad_err);
    let flag = |name: &str, ok: bool| {
        println!("{name}: {}", if ok { "ok" } else { "FAIL" });
    };
    flag("exploration schedule", report.epsilon_schedule_ok);
    flag("firing cap update", report.firing_cap_update_ok);
    flag("firing probability draw", report.firing_draw_ok);
    flag("wrapper equivalence", report.equivalence.is_clean());

    fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    write_json(&report, &out_dir.join("selfcheck.json"))?;
    if !report.passed() {
        bail!("selfcheck failed");
    }
    println!("selfcheck passed");
    Ok(())
}
