use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use progrl::agent::{run_rows_to_csv, train_online, AgentConfig, Arm};
use progrl::ckpt::Checkpoint;
use progrl::demos::{compare_offset_distributions, generate_dataset, read_dataset, write_dataset};
use progrl::env::{DungeonConfig, Task};
use progrl::harness::{load_plan, plot_dir, run_pipeline, summarize_dir, HarnessError};
use progrl::oracle::{run_gradcheck_suite, run_nce_suite, run_occupancy_suite};
use progrl::pretrain::{train_encoder, PretrainConfig};
use progrl::progress::{train_progress, ProgressConfig};

#[derive(Parser)]
#[command(
    name = "progrl",
    about = "Contrastive pretraining and temporal-progress reward shaping for a grid roguelike",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate expert demonstration episodes and write them to a binary dataset file.
    GenDemos(GenDemosArgs),
    /// Pre-train the contrastive state encoder on a demonstration dataset.
    Pretrain(PretrainArgs),
    /// Train the temporal-progress reward model on a demonstration dataset.
    TrainProgress(TrainProgressArgs),
    /// Train a policy online with actor-critic, optionally warm-started and shaped.
    Train(TrainArgs),
    /// Emit a CSV comparing the two temporal-offset distributions over [1, horizon].
    AblateOffsets(AblateOffsetsArgs),
    /// Run exact tabular identity checks; exits nonzero if any check fails.
    Verify(VerifyArgs),
    /// Run or post-process a full experiment plan (a TOML grid of tasks, arms, seeds).
    Plan(PlanArgs),
}

#[derive(Args)]
struct PlanArgs {
    #[command(subcommand)]
    command: PlanCommand,
}

#[derive(Subcommand)]
enum PlanCommand {
    /// Execute every (task, arm, seed) cell of a plan file, writing
    /// demos, checkpoints, per-run CSVs, aggregates, and plots to its
    /// out_dir. Exits 2 if the plan is invalid, 1 if any run failed.
    Run {
        /// Path to the plan TOML file.
        plan: PathBuf,
    },
    /// Recompute runs.csv, summary.csv, compare.csv, and plots from a
    /// completed plan directory's per-run files.
    Summarize {
        /// A plan's out_dir (must contain plan.toml and runs/).
        dir: PathBuf,
    },
    /// Re-render only the SVG plots from a completed plan directory.
    Plot {
        /// A plan's out_dir (must contain plan.toml and runs/).
        dir: PathBuf,
    },
}

#[derive(Args)]
struct GenDemosArgs {
    /// Task the expert plays: score, scout, depthN (e.g. depth2), or oracle.
    #[arg(long)]
    task: Task,
    /// Number of episodes to generate.
    #[arg(long)]
    episodes: u32,
    /// Base RNG seed; episode i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path for the binary dataset.
    #[arg(long)]
    out: PathBuf,
    /// Dungeon width in tiles.
    #[arg(long, default_value_t = DungeonConfig::default().width)]
    width: usize,
    /// Dungeon height in tiles.
    #[arg(long, default_value_t = DungeonConfig::default().height)]
    height: usize,
    /// Number of dungeon levels.
    #[arg(long, default_value_t = DungeonConfig::default().n_levels)]
    levels: usize,
    /// Items placed per level.
    #[arg(long, default_value_t = DungeonConfig::default().n_items_per_level)]
    items: usize,
    /// Episode step horizon.
    #[arg(long, default_value_t = DungeonConfig::default().horizon)]
    horizon: usize,
}

#[derive(Args)]
struct PretrainArgs {
    /// Path to a demonstration dataset produced by gen-demos.
    #[arg(long)]
    demos: PathBuf,
    /// Output path for the encoder checkpoint (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Discount for the geometric positive-offset distribution.
    #[arg(long, default_value_t = PretrainConfig::default().gamma_c)]
    gamma: f64,
    /// Number of optimizer steps.
    #[arg(long, default_value_t = PretrainConfig::default().steps)]
    steps: usize,
    /// RNG seed for initialization and batch sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Metrics CSV path (columns: step, train_loss, train_acc, heldout_acc).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Batch size (rows of the in-batch score matrix).
    #[arg(long, default_value_t = PretrainConfig::default().batch_size)]
    batch: usize,
    /// Candidates per anchor when in-batch scoring is disabled.
    #[arg(long, default_value_t = PretrainConfig::default().candidates)]
    candidates: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = PretrainConfig::default().lr)]
    lr: f64,
    /// Fraction of episodes held out for evaluation.
    #[arg(long, default_value_t = PretrainConfig::default().eval_fraction)]
    eval_fraction: f64,
    /// Steps between metric rows.
    #[arg(long, default_value_t = PretrainConfig::default().eval_interval)]
    eval_interval: usize,
    /// Score each anchor against explicit candidates instead of the whole batch.
    #[arg(long)]
    explicit_negatives: bool,
}

#[derive(Args)]
struct TrainProgressArgs {
    /// Path to a demonstration dataset produced by gen-demos.
    #[arg(long)]
    demos: PathBuf,
    /// Output path for the progress-model checkpoint (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Number of optimizer steps.
    #[arg(long, default_value_t = ProgressConfig::default().steps)]
    steps: usize,
    /// RNG seed for initialization and batch sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Metrics CSV path (columns: step, train_loss, heldout_mse).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Pairs per batch.
    #[arg(long, default_value_t = ProgressConfig::default().batch_size)]
    batch: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = ProgressConfig::default().lr)]
    lr: f64,
    /// Fraction of episodes held out for evaluation.
    #[arg(long, default_value_t = ProgressConfig::default().eval_fraction)]
    eval_fraction: f64,
    /// Steps between metric rows.
    #[arg(long, default_value_t = ProgressConfig::default().eval_interval)]
    eval_interval: usize,
    /// Regress unsigned log distance instead of the signed target.
    #[arg(long)]
    unsigned: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Task to learn: score, scout, depthN (e.g. depth2), or oracle.
    #[arg(long)]
    task: Task,
    /// Arm: base, pretrain, ele, pretrain_ele, pm_torso_init, or pretrain_finetune.
    #[arg(long)]
    arm: Arm,
    /// Encoder checkpoint (required by pretrain, pretrain_ele, pretrain_finetune).
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// Progress-model checkpoint (required by ele, pretrain_ele, pm_torso_init).
    #[arg(long)]
    progress: Option<PathBuf>,
    /// RNG seed for initialization, action sampling, and environment layouts.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Total environment steps to train for.
    #[arg(long, default_value_t = AgentConfig::default().budget)]
    budget: usize,
    /// Shaping weight.
    #[arg(long, default_value_t = AgentConfig::default().lambda)]
    lambda: f64,
    /// Shaping offset: the bonus compares against the state k steps back.
    #[arg(long, default_value_t = AgentConfig::default().k)]
    k: usize,
    /// Metrics CSV path (columns: env_steps, eval_mean_return, eval_std_return,
    /// policy_loss, value_loss, entropy, shaped_reward_mean).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Parallel environment instances.
    #[arg(long, default_value_t = AgentConfig::default().n_envs)]
    n_envs: usize,
    /// Steps per rollout window (per environment).
    #[arg(long, default_value_t = AgentConfig::default().rollout_len)]
    rollout: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = AgentConfig::default().lr)]
    lr: f64,
    /// Environment steps between evaluations.
    #[arg(long, default_value_t = AgentConfig::default().eval_interval)]
    eval_interval: usize,
    /// Episodes per evaluation.
    #[arg(long, default_value_t = AgentConfig::default().eval_episodes)]
    eval_episodes: usize,
    /// Disable running-std normalization of shaped rewards.
    #[arg(long)]
    no_reward_norm: bool,
    /// Dungeon width in tiles.
    #[arg(long, default_value_t = DungeonConfig::default().width)]
    width: usize,
    /// Dungeon height in tiles.
    #[arg(long, default_value_t = DungeonConfig::default().height)]
    height: usize,
    /// Number of dungeon levels.
    #[arg(long, default_value_t = DungeonConfig::default().n_levels)]
    levels: usize,
    /// Items placed per level.
    #[arg(long, default_value_t = DungeonConfig::default().n_items_per_level)]
    items: usize,
    /// Episode step horizon.
    #[arg(long, default_value_t = DungeonConfig::default().horizon)]
    horizon: usize,
}

#[derive(Args)]
struct VerifyArgs {
    /// Which identity suite to run: occupancy, nce-ratio, or gradcheck.
    #[arg(long)]
    suite: Suite,
    /// RNG seed for the suite's random instances.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Suite {
    /// Bellman values vs the discounted-visitation form.
    Occupancy,
    /// Contrastive scores vs the analytic log visitation ratio.
    NceRatio,
    /// Finite-difference audits of all hand-written gradients.
    Gradcheck,
}

#[derive(Args)]
struct AblateOffsetsArgs {
    /// Discount for the geometric offset distribution.
    #[arg(long, default_value_t = 0.95)]
    gamma: f64,
    /// Largest offset (inclusive).
    #[arg(long, default_value_t = 200)]
    horizon: usize,
    /// Output CSV path (columns: offset, geometric_pmf, log_uniform_pmf).
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let done = |r: Result<()>| r.map(|()| ExitCode::SUCCESS);
    match cli.command {
        Command::GenDemos(args) => done(gen_demos(args)),
        Command::Pretrain(args) => done(pretrain(args)),
        Command::TrainProgress(args) => done(train_progress_cmd(args)),
        Command::Train(args) => done(train_cmd(args)),
        Command::AblateOffsets(args) => done(ablate_offsets(args)),
        Command::Verify(args) => done(verify_cmd(args)),
        Command::Plan(args) => plan_cmd(args),
    }
}

/// Exit code for a plan whose file cannot be used at all (distinct from
/// runs inside a valid plan failing, which is exit 1).
const EXIT_INVALID_PLAN: u8 = 2;

fn gen_demos(args: GenDemosArgs) -> Result<()> {
    let config = DungeonConfig {
        width: args.width,
        height: args.height,
        n_levels: args.levels,
        n_items_per_level: args.items,
        horizon: args.horizon,
        seed: args.seed,
    };
    let ds = generate_dataset(&config, args.task, args.episodes as usize)
        .with_context(|| format!("generating {} {} episodes", args.episodes, args.task))?;
    write_dataset(&ds, &args.out)
        .with_context(|| format!("writing dataset to {}", args.out.display()))?;
    println!(
        "wrote {} episodes ({} transitions) to {}",
        ds.n_episodes(),
        ds.n_anchors(),
        args.out.display()
    );
    Ok(())
}

fn pretrain(args: PretrainArgs) -> Result<()> {
    let ds = read_dataset(&args.demos)
        .with_context(|| format!("reading demos from {}", args.demos.display()))?;
    let cfg = PretrainConfig {
        gamma_c: args.gamma,
        batch_size: args.batch,
        candidates: args.candidates,
        steps: args.steps,
        lr: args.lr,
        eval_fraction: args.eval_fraction,
        eval_interval: args.eval_interval,
        in_batch: !args.explicit_negatives,
        ..PretrainConfig::default()
    };
    cfg.validate();
    let (params, log) = train_encoder(&ds, &cfg, args.seed)?;
    Checkpoint::from_store(&params, args.seed)
        .save(&args.out)
        .with_context(|| format!("writing checkpoint to {}", args.out.display()))?;
    if let Some(metrics) = &args.metrics {
        let mut csv = String::from("step,train_loss,train_acc,heldout_acc\n");
        for row in &log {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                row.step, row.train_loss, row.train_acc, row.heldout_acc
            ));
        }
        fs::write(metrics, csv)
            .with_context(|| format!("writing metrics to {}", metrics.display()))?;
    }
    let last = log.last().expect("training log is never empty");
    println!(
        "trained encoder for {} steps: final train_loss {:.4}, heldout_acc {:.3}; checkpoint at {}",
        args.steps,
        last.train_loss,
        last.heldout_acc,
        args.out.display()
    );
    Ok(())
}

fn train_progress_cmd(args: TrainProgressArgs) -> Result<()> {
    let ds = read_dataset(&args.demos)
        .with_context(|| format!("reading demos from {}", args.demos.display()))?;
    let cfg = ProgressConfig {
        steps: args.steps,
        batch_size: args.batch,
        lr: args.lr,
        signed: !args.unsigned,
        eval_fraction: args.eval_fraction,
        eval_interval: args.eval_interval,
        ..ProgressConfig::default()
    };
    cfg.validate();
    let (params, log) = train_progress(&ds, &cfg, args.seed)?;
    Checkpoint::from_store(&params, args.seed)
        .save(&args.out)
        .with_context(|| format!("writing checkpoint to {}", args.out.display()))?;
    if let Some(metrics) = &args.metrics {
        let mut csv = String::from("step,train_loss,heldout_mse\n");
        for row in &log {
            csv.push_str(&format!("{},{},{}\n", row.step, row.train_loss, row.heldout_mse));
        }
        fs::write(metrics, csv)
            .with_context(|| format!("writing metrics to {}", metrics.display()))?;
    }
    let last = log.last().expect("training log is never empty");
    println!(
        "trained progress model for {} steps: final train_loss {:.4}, heldout_mse {:.4}; checkpoint at {}",
        args.steps,
        last.train_loss,
        last.heldout_mse,
        args.out.display()
    );
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let config = DungeonConfig {
        width: args.width,
        height: args.height,
        n_levels: args.levels,
        n_items_per_level: args.items,
        horizon: args.horizon,
        seed: args.seed,
    };
    let cfg = AgentConfig {
        arm: args.arm,
        budget: args.budget,
        lambda: args.lambda,
        k: args.k,
        n_envs: args.n_envs,
        rollout_len: args.rollout,
        lr: args.lr,
        eval_interval: args.eval_interval,
        eval_episodes: args.eval_episodes,
        normalize_shaping: !args.no_reward_norm,
        ..AgentConfig::default()
    };
    let encoder = args
        .encoder
        .as_ref()
        .map(|p| Checkpoint::load(p).with_context(|| format!("loading encoder {}", p.display())))
        .transpose()?;
    let progress = args
        .progress
        .as_ref()
        .map(|p| Checkpoint::load(p).with_context(|| format!("loading progress {}", p.display())))
        .transpose()?;
    let out = train_online(&config, args.task, &cfg, encoder.as_ref(), progress.as_ref(), args.seed)?;
    if let Some(metrics) = &args.metrics {
        fs::write(metrics, run_rows_to_csv(&out.rows))
            .with_context(|| format!("writing metrics to {}", metrics.display()))?;
    }
    let last = out.rows.last().expect("run log is never empty");
    println!(
        "trained {} on {} for {} env steps: eval return {:.2} ± {:.2}",
        args.arm, args.task, last.env_steps, last.eval_mean_return, last.eval_std_return
    );
    Ok(())
}

fn verify_cmd(args: VerifyArgs) -> Result<()> {
    let (label, checks) = match args.suite {
        Suite::Occupancy => ("occupancy", run_occupancy_suite(args.seed)),
        Suite::NceRatio => ("nce-ratio", run_nce_suite(args.seed)),
        Suite::Gradcheck => ("gradcheck", run_gradcheck_suite(args.seed)),
    };
    let name_width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut failures = 0;
    for c in &checks {
        let status = if c.pass { "PASS" } else { "FAIL" };
        println!("{status}  {:name_width$}  {}", c.name, c.detail);
        if !c.pass {
            failures += 1;
        }
    }
    if failures > 0 {
        bail!("{failures} of {} {label} checks failed", checks.len());
    }
    println!("all {} {label} checks passed", checks.len());
    Ok(())
}

fn plan_cmd(args: PlanArgs) -> Result<ExitCode> {
    match args.command {
        PlanCommand::Run { plan: path } => {
            let (plan, source, hash) = match load_plan(&path) {
                Ok(loaded) => loaded,
                Err(err) => {
                    eprintln!("error: plan {}: {err}", path.display());
                    return Ok(ExitCode::from(EXIT_INVALID_PLAN));
                }
            };
            let report = run_pipeline(&plan, &source, &hash)
                .with_context(|| format!("running plan {}", plan.name))?;
            let n = report.records.len();
            println!(
                "plan {} complete: {} runs, {} failed; outputs in {}",
                plan.name,
                n,
                report.n_failures,
                plan.out_dir.display()
            );
            if report.n_failures > 0 {
                Ok(ExitCode::FAILURE)
            } else {
                Ok(ExitCode::SUCCESS)
            }
        }
        PlanCommand::Summarize { dir } => {
            if let Err(err) = summarize_dir(&dir) {
                return plan_dir_failure(&dir, err);
            }
            println!("rebuilt aggregates and plots in {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
        PlanCommand::Plot { dir } => {
            if let Err(err) = plot_dir(&dir) {
                return plan_dir_failure(&dir, err);
            }
            println!("rebuilt plots in {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn plan_dir_failure(dir: &std::path::Path, err: HarnessError) -> Result<ExitCode> {
    if let HarnessError::Plan(plan_err) = &err {
        eprintln!("error: plan {}: {plan_err}", dir.join("plan.toml").display());
        return Ok(ExitCode::from(EXIT_INVALID_PLAN));
    }
    Err(err.into())
}

fn ablate_offsets(args: AblateOffsetsArgs) -> Result<()> {
    if args.horizon == 0 {
        bail!("horizon must be at least 1");
    }
    let rows = compare_offset_distributions(args.gamma, args.horizon);
    let mut csv = String::from("offset,geometric_pmf,log_uniform_pmf\n");
    for (k, geo, lu) in rows {
        csv.push_str(&format!("{k},{geo},{lu}\n"));
    }
    fs::write(&args.out, csv)
        .with_context(|| format!("writing offset comparison to {}", args.out.display()))?;
    println!(
        "wrote offset pmf comparison over [1, {}] to {}",
        args.horizon,
        args.out.display()
    );
    Ok(())
}
