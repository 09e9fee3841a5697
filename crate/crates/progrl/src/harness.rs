//! Experiment orchestration: run every (task, arm, seed) cell of a plan,
//! aggregate learning curves, and emit plots.
//!
//! A plan is a TOML file naming tasks, arms, seeds, and a step budget. The
//! pipeline runs in phases: demonstrations are generated per task, the
//! encoder and progress checkpoints are trained once per task (seed 0) and
//! shared by every arm that needs them, then the online runs execute. Each
//! run writes its own metrics CSV; `runs.csv`, `summary.csv`, `compare.csv`,
//! and one SVG per task are derived from those. Every output records the
//! SHA-256 of the plan file it came from, and rerunning an identical plan
//! reproduces every output byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::agent::{train_online, AgentConfig, Arm, RunLogRow};
use crate::ckpt::{Checkpoint, CkptError};
use crate::demos::{generate_dataset, read_dataset, write_dataset, DemoDataset, DemoGenError, DemoIoError};
use crate::env::{DungeonConfig, Task};
use crate::pretrain::{train_encoder, PretrainConfig, PretrainError};
use crate::progress::{train_progress, ProgressConfig, ProgressError};
use crate::stats::{mean, median, std_dev};

// ---------------------------------------------------------------------------
// Plan loading
// ---------------------------------------------------------------------------

/// Raw plan file schema. Every key is validated; unknown keys are rejected
/// so typos fail loudly instead of silently running defaults.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    name: String,
    tasks: Vec<String>,
    arms: Vec<String>,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    budget: usize,
    out_dir: String,
    #[serde(default = "default_demo_episodes")]
    demo_episodes: usize,
    #[serde(default = "default_pretrain_steps")]
    pretrain_steps: usize,
    #[serde(default = "default_progress_steps")]
    progress_steps: usize,
    // Dungeon geometry (defaults to the standard dungeon).
    width: Option<usize>,
    height: Option<usize>,
    levels: Option<usize>,
    items: Option<usize>,
    horizon: Option<usize>,
    // Online-learning knobs (default to the agent's defaults).
    lambda: Option<f64>,
    k: Option<usize>,
    lr: Option<f64>,
    n_envs: Option<usize>,
    rollout_len: Option<usize>,
    eval_interval: Option<usize>,
    eval_episodes: Option<usize>,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

fn default_demo_episodes() -> usize {
    64
}

fn default_pretrain_steps() -> usize {
    PretrainConfig::default().steps
}

fn default_progress_steps() -> usize {
    ProgressConfig::default().steps
}

/// A validated experiment plan.
#[derive(Clone, Debug)]
pub struct ExperimentPlan {
    pub name: String,
    pub tasks: Vec<Task>,
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
    pub budget: usize,
    pub out_dir: PathBuf,
    pub demo_episodes: usize,
    pub pretrain_steps: usize,
    pub progress_steps: usize,
    pub dungeon: DungeonConfig,
    /// Per-run template; `arm` and `budget` are overwritten per cell.
    pub agent: AgentConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("cannot read plan file: {0}")]
    Io(#[from] std::io::Error),
    #[error("plan does not parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid plan: {0}")]
    Invalid(String),
}

/// Parse and validate a plan file. Returns the plan, the raw file text
/// (copied into the output directory), and the SHA-256 of that text.
pub fn load_plan(path: &Path) -> Result<(ExperimentPlan, String, String), PlanError> {
    let source = fs::read_to_string(path)?;
    let hash = sha256_hex(source.as_bytes());
    let plan = parse_plan(&source)?;
    Ok((plan, source, hash))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        write!(hex, "{b:02x}").unwrap();
    }
    hex
}

fn parse_plan(source: &str) -> Result<ExperimentPlan, PlanError> {
    let raw: PlanFile = toml::from_str(source)?;
    let invalid = |msg: String| PlanError::Invalid(msg);

    if raw.tasks.is_empty() {
        return Err(invalid("plan lists no tasks".into()));
    }
    if raw.arms.is_empty() {
        return Err(invalid("plan lists no arms".into()));
    }
    if raw.seeds.is_empty() {
        return Err(invalid("plan lists no seeds".into()));
    }
    if raw.budget == 0 {
        return Err(invalid("budget must be positive".into()));
    }
    let tasks: Vec<Task> = raw
        .tasks
        .iter()
        .map(|s| s.parse::<Task>().map_err(|e| invalid(e.to_string())))
        .collect::<Result<_, _>>()?;
    let arms: Vec<Arm> = raw
        .arms
        .iter()
        .map(|s| s.parse::<Arm>().map_err(invalid))
        .collect::<Result<_, _>>()?;
    for (list, what) in [(&raw.tasks, "task"), (&raw.arms, "arm")] {
        let mut seen = Vec::new();
        for item in list {
            if seen.contains(&item) {
                return Err(invalid(format!(
                    "duplicate {what} `{item}` would map two runs onto one metrics file"
                )));
            }
            seen.push(item);
        }
    }
    let mut seen = Vec::new();
    for s in &raw.seeds {
        if seen.contains(s) {
            return Err(invalid(format!(
                "duplicate seed {s} would map two runs onto one metrics file"
            )));
        }
        seen.push(*s);
    }

    let default_dungeon = DungeonConfig::default();
    let dungeon = DungeonConfig {
        width: raw.width.unwrap_or(default_dungeon.width),
        height: raw.height.unwrap_or(default_dungeon.height),
        n_levels: raw.levels.unwrap_or(default_dungeon.n_levels),
        n_items_per_level: raw.items.unwrap_or(default_dungeon.n_items_per_level),
        horizon: raw.horizon.unwrap_or(default_dungeon.horizon),
        seed: 0,
    };
    let base = AgentConfig::default();
    let agent = AgentConfig {
        budget: raw.budget,
        lambda: raw.lambda.unwrap_or(base.lambda),
        k: raw.k.unwrap_or(base.k),
        lr: raw.lr.unwrap_or(base.lr),
        n_envs: raw.n_envs.unwrap_or(base.n_envs),
        rollout_len: raw.rollout_len.unwrap_or(base.rollout_len),
        eval_interval: raw.eval_interval.unwrap_or(base.eval_interval),
        eval_episodes: raw.eval_episodes.unwrap_or(base.eval_episodes),
        ..base
    };
    agent.validate();

    Ok(ExperimentPlan {
        name: raw.name,
        tasks,
        arms,
        seeds: raw.seeds,
        budget: raw.budget,
        out_dir: PathBuf::from(raw.out_dir),
        demo_episodes: raw.demo_episodes,
        pretrain_steps: raw.pretrain_steps,
        progress_steps: raw.progress_steps,
        dungeon,
        agent,
    })
}

// ---------------------------------------------------------------------------
// Sample-efficiency metrics
// ---------------------------------------------------------------------------

/// Trapezoidal area under a `(env_steps, return)` curve, normalized by the
/// x-span: the average return over the budget. A single point is its own
/// average.
pub fn auc(points: &[(f64, f64)]) -> f64 {
    match points.len() {
        0 => 0.0,
        1 => points[0].1,
        _ => {
            let span = points.last().unwrap().0 - points[0].0;
            assert!(span > 0.0, "curve x-values must increase");
            let mut area = 0.0;
            for w in points.windows(2) {
                let (x0, y0) = w[0];
                let (x1, y1) = w[1];
                assert!(x1 > x0, "curve x-values must increase");
                area += (x1 - x0) * 0.5 * (y0 + y1);
            }
            area / span
        }
    }
}

/// First x whose y reaches the threshold, or +∞ if the curve never does.
pub fn steps_to_threshold(points: &[(f64, f64)], threshold: f64) -> f64 {
    points
        .iter()
        .find(|(_, y)| *y >= threshold)
        .map_or(f64::INFINITY, |(x, _)| *x)
}

/// Return threshold used by `steps_to_threshold`: sparse tasks trigger a
/// single 0/1 reward so 0.9 means "almost always succeeds"; dense tasks
/// use half the scripted expert's mean return.
pub fn task_threshold(task: Task, expert_return: f64) -> f64 {
    if task.is_sparse() {
        0.9
    } else {
        0.5 * expert_return
    }
}

/// Mean episode return of a demonstration dataset — the expert reference
/// the dense-task thresholds are measured against.
pub fn expert_return(ds: &DemoDataset) -> f64 {
    let returns: Vec<f64> =
        ds.episodes().iter().map(|ep| ep.rewards.iter().map(|&r| f64::from(r)).sum()).collect();
    mean(&returns)
}

// ---------------------------------------------------------------------------
// Records and aggregation
// ---------------------------------------------------------------------------

/// One (task, arm, seed) cell: its learning curve, or the error that ended
/// it.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub task: Task,
    pub arm: Arm,
    pub seed: u64,
    pub rows: Vec<RunLogRow>,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn curve(&self) -> Vec<(f64, f64)> {
        self.rows.iter().map(|r| (r.env_steps as f64, r.eval_mean_return)).collect()
    }
}

/// Aggregate statistics for one (task, arm) group across seeds.
#[derive(Clone, Debug)]
pub struct SummaryRow {
    pub task: Task,
    pub arm: Arm,
    pub n_seeds: usize,
    pub n_failed: usize,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub final_return_mean: f64,
    pub final_return_std: f64,
    pub threshold: f64,
    pub median_steps_to_threshold: f64,
}

/// Group records by (task, arm) in first-seen order and reduce across
/// seeds. Failed runs count toward `n_failed` and contribute nothing else.
/// Standard deviations use the n−1 denominator.
pub fn summarize(records: &[RunRecord], thresholds: &[(Task, f64)]) -> Vec<SummaryRow> {
    let threshold_for = |task: Task| -> f64 {
        thresholds
            .iter()
            .find(|(t, _)| *t == task)
            .map(|(_, thr)| *thr)
            .expect("every task in the records has a threshold")
    };
    let mut keys: Vec<(Task, Arm)> = Vec::new();
    for r in records {
        if !keys.contains(&(r.task, r.arm)) {
            keys.push((r.task, r.arm));
        }
    }
    keys.iter()
        .map(|&(task, arm)| {
            let group: Vec<&RunRecord> =
                records.iter().filter(|r| r.task == task && r.arm == arm).collect();
            let ok: Vec<&RunRecord> = group.iter().copied().filter(|r| r.error.is_none()).collect();
            let threshold = threshold_for(task);
            let aucs: Vec<f64> = ok.iter().map(|r| auc(&r.curve())).collect();
            let finals: Vec<f64> =
                ok.iter().map(|r| r.rows.last().map_or(0.0, |row| row.eval_mean_return)).collect();
            let steps: Vec<f64> =
                ok.iter().map(|r| steps_to_threshold(&r.curve(), threshold)).collect();
            SummaryRow {
                task,
                arm,
                n_seeds: group.len(),
                n_failed: group.len() - ok.len(),
                auc_mean: mean(&aucs),
                auc_std: std_dev(&aucs),
                final_return_mean: mean(&finals),
                final_return_std: std_dev(&finals),
                threshold,
                median_steps_to_threshold: if steps.is_empty() {
                    f64::INFINITY
                } else {
                    median(&steps)
                },
            }
        })
        .collect()
}

/// Seed-paired comparison between two arms on one metric.
#[derive(Clone, Debug)]
pub struct CompareRow {
    pub task: Task,
    pub metric: &'static str,
    pub arm_a: Arm,
    pub arm_b: Arm,
    pub paired_seeds: usize,
    pub wins_a: usize,
    pub wins_b: usize,
    pub ties: usize,
    pub median_a: f64,
    pub median_b: f64,
}

/// Pairwise arm comparison under seed pairing: for every arm pair sharing a
/// task, count the seeds where one arm's AUC beats the other's (higher
/// wins) and where its steps-to-threshold beats the other's (lower wins).
/// Exact equality is a tie, never a win. Arms with no successful seeds are
/// skipped and reported in `excluded`.
pub fn compare_arms(
    records: &[RunRecord],
    thresholds: &[(Task, f64)],
) -> (Vec<CompareRow>, Vec<String>) {
    let mut tasks: Vec<Task> = Vec::new();
    for r in records {
        if !tasks.contains(&r.task) {
            tasks.push(r.task);
        }
    }
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for &task in &tasks {
        let threshold = thresholds
            .iter()
            .find(|(t, _)| *t == task)
            .map(|(_, thr)| *thr)
            .expect("every task in the records has a threshold");
        let mut arms: Vec<Arm> = Vec::new();
        for r in records.iter().filter(|r| r.task == task) {
            if !arms.contains(&r.arm) {
                arms.push(r.arm);
            }
        }
        let per_seed = |arm: Arm| -> Vec<(u64, f64, f64)> {
            records
                .iter()
                .filter(|r| r.task == task && r.arm == arm && r.error.is_none())
                .map(|r| {
                    let curve = r.curve();
                    (r.seed, auc(&curve), steps_to_threshold(&curve, threshold))
                })
                .collect()
        };
        let usable: Vec<(Arm, Vec<(u64, f64, f64)>)> = arms
            .iter()
            .filter_map(|&arm| {
                let stats = per_seed(arm);
                if stats.is_empty() {
                    excluded.push(format!("{task}/{arm}: no successful seeds, excluded"));
                    None
                } else {
                    Some((arm, stats))
                }
            })
            .collect();
        for i in 0..usable.len() {
            for j in i + 1..usable.len() {
                let (arm_a, ref stats_a) = usable[i];
                let (arm_b, ref stats_b) = usable[j];
                for (metric, value, higher_is_better) in [
                    ("auc", 1usize, true),
                    ("steps_to_threshold", 2usize, false),
                ] {
                    let pick = |t: &(u64, f64, f64)| if value == 1 { t.1 } else { t.2 };
                    let mut wins_a = 0;
                    let mut wins_b = 0;
                    let mut ties = 0;
                    let mut paired = 0;
                    for sa in stats_a {
                        if let Some(sb) = stats_b.iter().find(|sb| sb.0 == sa.0) {
                            paired += 1;
                            let (va, vb) = (pick(sa), pick(sb));
                            if va == vb {
                                ties += 1;
                            } else if (va > vb) == higher_is_better {
                                wins_a += 1;
                            } else {
                                wins_b += 1;
                            }
                        }
                    }
                    let med = |stats: &[(u64, f64, f64)]| {
                        median(&stats.iter().map(pick).collect::<Vec<f64>>())
                    };
                    rows.push(CompareRow {
                        task,
                        metric,
                        arm_a,
                        arm_b,
                        paired_seeds: paired,
                        wins_a,
                        wins_b,
                        ties,
                        median_a: med(stats_a),
                        median_b: med(stats_b),
                    });
                }
            }
        }
    }
    (rows, excluded)
}

// ---------------------------------------------------------------------------
// CSV rendering and parsing
// ---------------------------------------------------------------------------

const RUN_HEADER: &str =
    "env_steps,eval_mean_return,eval_std_return,policy_loss,value_loss,entropy,shaped_reward_mean";

fn hash_comment(plan_hash: &str) -> String {
    format!("# plan_sha256 = {plan_hash}\n")
}

/// Per-run CSV: the agent's rows, or a failure note where they would be.
pub fn run_record_csv(record: &RunRecord, plan_hash: &str) -> String {
    let mut csv = hash_comment(plan_hash);
    if let Some(err) = &record.error {
        let one_line = err.replace('\n', " ");
        csv.push_str(&format!("# failed: {one_line}\n"));
    }
    csv.push_str(RUN_HEADER);
    csv.push('\n');
    for r in &record.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.env_steps,
            r.eval_mean_return,
            r.eval_std_return,
            r.policy_loss,
            r.value_loss,
            r.entropy,
            r.shaped_reward_mean
        ));
    }
    csv
}

/// Parse a per-run CSV back into rows plus any recorded failure.
pub fn parse_run_csv(text: &str) -> Result<(Vec<RunLogRow>, Option<String>), String> {
    let mut rows = Vec::new();
    let mut error = None;
    let mut saw_header = false;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# failed: ") {
            error = Some(rest.to_string());
            continue;
        }
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        if !saw_header {
            if line != RUN_HEADER {
                return Err(format!("unexpected header `{line}`"));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(format!("expected 7 fields, got {} in `{line}`", fields.len()));
        }
        let num =
            |i: usize| -> Result<f64, String> { fields[i].parse().map_err(|e| format!("{e}")) };
        rows.push(RunLogRow {
            env_steps: fields[0].parse().map_err(|e| format!("{e}"))?,
            eval_mean_return: num(1)?,
            eval_std_return: num(2)?,
            policy_loss: num(3)?,
            value_loss: num(4)?,
            entropy: num(5)?,
            shaped_reward_mean: num(6)?,
        });
    }
    if !saw_header {
        return Err("missing header".into());
    }
    Ok((rows, error))
}

/// Long-form aggregate of every successful run.
pub fn runs_csv(records: &[RunRecord], plan_hash: &str) -> String {
    let mut csv = hash_comment(plan_hash);
    csv.push_str("task,arm,seed,");
    csv.push_str(RUN_HEADER);
    csv.push('\n');
    for rec in records {
        for r in &rec.rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                rec.task,
                rec.arm,
                rec.seed,
                r.env_steps,
                r.eval_mean_return,
                r.eval_std_return,
                r.policy_loss,
                r.value_loss,
                r.entropy,
                r.shaped_reward_mean
            ));
        }
    }
    csv
}

pub fn summary_csv(rows: &[SummaryRow], plan_hash: &str) -> String {
    let mut csv = hash_comment(plan_hash);
    csv.push_str(
        "task,arm,n_seeds,n_failed,auc_mean,auc_std,final_return_mean,final_return_std,threshold,median_steps_to_threshold\n",
    );
    for r in rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.task,
            r.arm,
            r.n_seeds,
            r.n_failed,
            r.auc_mean,
            r.auc_std,
            r.final_return_mean,
            r.final_return_std,
            r.threshold,
            r.median_steps_to_threshold
        ));
    }
    csv
}

pub fn compare_csv(rows: &[CompareRow], excluded: &[String], plan_hash: &str) -> String {
    let mut csv = hash_comment(plan_hash);
    for note in excluded {
        csv.push_str(&format!("# {note}\n"));
    }
    csv.push_str("task,metric,arm_a,arm_b,paired_seeds,wins_a,wins_b,ties,median_a,median_b\n");
    for r in rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.task,
            r.metric,
            r.arm_a,
            r.arm_b,
            r.paired_seeds,
            r.wins_a,
            r.wins_b,
            r.ties,
            r.median_a,
            r.median_b
        ));
    }
    csv
}

// ---------------------------------------------------------------------------
// Plots
// ---------------------------------------------------------------------------

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Per-arm learning curve with across-seed spread: (env_steps, mean, std)
/// at every evaluation point shared by that arm's successful seeds.
pub fn arm_curve(records: &[RunRecord], task: Task, arm: Arm) -> Vec<(f64, f64, f64)> {
    let ok: Vec<&RunRecord> = records
        .iter()
        .filter(|r| r.task == task && r.arm == arm && r.error.is_none())
        .collect();
    if ok.is_empty() {
        return Vec::new();
    }
    let mut xs: Vec<usize> = ok[0].rows.iter().map(|r| r.env_steps).collect();
    xs.retain(|x| ok.iter().all(|rec| rec.rows.iter().any(|r| r.env_steps == *x)));
    xs.iter()
        .map(|&x| {
            let ys: Vec<f64> = ok
                .iter()
                .map(|rec| {
                    rec.rows
                        .iter()
                        .find(|r| r.env_steps == x)
                        .expect("x retained only if present in every seed")
                        .eval_mean_return
                })
                .collect();
            (x as f64, mean(&ys), std_dev(&ys))
        })
        .collect()
}

/// Self-contained SVG line chart for one task: one mean line per arm with
/// a ±1 std band, axes in env steps and episode return. Output bytes are a
/// pure function of the inputs.
pub fn render_task_plot(
    task: Task,
    series: &[(Arm, Vec<(f64, f64, f64)>)],
    plan_hash: &str,
) -> String {
    let (w, h) = (640.0, 400.0);
    let (ml, mr, mt, mb) = (64.0, 16.0, 36.0, 48.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);

    let mut x_max: f64 = 1.0;
    let mut y_min: f64 = 0.0;
    let mut y_max: f64 = 1.0;
    for (_, curve) in series {
        for &(x, m, s) in curve {
            x_max = x_max.max(x);
            y_min = y_min.min(m - s);
            y_max = y_max.max(m + s);
        }
    }
    let y_pad = 0.05 * (y_max - y_min).max(1e-9);
    y_min -= y_pad;
    y_max += y_pad;
    let px = |x: f64| ml + pw * (x / x_max);
    let py = |y: f64| mt + ph * (1.0 - (y - y_min) / (y_max - y_min));

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = write!(svg, "<!-- plan_sha256 = {plan_hash} -->\n");
    let _ = write!(svg, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n");
    let _ = write!(
        svg,
        "<text x=\"{:.2}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{task}</text>\n",
        ml + pw / 2.0
    );

    // Axes and ticks.
    let _ = write!(
        svg,
        "<line x1=\"{ml}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        mt + ph,
        ml + pw,
        mt + ph
    );
    let _ = write!(svg, "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{:.2}\" stroke=\"black\"/>\n", mt + ph);
    for i in 0..=4 {
        let fx = i as f64 / 4.0;
        let x = fx * x_max;
        let _ = write!(
            svg,
            "<line x1=\"{0:.2}\" y1=\"{1:.2}\" x2=\"{0:.2}\" y2=\"{2:.2}\" stroke=\"black\"/>\n",
            px(x),
            mt + ph,
            mt + ph + 4.0
        );
        let _ = write!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
            px(x),
            mt + ph + 18.0,
            x as u64
        );
        let y = y_min + fx * (y_max - y_min);
        let _ = write!(
            svg,
            "<line x1=\"{1:.2}\" y1=\"{0:.2}\" x2=\"{ml}\" y2=\"{0:.2}\" stroke=\"black\"/>\n",
            py(y),
            ml - 4.0
        );
        let _ = write!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{y:.1}</text>\n",
            ml - 8.0,
            py(y) + 4.0
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">env steps</text>\n",
        ml + pw / 2.0,
        h - 10.0
    );
    let _ = write!(
        svg,
        "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">episode return</text>\n",
        mt + ph / 2.0,
        mt + ph / 2.0
    );

    // Bands, then lines on top.
    for (i, (_, curve)) in series.iter().enumerate() {
        if curve.len() < 2 {
            continue;
        }
        let color = PALETTE[i % PALETTE.len()];
        let mut pts = String::new();
        for &(x, m, s) in curve {
            let _ = write!(pts, "{:.2},{:.2} ", px(x), py(m + s));
        }
        for &(x, m, s) in curve.iter().rev() {
            let _ = write!(pts, "{:.2},{:.2} ", px(x), py(m - s));
        }
        let _ = write!(
            svg,
            "<polygon points=\"{}\" fill=\"{color}\" fill-opacity=\"0.15\" stroke=\"none\"/>\n",
            pts.trim_end()
        );
    }
    for (i, (_, curve)) in series.iter().enumerate() {
        if curve.is_empty() {
            continue;
        }
        let color = PALETTE[i % PALETTE.len()];
        let mut pts = String::new();
        for &(x, m, _) in curve {
            let _ = write!(pts, "{:.2},{:.2} ", px(x), py(m));
        }
        let _ = write!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            pts.trim_end()
        );
    }

    // Legend: one row per arm, noting arms with no data.
    for (i, (arm, curve)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let ly = mt + 8.0 + 16.0 * i as f64;
        let lx = ml + pw - 150.0;
        if curve.is_empty() {
            let _ = write!(
                svg,
                "<text x=\"{:.2}\" y=\"{:.2}\" fill=\"#888888\">{arm} (no data)</text>\n",
                lx + 24.0,
                ly + 4.0
            );
        } else {
            let _ = write!(
                svg,
                "<line x1=\"{lx:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                lx + 18.0
            );
            let _ = write!(
                svg,
                "<text x=\"{:.2}\" y=\"{:.2}\">{arm}</text>\n",
                lx + 24.0,
                ly + 4.0
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("plan problem: {0}")]
    Plan(#[from] PlanError),
    #[error("demo generation failed: {0}")]
    Demos(#[from] DemoGenError),
    #[error("demo file problem: {0}")]
    DemoIo(#[from] DemoIoError),
    #[error("encoder pretraining failed: {0}")]
    Pretrain(#[from] PretrainError),
    #[error("progress training failed: {0}")]
    Progress(#[from] ProgressError),
    #[error("checkpoint problem: {0}")]
    Ckpt(#[from] CkptError),
    #[error("run csv for {path} does not parse: {reason}")]
    BadRunCsv { path: PathBuf, reason: String },
}

fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    fs::write(path, contents).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })
}

pub struct PipelineReport {
    pub records: Vec<RunRecord>,
    pub n_failures: usize,
}

fn run_file_name(task: Task, arm: Arm, seed: u64) -> String {
    format!("{task}-{arm}-s{seed}.csv")
}

/// Execute a full plan: demos, shared checkpoints, every (task, arm, seed)
/// online run, then the aggregate files. A failing run is recorded and the
/// plan continues; infrastructure failures (demos, checkpoints, io) abort.
pub fn run_pipeline(
    plan: &ExperimentPlan,
    plan_source: &str,
    plan_hash: &str,
) -> Result<PipelineReport, HarnessError> {
    let out = &plan.out_dir;
    for sub in ["demos", "ckpt", "runs", "plots"] {
        fs::create_dir_all(out.join(sub))
            .map_err(|source| HarnessError::Io { path: out.join(sub), source })?;
    }
    write_file(&out.join("plan.toml"), plan_source)?;

    let needs_encoder = plan.arms.iter().any(|a| a.needs_encoder());
    let needs_progress = plan.arms.iter().any(|a| a.needs_progress());

    let mut thresholds: Vec<(Task, f64)> = Vec::new();
    let mut encoders: Vec<(Task, Checkpoint)> = Vec::new();
    let mut progresses: Vec<(Task, Checkpoint)> = Vec::new();
    for &task in &plan.tasks {
        eprintln!("[plan {}] generating {} demos for {task}", plan.name, plan.demo_episodes);
        let ds = generate_dataset(&plan.dungeon, task, plan.demo_episodes)?;
        write_dataset(&ds, &out.join("demos").join(format!("{task}.bin")))?;
        thresholds.push((task, task_threshold(task, expert_return(&ds))));

        if needs_encoder {
            eprintln!("[plan {}] pretraining encoder for {task} ({} steps)", plan.name, plan.pretrain_steps);
            let cfg = PretrainConfig { steps: plan.pretrain_steps, ..PretrainConfig::default() };
            let (params, _) = train_encoder(&ds, &cfg, 0)?;
            let ckpt = Checkpoint::from_store(&params, 0);
            ckpt.save(&out.join("ckpt").join(format!("{task}-encoder.json")))?;
            encoders.push((task, ckpt));
        }
        if needs_progress {
            eprintln!("[plan {}] training progress model for {task} ({} steps)", plan.name, plan.progress_steps);
            let cfg = ProgressConfig { steps: plan.progress_steps, ..ProgressConfig::default() };
            let (params, _) = train_progress(&ds, &cfg, 0)?;
            let ckpt = Checkpoint::from_store(&params, 0);
            ckpt.save(&out.join("ckpt").join(format!("{task}-progress.json")))?;
            progresses.push((task, ckpt));
        }
    }

    let mut records = Vec::new();
    for &task in &plan.tasks {
        let encoder = encoders.iter().find(|(t, _)| *t == task).map(|(_, c)| c);
        let progress = progresses.iter().find(|(t, _)| *t == task).map(|(_, c)| c);
        for &arm in &plan.arms {
            for &seed in &plan.seeds {
                eprintln!("[plan {}] run {task}/{arm}/s{seed}", plan.name);
                let cfg = AgentConfig { arm, budget: plan.budget, ..plan.agent.clone() };
                let record = match train_online(&plan.dungeon, task, &cfg, encoder, progress, seed)
                {
                    Ok(outcome) => {
                        RunRecord { task, arm, seed, rows: outcome.rows, error: None }
                    }
                    Err(err) => {
                        eprintln!("[plan {}] run {task}/{arm}/s{seed} FAILED: {err}", plan.name);
                        RunRecord { task, arm, seed, rows: Vec::new(), error: Some(err.to_string()) }
                    }
                };
                write_file(
                    &out.join("runs").join(run_file_name(task, arm, seed)),
                    &run_record_csv(&record, plan_hash),
                )?;
                records.push(record);
            }
        }
    }

    write_aggregates(plan, &records, &thresholds, plan_hash)?;
    let n_failures = records.iter().filter(|r| r.error.is_some()).count();
    Ok(PipelineReport { records, n_failures })
}

fn write_aggregates(
    plan: &ExperimentPlan,
    records: &[RunRecord],
    thresholds: &[(Task, f64)],
    plan_hash: &str,
) -> Result<(), HarnessError> {
    let out = &plan.out_dir;
    write_file(&out.join("runs.csv"), &runs_csv(records, plan_hash))?;
    write_file(&out.join("summary.csv"), &summary_csv(&summarize(records, thresholds), plan_hash))?;
    let (rows, excluded) = compare_arms(records, thresholds);
    write_file(&out.join("compare.csv"), &compare_csv(&rows, &excluded, plan_hash))?;
    write_plots(plan, records, plan_hash)
}

fn write_plots(
    plan: &ExperimentPlan,
    records: &[RunRecord],
    plan_hash: &str,
) -> Result<(), HarnessError> {
    let plots = plan.out_dir.join("plots");
    fs::create_dir_all(&plots)
        .map_err(|source| HarnessError::Io { path: plots.clone(), source })?;
    for &task in &plan.tasks {
        let series: Vec<(Arm, Vec<(f64, f64, f64)>)> =
            plan.arms.iter().map(|&arm| (arm, arm_curve(records, task, arm))).collect();
        write_file(
            &plots.join(format!("{task}.svg")),
            &render_task_plot(task, &series, plan_hash),
        )?;
    }
    Ok(())
}

/// Re-read a completed plan directory: the plan copy plus every per-run
/// CSV.
pub fn collect_records(
    dir: &Path,
) -> Result<(ExperimentPlan, String, Vec<RunRecord>, Vec<(Task, f64)>), HarnessError> {
    let (mut plan, _, hash) = load_plan(&dir.join("plan.toml"))?;
    // The copy lives inside the output directory it names; aggregate
    // outputs go next to it regardless of where the plan pointed.
    plan.out_dir = dir.to_path_buf();
    let mut thresholds = Vec::new();
    for &task in &plan.tasks {
        let ds = read_dataset(&dir.join("demos").join(format!("{task}.bin")))?;
        thresholds.push((task, task_threshold(task, expert_return(&ds))));
    }
    let mut records = Vec::new();
    for &task in &plan.tasks {
        for &arm in &plan.arms {
            for &seed in &plan.seeds {
                let path = dir.join("runs").join(run_file_name(task, arm, seed));
                let text = fs::read_to_string(&path)
                    .map_err(|source| HarnessError::Io { path: path.clone(), source })?;
                let (rows, error) = parse_run_csv(&text)
                    .map_err(|reason| HarnessError::BadRunCsv { path: path.clone(), reason })?;
                records.push(RunRecord { task, arm, seed, rows, error });
            }
        }
    }
    Ok((plan, hash, records, thresholds))
}

/// Recompute the aggregate CSVs and plots from a plan directory's per-run
/// files.
pub fn summarize_dir(dir: &Path) -> Result<(), HarnessError> {
    let (plan, hash, records, thresholds) = collect_records(dir)?;
    write_aggregates(&plan, &records, &thresholds, &hash)
}

/// Re-render only the plots from a plan directory's per-run files.
pub fn plot_dir(dir: &Path) -> Result<(), HarnessError> {
    let (plan, hash, records, _) = collect_records(dir)?;
    write_plots(&plan, &records, &hash)
}
