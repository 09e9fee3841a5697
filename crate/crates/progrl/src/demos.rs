//! Scripted-expert demonstrations: generation, binary persistence, and the
//! offset samplers that draw training pairs from them.
//!
//! Episodes store observations and rewards only — no actions — because the
//! downstream consumers (contrastive encoder, progress model) learn from
//! state sequences alone. The expert plans on ground-truth layouts with BFS,
//! re-evaluated every step, so its trajectories make near-maximal progress:
//! exactly the regime where temporal distance is a meaningful progress signal.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{
    bfs_distances, neighbors4, Action, DungeonConfig, GameState, Observation, Task,
    REVEAL_RADIUS,
};

// ── Episodes and datasets ──────────────────────────────────────────────────

/// One expert trajectory: `T+1` observations bracketing `T` rewards.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub task: Task,
    pub seed: u64,
    pub observations: Vec<Observation>,
    pub rewards: Vec<f32>,
}

impl Episode {
    /// Number of steps `T`.
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Whether a sparse episode ended on its trigger.
    pub fn triggered(&self) -> bool {
        self.rewards.last() == Some(&1.0)
    }
}

/// Header stored with every dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: DungeonConfig,
    pub task_mix: BTreeMap<String, u32>,
    pub episode_count: u32,
}

/// Read-only collection of episodes with flat-position indices for sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoDataset {
    manifest: Manifest,
    episodes: Vec<Episode>,
    /// Prefix sums of episode step counts: anchor positions are (ep, t) with
    /// `t < T`, addressed by a flat index in `[0, cum_anchors.last())`.
    cum_anchors: Vec<usize>,
    /// Prefix sums of observation counts (`T+1` per episode).
    cum_obs: Vec<usize>,
}

pub const DATASET_FORMAT_VERSION: u32 = 1;

impl DemoDataset {
    /// Build a dataset (and its manifest) from episodes.
    pub fn from_episodes(config: DungeonConfig, episodes: Vec<Episode>) -> DemoDataset {
        let mut task_mix: BTreeMap<String, u32> = BTreeMap::new();
        for ep in &episodes {
            *task_mix.entry(ep.task.to_string()).or_insert(0) += 1;
        }
        let manifest = Manifest {
            format_version: DATASET_FORMAT_VERSION,
            config,
            task_mix,
            episode_count: episodes.len() as u32,
        };
        let mut cum_anchors = Vec::with_capacity(episodes.len() + 1);
        let mut cum_obs = Vec::with_capacity(episodes.len() + 1);
        cum_anchors.push(0);
        cum_obs.push(0);
        for ep in &episodes {
            cum_anchors.push(cum_anchors.last().unwrap() + ep.len());
            cum_obs.push(cum_obs.last().unwrap() + ep.observations.len());
        }
        DemoDataset { manifest, episodes, cum_anchors, cum_obs }
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn n_episodes(&self) -> usize {
        self.episodes.len()
    }

    /// Total anchor positions (pairs `(ep, t)` with `t < T`).
    pub fn n_anchors(&self) -> usize {
        *self.cum_anchors.last().unwrap()
    }

    /// Total observations across all episodes.
    pub fn n_obs(&self) -> usize {
        *self.cum_obs.last().unwrap()
    }

    /// Map a flat anchor index to `(episode, t)`.
    pub fn anchor_at(&self, flat: usize) -> (usize, usize) {
        assert!(flat < self.n_anchors(), "anchor index {flat} out of range");
        let ep = self.cum_anchors.partition_point(|&c| c <= flat) - 1;
        (ep, flat - self.cum_anchors[ep])
    }

    /// Map a flat observation index to `(episode, t)` with `t <= T`.
    pub fn obs_at(&self, flat: usize) -> (usize, usize) {
        assert!(flat < self.n_obs(), "observation index {flat} out of range");
        let ep = self.cum_obs.partition_point(|&c| c <= flat) - 1;
        (ep, flat - self.cum_obs[ep])
    }

    pub fn obs(&self, episode: usize, t: usize) -> &Observation {
        &self.episodes[episode].observations[t]
    }
}

// ── Scripted expert ────────────────────────────────────────────────────────

/// Expert failure: some objective could not be reached on this layout.
#[derive(Debug, thiserror::Error)]
#[error("expert could not reach its goal on seed {seed} (task {task})")]
pub struct UnreachableGoal {
    pub seed: u64,
    pub task: Task,
}

/// Greedy BFS expert action for the current state, or `None` when every
/// objective the task cares about is exhausted.
fn expert_action(state: &GameState) -> Result<Option<Action>, UnreachableGoal> {
    let (w, h) = (state.config().width, state.config().height);
    let li = state.level_index();
    let lv = state.dungeon().level(li);
    let pos = state.agent_pos();
    let has_stairs = lv.stairs.is_some();

    // Goal tiles on the current level, per task.
    let goals: Vec<(usize, usize)> = match state.task() {
        Task::Score => {
            let items = state.items_left(li);
            let left: Vec<_> =
                (0..w * h).filter(|&i| items[i]).map(|i| (i / w, i % w)).collect();
            if !left.is_empty() {
                left
            } else if has_stairs {
                vec![lv.stairs.unwrap()]
            } else {
                return Ok(None);
            }
        }
        Task::Scout => {
            let gain = scouting_targets(state);
            if !gain.is_empty() {
                gain
            } else if has_stairs {
                vec![lv.stairs.unwrap()]
            } else {
                return Ok(None);
            }
        }
        Task::Depth(_) => vec![lv.stairs.expect("depth target validated at reset")],
        Task::Oracle => match lv.oracle {
            Some(o) => vec![o],
            None => vec![lv.stairs.expect("oracle is on a level below")],
        },
    };

    if goals.contains(&pos) && Some(pos) == lv.stairs {
        return Ok(Some(Action::Descend));
    }
    let dist = bfs_distances(&lv.walls, w, h, pos);
    let nearest = goals
        .iter()
        .filter_map(|&(r, c)| dist[r * w + c].map(|d| (d, r * w + c)))
        .min();
    let Some((_, goal_idx)) = nearest else {
        return Err(UnreachableGoal { seed: state.config().seed, task: state.task() });
    };
    // Walk the BFS tree backward from the goal to the tile adjacent to us.
    let (mut r, mut c) = (goal_idx / w, goal_idx % w);
    loop {
        let d = dist[r * w + c].unwrap();
        if d == 1 {
            break;
        }
        let (nr, nc) = neighbors4(r, c, w, h)
            .find(|&(nr, nc)| dist[nr * w + nc] == Some(d - 1))
            .expect("BFS predecessor exists");
        (r, c) = (nr, nc);
    }
    let act = match (r as i64 - pos.0 as i64, c as i64 - pos.1 as i64) {
        (-1, 0) => Action::Up,
        (1, 0) => Action::Down,
        (0, -1) => Action::Left,
        (0, 1) => Action::Right,
        other => unreachable!("BFS first step not adjacent: {other:?}"),
    };
    Ok(Some(act))
}

/// Walkable tiles whose reveal window still contains unrevealed tiles.
fn scouting_targets(state: &GameState) -> Vec<(usize, usize)> {
    let (w, h) = (state.config().width, state.config().height);
    let lv = state.dungeon().level(state.level_index());
    let obs = state.observation();
    let unrevealed = |r: usize, c: usize| obs.tiles[r * w + c] == crate::env::TILE_UNSEEN;
    let rad = REVEAL_RADIUS as i64;
    (0..w * h)
        .filter(|&i| !lv.walls[i])
        .map(|i| (i / w, i % w))
        .filter(|&(r, c)| {
            for dr in -rad..=rad {
                for dc in -rad..=rad {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr >= 0 && nr < h as i64 && nc >= 0 && nc < w as i64 && unrevealed(nr as usize, nc as usize)
                    {
                        return true;
                    }
                }
            }
            false
        })
        .collect()
}

/// Run the scripted expert for one episode. The episode ends on the task
/// trigger, on the horizon, or as soon as every objective is exhausted —
/// expert trajectories carry no idle tail.
pub fn generate_expert_episode(
    config: &DungeonConfig,
    task: Task,
) -> Result<Episode, UnreachableGoal> {
    let (mut state, first_obs) = GameState::reset(config, task);
    let mut observations = vec![first_obs];
    let mut rewards = Vec::new();
    while state.finished().is_none() {
        let Some(action) = expert_action(&state)? else {
            break;
        };
        let r = state.step(action);
        observations.push(r.observation);
        rewards.push(r.reward as f32);
        if r.done {
            break;
        }
    }
    Ok(Episode { task, seed: config.seed, observations, rewards })
}

/// Dataset-level generation failure.
#[derive(Debug, thiserror::Error)]
pub enum DemoGenError {
    #[error(
        "expert success rate {rate:.3} over {attempts} seeds is below the required 0.95 \
         for task {task}; the dungeon config is too hard for the scripted expert"
    )]
    ConfigRejected { task: Task, rate: f64, attempts: usize },
}

/// Generate `n_episodes` expert episodes on sequential seeds starting at
/// `config.seed`. Failed seeds (unreachable goals, missed sparse triggers)
/// are skipped with a note on stderr; if the measured success rate over all
/// attempted seeds falls below 95%, the config is rejected.
pub fn generate_dataset(
    config: &DungeonConfig,
    task: Task,
    n_episodes: usize,
) -> Result<DemoDataset, DemoGenError> {
    assert!(n_episodes > 0, "dataset needs at least one episode");
    let mut episodes = Vec::with_capacity(n_episodes);
    let mut attempts = 0usize;
    let mut seed = config.seed;
    while episodes.len() < n_episodes {
        let mut cfg = config.clone();
        cfg.seed = seed;
        seed += 1;
        attempts += 1;
        match generate_expert_episode(&cfg, task) {
            Ok(ep) => {
                if task.is_sparse() && !ep.triggered() {
                    eprintln!("note: expert missed the {task} trigger on seed {}; skipping", cfg.seed);
                } else {
                    episodes.push(ep);
                }
            }
            Err(e) => eprintln!("note: {e}; skipping"),
        }
        let rate = episodes.len() as f64 / attempts as f64;
        // Only reject once the estimate has support; a single early miss
        // should not kill a 95%-good config.
        if attempts >= 20 && rate < 0.95 {
            return Err(DemoGenError::ConfigRejected { task, rate, attempts });
        }
    }
    let rate = episodes.len() as f64 / attempts as f64;
    if rate < 0.95 {
        return Err(DemoGenError::ConfigRejected { task, rate, attempts });
    }
    Ok(DemoDataset::from_episodes(config.clone(), episodes))
}

// ── Binary persistence ─────────────────────────────────────────────────────
//
// Little-endian layout:
//   magic "PRGL" | version u16 | manifest_len u32 | manifest UTF-8 JSON
//   | episode_count u32
//   | per episode: task_code u8 | seed u64 | T u32
//       | (T+1) x (tiles: width*height u8, status: 3 x f32)
//       | T x f32 rewards

const MAGIC: &[u8; 4] = b"PRGL";
const FILE_VERSION: u16 = 1;

/// Structured load/store failure; offsets are byte positions in the file.
#[derive(Debug, thiserror::Error)]
pub enum DemoIoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic at byte 0: expected \"PRGL\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported file version {found} at byte 4 (expected {FILE_VERSION})")]
    BadVersion { found: u16 },
    #[error("truncated file at byte {offset}: needed {needed} more byte(s) for {what}")]
    Truncated { offset: usize, needed: usize, what: &'static str },
    #[error("bad manifest JSON at byte {offset}: {source}")]
    BadManifest {
        offset: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("unknown task code {code} at byte {offset}")]
    BadTaskCode { offset: usize, code: u8 },
    #[error("cannot write an empty dataset")]
    EmptyDataset,
}

fn task_code(task: Task) -> u8 {
    match task {
        Task::Score => 0,
        Task::Scout => 1,
        Task::Oracle => 2,
        Task::Depth(n) => {
            assert!(n <= (u8::MAX - 10) as usize, "depth target too large to encode");
            10 + n as u8
        }
    }
}

fn task_from_code(code: u8, offset: usize) -> Result<Task, DemoIoError> {
    match code {
        0 => Ok(Task::Score),
        1 => Ok(Task::Scout),
        2 => Ok(Task::Oracle),
        n if n >= 12 => Ok(Task::Depth((n - 10) as usize)),
        _ => Err(DemoIoError::BadTaskCode { offset, code }),
    }
}

/// Serialize a dataset to bytes.
pub fn dataset_to_bytes(ds: &DemoDataset) -> Result<Vec<u8>, DemoIoError> {
    if ds.episodes.is_empty() {
        return Err(DemoIoError::EmptyDataset);
    }
    let manifest =
        serde_json::to_string(&ds.manifest).expect("manifest serialization cannot fail");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FILE_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&(ds.episodes.len() as u32).to_le_bytes());
    for ep in &ds.episodes {
        out.push(task_code(ep.task));
        out.extend_from_slice(&ep.seed.to_le_bytes());
        out.extend_from_slice(&(ep.len() as u32).to_le_bytes());
        for obs in &ep.observations {
            out.extend_from_slice(&obs.tiles);
            for s in obs.status {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
        for r in &ep.rewards {
            out.extend_from_slice(&r.to_le_bytes());
        }
    }
    Ok(out)
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], DemoIoError> {
        if self.offset + n > self.bytes.len() {
            return Err(DemoIoError::Truncated {
                offset: self.bytes.len(),
                needed: self.offset + n - self.bytes.len(),
                what,
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, DemoIoError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, DemoIoError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, DemoIoError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, DemoIoError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &'static str) -> Result<f32, DemoIoError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parse a dataset from bytes.
pub fn dataset_from_bytes(bytes: &[u8]) -> Result<DemoDataset, DemoIoError> {
    let mut r = ByteReader { bytes, offset: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(DemoIoError::BadMagic { found: magic.try_into().unwrap() });
    }
    let version = r.u16("version")?;
    if version != FILE_VERSION {
        return Err(DemoIoError::BadVersion { found: version });
    }
    let manifest_len = r.u32("manifest length")? as usize;
    let manifest_offset = r.offset;
    let manifest_bytes = r.take(manifest_len, "manifest")?;
    let manifest: Manifest = serde_json::from_slice(manifest_bytes)
        .map_err(|source| DemoIoError::BadManifest { offset: manifest_offset, source })?;
    let (w, h) = (manifest.config.width, manifest.config.height);
    let n_episodes = r.u32("episode count")? as usize;
    let mut episodes = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let code_offset = r.offset;
        let task = task_from_code(r.u8("task code")?, code_offset)?;
        let seed = r.u64("episode seed")?;
        let t = r.u32("episode length")? as usize;
        let mut observations = Vec::with_capacity(t + 1);
        for _ in 0..t + 1 {
            let tiles = r.take(w * h, "observation tiles")?.to_vec();
            let mut status = [0f32; 3];
            for s in &mut status {
                *s = r.f32("observation status")?;
            }
            observations.push(Observation { tiles, width: w, height: h, status });
        }
        let mut rewards = Vec::with_capacity(t);
        for _ in 0..t {
            rewards.push(r.f32("reward")?);
        }
        episodes.push(Episode { task, seed, observations, rewards });
    }
    Ok(DemoDataset::from_episodes(manifest.config, episodes))
}

/// Write a dataset to a file.
pub fn write_dataset(ds: &DemoDataset, path: &Path) -> Result<(), DemoIoError> {
    let bytes = dataset_to_bytes(ds)?;
    std::fs::write(path, bytes)
        .map_err(|source| DemoIoError::Io { path: path.display().to_string(), source })
}

/// Read a dataset from a file.
pub fn read_dataset(path: &Path) -> Result<DemoDataset, DemoIoError> {
    let bytes = std::fs::read(path)
        .map_err(|source| DemoIoError::Io { path: path.display().to_string(), source })?;
    dataset_from_bytes(&bytes)
}

// ── Offset samplers ────────────────────────────────────────────────────────

/// Distribution over forward offsets `Δt ∈ [1, n]`.
#[derive(Clone, Copy, Debug)]
pub enum OffsetSampler {
    /// pmf ∝ gamma^(Δt-1), renormalized over the truncated support.
    TruncatedGeometric { gamma: f64 },
    /// Discretized log-uniform: pmf(k) = ln((k+1)/k) / ln(n+1).
    LogUniform,
}

impl OffsetSampler {
    /// Draw an offset in `[1, n]`.
    pub fn sample(&self, rng: &mut impl Rng, n: usize) -> usize {
        assert!(n >= 1, "offset support must be non-empty");
        match *self {
            OffsetSampler::TruncatedGeometric { gamma } => {
                assert!(gamma > 0.0 && gamma < 1.0, "gamma must be in (0,1)");
                if n == 1 {
                    return 1;
                }
                // Inverse CDF: F(k) = (1 - gamma^k) / (1 - gamma^n).
                let u: f64 = rng.gen();
                let k = ((1.0 - u * (1.0 - gamma.powi(n as i32))).ln() / gamma.ln()).ceil();
                (k as usize).clamp(1, n)
            }
            OffsetSampler::LogUniform => {
                // floor(exp(u)), u ~ U[0, ln(n+1)) lands in [1, n].
                let u: f64 = rng.gen::<f64>() * ((n + 1) as f64).ln();
                (u.exp().floor() as usize).clamp(1, n)
            }
        }
    }

    /// Exact pmf over `[1, n]` (index 0 holds P[Δt=1]).
    pub fn pmf(&self, n: usize) -> Vec<f64> {
        match *self {
            OffsetSampler::TruncatedGeometric { gamma } => {
                let norm = (1.0 - gamma) / (1.0 - gamma.powi(n as i32));
                (1..=n).map(|k| norm * gamma.powi(k as i32 - 1)).collect()
            }
            OffsetSampler::LogUniform => {
                let norm = ((n + 1) as f64).ln();
                (1..=n).map(|k| (((k + 1) as f64) / k as f64).ln() / norm).collect()
            }
        }
    }
}

/// Side-by-side pmf table `(offset, truncated_geometric, log_uniform)` over
/// `[1, n]`, for the offset-distribution ablation.
pub fn compare_offset_distributions(gamma_c: f64, n: usize) -> Vec<(usize, f64, f64)> {
    let geo = OffsetSampler::TruncatedGeometric { gamma: gamma_c }.pmf(n);
    let lu = OffsetSampler::LogUniform.pmf(n);
    (1..=n).map(|k| (k, geo[k - 1], lu[k - 1])).collect()
}

// ── Pair samplers ──────────────────────────────────────────────────────────

/// An anchor with one positive and `K-1` negatives.
pub struct ContrastiveSample<'a> {
    pub anchor: &'a Observation,
    pub positive: &'a Observation,
    pub negatives: Vec<&'a Observation>,
    /// Offset used for the positive (useful for diagnostics).
    pub dt: usize,
}

/// Draw an anchor uniformly over all `(episode, t < T)` positions and a
/// positive `Δt` ahead in the same episode, `Δt` truncated-geometric over
/// `[1, T-t]`.
pub fn sample_anchor_positive<'a>(
    ds: &'a DemoDataset,
    rng: &mut impl Rng,
    gamma_c: f64,
) -> (&'a Observation, &'a Observation, usize) {
    assert!(ds.n_anchors() > 0, "dataset has no positions to anchor on");
    let flat = rng.gen_range(0..ds.n_anchors());
    let (ep, t) = ds.anchor_at(flat);
    let bound = ds.episodes[ep].len() - t;
    let dt = OffsetSampler::TruncatedGeometric { gamma: gamma_c }.sample(rng, bound);
    (ds.obs(ep, t), ds.obs(ep, t + dt), dt)
}

/// Full contrastive draw: anchor, geometric positive, uniform negatives from
/// anywhere in the dataset (any episode, any timestep).
pub fn sample_contrastive<'a>(
    ds: &'a DemoDataset,
    rng: &mut impl Rng,
    gamma_c: f64,
    k: usize,
) -> ContrastiveSample<'a> {
    assert!(k >= 2, "contrastive sample needs at least one negative (K >= 2)");
    let (anchor, positive, dt) = sample_anchor_positive(ds, rng, gamma_c);
    let negatives = (0..k - 1)
        .map(|_| {
            let (ep, t) = ds.obs_at(rng.gen_range(0..ds.n_obs()));
            ds.obs(ep, t)
        })
        .collect();
    ContrastiveSample { anchor, positive, negatives, dt }
}

/// A state pair with its signed temporal offset.
pub struct ProgressPair<'a> {
    pub a: &'a Observation,
    pub b: &'a Observation,
    pub dt: i64,
}

/// Draw a pair `|Δt|` apart (log-uniform over `[1, T-t]`), presented in
/// forward order with probability 1/2 (positive `dt`) and reversed otherwise
/// (negative `dt`).
pub fn sample_progress_pair<'a>(ds: &'a DemoDataset, rng: &mut impl Rng) -> ProgressPair<'a> {
    assert!(ds.n_anchors() > 0, "dataset has no positions to anchor on");
    let flat = rng.gen_range(0..ds.n_anchors());
    let (ep, t) = ds.anchor_at(flat);
    let bound = ds.episodes[ep].len() - t;
    let dt = OffsetSampler::LogUniform.sample(rng, bound) as i64;
    let (early, late) = (ds.obs(ep, t), ds.obs(ep, t + dt as usize));
    if rng.gen_bool(0.5) {
        ProgressPair { a: early, b: late, dt }
    } else {
        ProgressPair { a: late, b: early, dt: -dt }
    }
}
