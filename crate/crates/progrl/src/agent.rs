//! Online advantage actor-critic fine-tuner.
//!
//! A small policy/value network learns a task online. Depending on the
//! experiment arm its conv torso starts random, is imported from the
//! contrastive encoder (optionally frozen), or is transplanted from the
//! progress model's fused torso; arms with shaping add the progress bonus
//! `λ·g(s_{t−k}, s_t)` to each reward whose state is at least `k` steps
//! into its episode. Evaluation always reports the raw environment return —
//! the bonus exists only in the learning signal.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ckpt::{Checkpoint, CkptError};
use crate::encode::encode_batch;
use crate::env::{Action, DungeonConfig, GameState, Observation, Task, N_ACTIONS};
use crate::layers::{backward, forward, Layer, Stack};
use crate::loss::{log_softmax_rows, softmax_entropy_rows, softmax_rows};
use crate::nd::NdArray;
use crate::params::{AdamConfig, Grads, OptimError, ParamStore};
use crate::pretrain::{torso_stack, FEAT_DIM};
use crate::progress::{progress_reward_batch, ProgressNet};
use crate::stats::Running;
use crate::Real;

/// Experiment arm: which checkpoints seed the network, whether the torso
/// trains, and whether rewards are shaped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arm {
    /// Random init, no shaping.
    Base,
    /// Encoder torso, frozen, no shaping.
    Pretrain,
    /// Random init plus progress shaping.
    Ele,
    /// Encoder torso, frozen, plus progress shaping.
    PretrainEle,
    /// Torso transplanted from the progress model's current-state half,
    /// frozen, plus progress shaping.
    PmTorsoInit,
    /// Encoder torso left trainable, no shaping.
    PretrainFinetune,
}

impl Arm {
    pub const ALL: [Arm; 6] =
        [Arm::Base, Arm::Pretrain, Arm::Ele, Arm::PretrainEle, Arm::PmTorsoInit, Arm::PretrainFinetune];

    /// Needs an encoder checkpoint for its torso.
    pub fn needs_encoder(self) -> bool {
        matches!(self, Arm::Pretrain | Arm::PretrainEle | Arm::PretrainFinetune)
    }

    /// Needs a progress checkpoint (for shaping or for its torso).
    pub fn needs_progress(self) -> bool {
        matches!(self, Arm::Ele | Arm::PretrainEle | Arm::PmTorsoInit)
    }

    /// Torso parameters are excluded from optimizer updates.
    pub fn freezes_torso(self) -> bool {
        matches!(self, Arm::Pretrain | Arm::PretrainEle | Arm::PmTorsoInit)
    }

    /// Rewards get the progress bonus.
    pub fn shapes_rewards(self) -> bool {
        matches!(self, Arm::Ele | Arm::PretrainEle | Arm::PmTorsoInit)
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Arm::Base => "base",
            Arm::Pretrain => "pretrain",
            Arm::Ele => "ele",
            Arm::PretrainEle => "pretrain_ele",
            Arm::PmTorsoInit => "pm_torso_init",
            Arm::PretrainFinetune => "pretrain_finetune",
        };
        f.write_str(s)
    }
}

impl FromStr for Arm {
    type Err = String;

    fn from_str(s: &str) -> Result<Arm, String> {
        match s {
            "base" => Ok(Arm::Base),
            "pretrain" => Ok(Arm::Pretrain),
            "ele" => Ok(Arm::Ele),
            "pretrain_ele" => Ok(Arm::PretrainEle),
            "pm_torso_init" => Ok(Arm::PmTorsoInit),
            "pretrain_finetune" => Ok(Arm::PretrainFinetune),
            other => Err(format!(
                "unknown arm `{other}`: expected base, pretrain, ele, pretrain_ele, pm_torso_init, or pretrain_finetune"
            )),
        }
    }
}

/// Policy/value network: conv torso (same stack shape and parameter names
/// as the encoder torso, so checkpoints transfer by name), a shared dense
/// trunk, and separate policy-logit and value heads.
pub struct PolicyValueNet {
    pub torso: Stack,
    pub trunk: Stack,
    pub policy: Stack,
    pub value: Stack,
    pub height: usize,
    pub width: usize,
}

impl PolicyValueNet {
    pub fn new(height: usize, width: usize) -> PolicyValueNet {
        PolicyValueNet {
            torso: torso_stack(crate::encode::OBS_CHANNELS, height, width),
            trunk: Stack::new(vec![Layer::dense("trunk", FEAT_DIM, FEAT_DIM), Layer::Relu]),
            policy: Stack::new(vec![Layer::dense("policy", FEAT_DIM, N_ACTIONS)]),
            value: Stack::new(vec![Layer::dense("value", FEAT_DIM, 1)]),
            height,
            width,
        }
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> ParamStore<Real> {
        let mut params = ParamStore::new();
        self.torso.init_params(&mut params, rng);
        self.trunk.init_params(&mut params, rng);
        self.policy.init_params(&mut params, rng);
        self.value.init_params(&mut params, rng);
        params
    }

    /// Forward-only pass: policy logits `[B, |A|]` and value estimates.
    pub fn policy_value(
        &self,
        params: &ParamStore<Real>,
        obs: &[&Observation],
    ) -> (NdArray<Real>, Vec<Real>) {
        let (f, _) = forward(&self.torso, params, &encode_batch(obs));
        let (h, _) = forward(&self.trunk, params, &f);
        let (logits, _) = forward(&self.policy, params, &h);
        let (v, _) = forward(&self.value, params, &h);
        (logits, v.data().to_vec())
    }
}

/// Names of the torso parameters shared between the encoder, the progress
/// model, and the policy network.
const TORSO_PARAMS: [&str; 6] =
    ["torso.c1.w", "torso.c1.b", "torso.c2.w", "torso.c2.b", "torso.fc.w", "torso.fc.b"];

/// Copy an encoder checkpoint's torso into policy parameters (shapes must
/// match exactly; the encoder's projection heads are ignored).
pub fn import_encoder_torso(params: &mut ParamStore<Real>, ckpt: &Checkpoint) -> Result<(), CkptError> {
    for name in TORSO_PARAMS {
        let src = ckpt.get(name)?;
        let dst = params.get_mut(name);
        assert_eq!(src.shape(), dst.shape(), "torso parameter `{name}` shape mismatch");
        dst.data_mut().copy_from_slice(src.data());
    }
    Ok(())
}

/// Transplant a progress-model torso into policy parameters. The progress
/// torso's first conv consumes a fused pair of observations; only its
/// second half — the filters reading the *current* state — maps onto the
/// policy torso's single-observation input. Deeper layers copy unchanged.
pub fn transplant_progress_torso(
    params: &mut ParamStore<Real>,
    ckpt: &Checkpoint,
) -> Result<(), CkptError> {
    let src = ckpt.get("torso.c1.w")?;
    let dst = params.get_mut("torso.c1.w");
    let (out_ch, dst_cols) = (dst.shape()[0], dst.shape()[1]);
    assert_eq!(
        src.shape(),
        &[out_ch, 2 * dst_cols],
        "fused conv must have exactly twice the single-state input columns"
    );
    for co in 0..out_ch {
        let row = &src.row(co)[dst_cols..2 * dst_cols];
        dst.data_mut()[co * dst_cols..(co + 1) * dst_cols].copy_from_slice(row);
    }
    for name in ["torso.c1.b", "torso.c2.w", "torso.c2.b", "torso.fc.w", "torso.fc.b"] {
        let src = ckpt.get(name)?;
        let dst = params.get_mut(name);
        assert_eq!(src.shape(), dst.shape(), "torso parameter `{name}` shape mismatch");
        dst.data_mut().copy_from_slice(src.data());
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct AgentConfig {
    pub arm: Arm,
    /// Discount for online returns.
    pub gamma_rl: f64,
    /// Steps per rollout window (per environment).
    pub rollout_len: usize,
    /// Parallel environment instances.
    pub n_envs: usize,
    /// Entropy bonus coefficient.
    pub entropy_coef: f64,
    /// Value-loss coefficient.
    pub value_coef: f64,
    /// Adam learning rate.
    pub lr: f64,
    /// Shaping weight λ.
    pub lambda: f64,
    /// Shaping offset k: bonus compares the state k steps back.
    pub k: usize,
    /// Divide shaped rewards by their running standard deviation.
    pub normalize_shaping: bool,
    /// Total environment steps to train for.
    pub budget: usize,
    /// Environment steps between evaluations.
    pub eval_interval: usize,
    /// Episodes per evaluation.
    pub eval_episodes: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            arm: Arm::Base,
            gamma_rl: 0.99,
            rollout_len: 64,
            n_envs: 8,
            entropy_coef: 0.01,
            value_coef: 0.5,
            lr: 3e-4,
            lambda: 0.1,
            k: 8,
            normalize_shaping: true,
            budget: 300_000,
            eval_interval: 10_000,
            eval_episodes: 20,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) {
        assert!(self.gamma_rl > 0.0 && self.gamma_rl <= 1.0, "discount must be in (0, 1]");
        assert!(self.rollout_len > 0, "rollout length must be positive");
        assert!(self.n_envs > 0, "need at least one environment");
        assert!(self.lr > 0.0, "learning rate must be positive");
        assert!(self.lambda >= 0.0, "shaping weight must be non-negative");
        assert!(self.k >= 1, "shaping offset must be at least 1");
        assert!(self.budget > 0, "training budget must be positive");
        assert!(self.eval_interval > 0, "eval interval must be positive");
        assert!(self.eval_episodes > 0, "need at least one eval episode");
    }
}

/// One rollout window of experience for all environments, plus the per-env
/// ring buffers that let shaping look `k` steps back without crossing
/// episode boundaries (rings persist across windows and reset on done).
pub struct RolloutBuffer {
    pub n_envs: usize,
    pub k: usize,
    pub obs: Vec<Vec<Observation>>,
    pub actions: Vec<Vec<usize>>,
    pub raw: Vec<Vec<f64>>,
    pub shaped: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub log_probs: Vec<Vec<f64>>,
    pub dones: Vec<Vec<bool>>,
    /// `s_{t−k}` for steps whose episode age is at least `k`.
    pub shaping_prev: Vec<Vec<Option<Observation>>>,
    rings: Vec<VecDeque<Observation>>,
}

impl RolloutBuffer {
    pub fn new(n_envs: usize, k: usize) -> RolloutBuffer {
        assert!(k >= 1, "shaping offset must be at least 1");
        RolloutBuffer {
            n_envs,
            k,
            obs: vec![Vec::new(); n_envs],
            actions: vec![Vec::new(); n_envs],
            raw: vec![Vec::new(); n_envs],
            shaped: vec![Vec::new(); n_envs],
            values: vec![Vec::new(); n_envs],
            log_probs: vec![Vec::new(); n_envs],
            dones: vec![Vec::new(); n_envs],
            shaping_prev: vec![Vec::new(); n_envs],
            rings: vec![VecDeque::new(); n_envs],
        }
    }

    /// Drop the previous window's steps; episode rings carry over.
    pub fn begin_window(&mut self) {
        for env in 0..self.n_envs {
            self.obs[env].clear();
            self.actions[env].clear();
            self.raw[env].clear();
            self.shaped[env].clear();
            self.values[env].clear();
            self.log_probs[env].clear();
            self.dones[env].clear();
            self.shaping_prev[env].clear();
        }
    }

    /// Record one transition. `obs` is the state the action was taken in.
    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        env: usize,
        obs: Observation,
        action: usize,
        value: f64,
        log_prob: f64,
        raw_reward: f64,
        done: bool,
    ) {
        let ring = &mut self.rings[env];
        ring.push_back(obs.clone());
        while ring.len() > self.k + 1 {
            ring.pop_front();
        }
        // Front of a full ring is exactly s_{t−k}.
        let prev = if ring.len() == self.k + 1 { ring.front().cloned() } else { None };
        self.shaping_prev[env].push(prev);
        self.obs[env].push(obs);
        self.actions[env].push(action);
        self.raw[env].push(raw_reward);
        self.shaped[env].push(raw_reward);
        self.values[env].push(value);
        self.log_probs[env].push(log_prob);
        self.dones[env].push(done);
        if done {
            ring.clear();
        }
    }

    /// Steps recorded per environment this window.
    pub fn window_len(&self) -> usize {
        self.obs[0].len()
    }
}

/// Add `λ·g(s_{t−k}, s_t)` to every step whose episode age allows it, in
/// one batched forward pass. Steps early in an episode keep the raw reward.
pub fn shape_rewards(
    buffer: &mut RolloutBuffer,
    net: &ProgressNet,
    params: &ParamStore<Real>,
    lambda: f64,
) {
    if lambda == 0.0 {
        return;
    }
    let mut where_at = Vec::new();
    let mut prev = Vec::new();
    let mut now = Vec::new();
    for env in 0..buffer.n_envs {
        for t in 0..buffer.obs[env].len() {
            if let Some(p) = &buffer.shaping_prev[env][t] {
                where_at.push((env, t));
                prev.push(p);
                now.push(&buffer.obs[env][t]);
            }
        }
    }
    if prev.is_empty() {
        return;
    }
    let bonus = progress_reward_batch(net, params, &prev, &now);
    for ((env, t), g) in where_at.into_iter().zip(bonus) {
        buffer.shaped[env][t] = buffer.raw[env][t] + lambda * g;
    }
}

/// n-step discounted returns with a value bootstrap at the window edge,
/// truncated at done flags, and batch-normalized advantages
/// (mean 0, std 1, eps 1e-8). Flattened environment-major: index
/// `env * window_len + t`.
pub fn compute_returns_advantages(
    rewards: &[Vec<f64>],
    values: &[Vec<f64>],
    dones: &[Vec<bool>],
    bootstrap: &[f64],
    gamma: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n_envs = rewards.len();
    let t_len = rewards[0].len();
    let mut returns = vec![0.0; n_envs * t_len];
    for env in 0..n_envs {
        let mut acc = bootstrap[env];
        for t in (0..t_len).rev() {
            if dones[env][t] {
                acc = 0.0;
            }
            acc = rewards[env][t] + gamma * acc;
            returns[env * t_len + t] = acc;
        }
    }
    let mut advantages = vec![0.0; n_envs * t_len];
    for env in 0..n_envs {
        for t in 0..t_len {
            advantages[env * t_len + t] = returns[env * t_len + t] - values[env][t];
        }
    }
    let n = advantages.len() as f64;
    let mean = advantages.iter().sum::<f64>() / n;
    let var = advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in advantages.iter_mut() {
        *a = (*a - mean) / (std + 1e-8);
    }
    (returns, advantages)
}

/// One update's worth of flattened experience.
pub struct UpdateBatch<'a> {
    pub obs: Vec<&'a Observation>,
    pub actions: &'a [usize],
    pub returns: &'a [f64],
    pub advantages: &'a [f64],
}

#[derive(Clone, Copy, Debug)]
pub struct LossStats {
    pub total: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

/// Actor-critic loss and gradients:
/// `−mean(logπ(a|s)·adv) + value_coef·mean((V−R)²) − ent_coef·mean(H(π))`.
/// Advantages are treated as constants. When the torso is frozen in
/// `params`, its backward pass is skipped entirely.
pub fn a2c_loss(
    net: &PolicyValueNet,
    params: &ParamStore<Real>,
    batch: &UpdateBatch<'_>,
    cfg: &AgentConfig,
) -> (LossStats, Grads<Real>) {
    let b = batch.obs.len();
    assert!(b > 0, "empty update batch");
    assert_eq!(batch.actions.len(), b);
    assert_eq!(batch.returns.len(), b);
    assert_eq!(batch.advantages.len(), b);

    let (f, tape_torso) = forward(&net.torso, params, &encode_batch(&batch.obs));
    let (h, tape_trunk) = forward(&net.trunk, params, &f);
    let (logits, tape_policy) = forward(&net.policy, params, &h);
    let (v, tape_value) = forward(&net.value, params, &h);

    let probs = softmax_rows(&logits);
    let logp = log_softmax_rows(&logits);
    let ent = softmax_entropy_rows(&logits);

    let bf = b as f64;
    let mut policy_loss = 0.0;
    let mut value_loss = 0.0;
    let mut entropy = 0.0;
    let mut dlogits = NdArray::zeros(&[b, N_ACTIONS]);
    let mut dv = NdArray::zeros(&[b, 1]);
    for i in 0..b {
        let a = batch.actions[i];
        let adv = batch.advantages[i];
        policy_loss -= logp.data()[i * N_ACTIONS + a] * adv;
        let resid = v.data()[i] - batch.returns[i];
        value_loss += resid * resid;
        entropy += ent[i];
        for j in 0..N_ACTIONS {
            let p = probs.data()[i * N_ACTIONS + j];
            let lp = logp.data()[i * N_ACTIONS + j];
            let indicator = if j == a { 1.0 } else { 0.0 };
            // Policy-gradient term plus the entropy bonus gradient
            // d(−H)/dlogit = p·(ln p + H).
            dlogits.data_mut()[i * N_ACTIONS + j] =
                (adv * (p - indicator) + cfg.entropy_coef * p * (lp + ent[i])) / bf;
        }
        dv.data_mut()[i] = 2.0 * cfg.value_coef * resid / bf;
    }
    policy_loss /= bf;
    value_loss /= bf;
    entropy /= bf;
    let total = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy;

    let mut grads = Grads::new();
    let dh_policy = backward(&net.policy, params, &tape_policy, &dlogits, &mut grads);
    let dh_value = backward(&net.value, params, &tape_value, &dv, &mut grads);
    let mut dh = dh_policy;
    for (d, s) in dh.data_mut().iter_mut().zip(dh_value.data()) {
        *d += s;
    }
    let df = backward(&net.trunk, params, &tape_trunk, &dh, &mut grads);
    if !params.is_frozen("torso.fc.w") {
        backward(&net.torso, params, &tape_torso, &df, &mut grads);
    }
    (LossStats { total, policy_loss, value_loss, entropy }, grads)
}

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("arm `{arm}` requires a {which} checkpoint")]
    MissingCheckpoint { arm: Arm, which: &'static str },
    #[error(transparent)]
    Checkpoint(#[from] CkptError),
    #[error(
        "training diverged at {env_steps} env steps: policy_loss {policy_loss}, value_loss \
         {value_loss}, entropy {entropy}; batch: adv mean {adv_mean}, adv std {adv_std}, \
         return mean {ret_mean}"
    )]
    Diverged {
        env_steps: usize,
        policy_loss: f64,
        value_loss: f64,
        entropy: f64,
        adv_mean: f64,
        adv_std: f64,
        ret_mean: f64,
    },
    #[error("training diverged at {env_steps} env steps: non-finite gradient for `{name}`")]
    BadGradient { env_steps: usize, name: String },
}

/// Loss computation plus one optimizer step. `env_steps` labels errors.
pub fn a2c_update(
    net: &PolicyValueNet,
    params: &mut ParamStore<Real>,
    batch: &UpdateBatch<'_>,
    cfg: &AgentConfig,
    adam: &AdamConfig<Real>,
    env_steps: usize,
) -> Result<LossStats, AgentError> {
    let (stats, grads) = a2c_loss(net, params, batch, cfg);
    if !stats.total.is_finite() {
        let n = batch.advantages.len() as f64;
        let adv_mean = batch.advantages.iter().sum::<f64>() / n;
        let adv_var =
            batch.advantages.iter().map(|a| (a - adv_mean) * (a - adv_mean)).sum::<f64>() / n;
        return Err(AgentError::Diverged {
            env_steps,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            adv_mean,
            adv_std: adv_var.sqrt(),
            ret_mean: batch.returns.iter().sum::<f64>() / n,
        });
    }
    match params.adam_step(&grads, adam) {
        Ok(()) => Ok(stats),
        Err(OptimError::NonFiniteGrad { name }) => Err(AgentError::BadGradient { env_steps, name }),
        Err(other) => panic!("update batch covers every trainable parameter: {other}"),
    }
}

/// One metrics row, emitted per evaluation.
#[derive(Clone, Copy, Debug)]
pub struct RunLogRow {
    pub env_steps: usize,
    pub eval_mean_return: f64,
    pub eval_std_return: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub shaped_reward_mean: f64,
}

/// Render run rows as CSV (stable full-precision formatting).
pub fn run_rows_to_csv(rows: &[RunLogRow]) -> String {
    let mut csv = String::from(
        "env_steps,eval_mean_return,eval_std_return,policy_loss,value_loss,entropy,shaped_reward_mean\n",
    );
    for r in rows {
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

/// Play `n_episodes` fresh episodes with the sampling policy and return the
/// raw (unshaped) episode returns. Episodes run in lockstep batches so the
/// conv forward passes amortize.
pub fn eval_policy(
    net: &PolicyValueNet,
    params: &ParamStore<Real>,
    config: &DungeonConfig,
    task: Task,
    n_episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut states = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let cfg = DungeonConfig { seed: rng.gen(), ..config.clone() };
        let (state, obs) = GameState::reset(&cfg, task);
        states.push((state, obs, 0.0f64, false));
    }
    loop {
        let live: Vec<usize> =
            (0..n_episodes).filter(|&i| !states[i].3).collect();
        if live.is_empty() {
            break;
        }
        let obs: Vec<&Observation> = live.iter().map(|&i| &states[i].1).collect();
        let (logits, _) = net.policy_value(params, &obs);
        let probs = softmax_rows(&logits);
        for (row, &i) in live.iter().enumerate() {
            let a = sample_action(probs.row(row), rng);
            let step = states[i].0.step(Action::from_index(a));
            states[i].2 += step.reward;
            states[i].1 = step.observation;
            states[i].3 = step.done;
        }
    }
    states.into_iter().map(|(_, _, ret, _)| ret).collect()
}

/// Inverse-CDF sample from one softmax row.
fn sample_action(probs: &[Real], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Outcome of an online run: final parameters and the metrics log.
pub struct TrainOutcome {
    pub params: ParamStore<Real>,
    pub rows: Vec<RunLogRow>,
}

/// Train one arm online. Checkpoints are consumed according to the arm:
/// encoder torsos are imported (frozen unless the arm fine-tunes), the
/// progress model drives shaping, and `pm_torso_init` transplants the
/// progress torso instead. Metrics rows appear every `eval_interval` env
/// steps (plus a pre-training baseline and a final row), reporting raw
/// evaluation returns.
pub fn train_online(
    config: &DungeonConfig,
    task: Task,
    cfg: &AgentConfig,
    encoder: Option<&Checkpoint>,
    progress: Option<&Checkpoint>,
    seed: u64,
) -> Result<TrainOutcome, AgentError> {
    cfg.validate();
    if cfg.arm.needs_encoder() && encoder.is_none() {
        return Err(AgentError::MissingCheckpoint { arm: cfg.arm, which: "encoder" });
    }
    if cfg.arm.needs_progress() && progress.is_none() {
        return Err(AgentError::MissingCheckpoint { arm: cfg.arm, which: "progress" });
    }

    let net = PolicyValueNet::new(config.height, config.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = net.init_params(&mut rng);
    match cfg.arm {
        Arm::Base | Arm::Ele => {}
        Arm::Pretrain | Arm::PretrainEle | Arm::PretrainFinetune => {
            import_encoder_torso(&mut params, encoder.unwrap())?;
        }
        Arm::PmTorsoInit => {
            transplant_progress_torso(&mut params, progress.unwrap())?;
        }
    }
    if cfg.arm.freezes_torso() {
        params.freeze_prefix("torso.");
    }
    let shaping = if cfg.arm.shapes_rewards() {
        let ckpt = progress.unwrap();
        let pnet = ProgressNet::new(config.height, config.width);
        Some((pnet, ckpt.into_store::<Real>()))
    } else {
        None
    };

    let adam = AdamConfig::with_lr(cfg.lr);
    let mut env_seed_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_e9);
    let reset_env = |env_seed_rng: &mut ChaCha8Rng| {
        let c = DungeonConfig { seed: env_seed_rng.gen(), ..config.clone() };
        GameState::reset(&c, task)
    };
    let mut envs: Vec<(GameState, Observation)> =
        (0..cfg.n_envs).map(|_| reset_env(&mut env_seed_rng)).collect();

    let mut buffer = RolloutBuffer::new(cfg.n_envs, cfg.k);
    let mut shaped_stats = Running::default();
    let mut rows = Vec::new();
    let mut env_steps = 0usize;
    let mut eval_round = 0u64;

    let run_eval = |env_steps: usize,
                        params: &ParamStore<Real>,
                        last: Option<&LossStats>,
                        shaped_mean: f64,
                        eval_round: &mut u64|
     -> RunLogRow {
        let mut eval_rng =
            ChaCha8Rng::seed_from_u64(seed ^ 0xe7a1_0000u64.wrapping_add(*eval_round));
        *eval_round += 1;
        let returns = eval_policy(&net, params, config, task, cfg.eval_episodes, &mut eval_rng);
        let mean = crate::stats::mean(&returns);
        let std = if returns.len() > 1 { crate::stats::std_dev(&returns) } else { 0.0 };
        RunLogRow {
            env_steps,
            eval_mean_return: mean,
            eval_std_return: std,
            policy_loss: last.map_or(0.0, |s| s.policy_loss),
            value_loss: last.map_or(0.0, |s| s.value_loss),
            entropy: last.map_or(0.0, |s| s.entropy),
            shaped_reward_mean: shaped_mean,
        }
    };

    rows.push(run_eval(0, &params, None, 0.0, &mut eval_round));

    while env_steps < cfg.budget {
        buffer.begin_window();
        for _ in 0..cfg.rollout_len {
            let obs_refs: Vec<&Observation> = envs.iter().map(|(_, o)| o).collect();
            let (logits, values) = net.policy_value(&params, &obs_refs);
            let probs = softmax_rows(&logits);
            for env in 0..cfg.n_envs {
                let a = sample_action(probs.row(env), &mut rng);
                let log_prob = probs.row(env)[a].ln();
                let obs_before = envs[env].1.clone();
                let step = envs[env].0.step(Action::from_index(a));
                buffer.push(env, obs_before, a, values[env], log_prob, step.reward, step.done);
                if step.done {
                    envs[env] = reset_env(&mut env_seed_rng);
                } else {
                    envs[env].1 = step.observation;
                }
            }
        }
        env_steps += cfg.n_envs * cfg.rollout_len;

        if let Some((pnet, pparams)) = &shaping {
            shape_rewards(&mut buffer, pnet, pparams, cfg.lambda);
        }
        let shaped_flat: Vec<f64> = buffer.shaped.iter().flatten().copied().collect();
        let shaped_mean = shaped_flat.iter().sum::<f64>() / shaped_flat.len() as f64;
        if cfg.normalize_shaping {
            for &v in &shaped_flat {
                shaped_stats.push(v);
            }
            let div = shaped_stats.std().max(1e-4);
            for env_shaped in buffer.shaped.iter_mut() {
                for v in env_shaped.iter_mut() {
                    *v /= div;
                }
            }
        }

        let bootstrap_refs: Vec<&Observation> = envs.iter().map(|(_, o)| o).collect();
        let (_, bootstrap) = net.policy_value(&params, &bootstrap_refs);
        let (returns, advantages) = compute_returns_advantages(
            &buffer.shaped,
            &buffer.values,
            &buffer.dones,
            &bootstrap,
            cfg.gamma_rl,
        );
        let t_len = buffer.window_len();
        let mut obs_flat = Vec::with_capacity(cfg.n_envs * t_len);
        let mut actions_flat = Vec::with_capacity(cfg.n_envs * t_len);
        for env in 0..cfg.n_envs {
            for t in 0..t_len {
                obs_flat.push(&buffer.obs[env][t]);
                actions_flat.push(buffer.actions[env][t]);
            }
        }
        let batch = UpdateBatch {
            obs: obs_flat,
            actions: &actions_flat,
            returns: &returns,
            advantages: &advantages,
        };
        let stats = a2c_update(&net, &mut params, &batch, cfg, &adam, env_steps)?;

        let prev_steps = env_steps - cfg.n_envs * cfg.rollout_len;
        let crossed = env_steps / cfg.eval_interval > prev_steps / cfg.eval_interval;
        if crossed || env_steps >= cfg.budget {
            rows.push(run_eval(env_steps, &params, Some(&stats), shaped_mean, &mut eval_round));
        }
    }

    Ok(TrainOutcome { params, rows })
}
