//! Exact tabular cross-checks for the learning machinery.
//!
//! Small, fully enumerable MDPs where values, discounted visitation
//! mixtures, and contrastive score targets all have closed forms. Three
//! families of identity checks live here:
//!
//! 1. `value_direct` vs `value_via_occupancy`: the state value equals the
//!    expected reward under the geometric mixture of k-step transition
//!    distributions, rescaled by the geometric-series mass.
//! 2. `nce_ratio_check`: the in-batch contrastive objective, trained on
//!    trajectories from a known chain, recovers scores that rank like
//!    `ln ρ(s'|s) − ln m(s')` — the log visitation-over-marginal ratio.
//! 3. Finite-difference audits of every hand-written gradient.
//!
//! Everything here is pure computation on `f64` tables.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::demos::OffsetSampler;
use crate::encode::encode_batch;
use crate::env::{Observation, TILE_AGENT, TILE_FLOOR};
use crate::gradcheck::{clear_relu_kinks, finite_diff_check};
use crate::params::AdamConfig;
use crate::pretrain::{contrastive_batch_loss, score_matrix, EncoderNet};
use crate::stats::spearman;
use crate::Real;

/// Finite MDP with a fixed stochastic policy baked in.
///
/// `transition` is `[s, a, s']` row-major, `reward` is `[s, a]`, and
/// `policy` is `[s, a]`. `horizon` of `None` means infinite horizon
/// (requires `gamma < 1`); `Some(h)` means exactly `h` reward-collecting
/// steps.
#[derive(Clone, Debug)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub transition: Vec<f64>,
    pub reward: Vec<f64>,
    pub gamma: f64,
    pub horizon: Option<usize>,
    pub policy: Vec<f64>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OracleError {
    #[error("transition row for state {s}, action {a} sums to {sum}, want 1 within 1e-12")]
    BadTransition { s: usize, a: usize, sum: f64 },
    #[error("negative probability {p} in transition row for state {s}, action {a}")]
    NegativeProbability { s: usize, a: usize, p: f64 },
    #[error("policy row for state {s} sums to {sum}, want 1 within 1e-12")]
    BadPolicy { s: usize, sum: f64 },
    #[error("discount must lie in [0, 1], got {gamma}")]
    BadDiscount { gamma: f64 },
    #[error("infinite-horizon values diverge at discount {gamma}: the Bellman system is singular")]
    SingularSystem { gamma: f64 },
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("linear system is singular at column {col} (pivot {pivot:e})")]
    Singular { col: usize, pivot: f64 },
}

impl TabularMdp {
    pub fn p(&self, s: usize, a: usize, sp: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + sp]
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        let n = self.n_states;
        assert!(n > 0, "need at least one state");
        assert!(self.n_actions > 0, "need at least one action");
        assert_eq!(self.transition.len(), n * self.n_actions * n, "transition tensor shape");
        assert_eq!(self.reward.len(), n * self.n_actions, "reward table shape");
        assert_eq!(self.policy.len(), n * self.n_actions, "policy table shape");
        for s in 0..n {
            for a in 0..self.n_actions {
                let mut sum = 0.0;
                for sp in 0..n {
                    let p = self.p(s, a, sp);
                    if p < 0.0 {
                        return Err(OracleError::NegativeProbability { s, a, p });
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(OracleError::BadTransition { s, a, sum });
                }
            }
            let psum: f64 = (0..self.n_actions).map(|a| self.policy[s * self.n_actions + a]).sum();
            if (psum - 1.0).abs() > 1e-12
                || (0..self.n_actions).any(|a| self.policy[s * self.n_actions + a] < 0.0)
            {
                return Err(OracleError::BadPolicy { s, sum: psum });
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(OracleError::BadDiscount { gamma: self.gamma });
        }
        if self.gamma == 1.0 && self.horizon.is_none() {
            return Err(OracleError::SingularSystem { gamma: self.gamma });
        }
        if self.horizon == Some(0) {
            return Err(OracleError::ZeroHorizon);
        }
        Ok(())
    }

    /// Policy-averaged transition matrix `P_π(s'|s)`, `[s, s']` row-major.
    pub fn policy_transition(&self) -> Vec<f64> {
        let n = self.n_states;
        let mut m = vec![0.0; n * n];
        for s in 0..n {
            for a in 0..self.n_actions {
                let w = self.policy[s * self.n_actions + a];
                for sp in 0..n {
                    m[s * n + sp] += w * self.p(s, a, sp);
                }
            }
        }
        m
    }

    /// Policy-averaged reward `r_π(s)`.
    pub fn policy_reward(&self) -> Vec<f64> {
        (0..self.n_states)
            .map(|s| {
                (0..self.n_actions)
                    .map(|a| self.policy[s * self.n_actions + a] * self.reward[s * self.n_actions + a])
                    .sum()
            })
            .collect()
    }
}

/// Solve `A x = b` by Gaussian elimination with partial pivoting.
/// `a` is `n x n` row-major; both buffers are consumed.
pub fn solve_linear(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Result<Vec<f64>, OracleError> {
    assert_eq!(a.len(), n * n);
    assert_eq!(b.len(), n);
    for col in 0..n {
        let mut pivot_row = col;
        for row in col + 1..n {
            if a[row * n + col].abs() > a[pivot_row * n + col].abs() {
                pivot_row = row;
            }
        }
        let pivot = a[pivot_row * n + col];
        if pivot.abs() < 1e-12 {
            return Err(OracleError::Singular { col, pivot });
        }
        if pivot_row != col {
            for j in 0..n {
                a.swap(col * n + j, pivot_row * n + j);
            }
            b.swap(col, pivot_row);
        }
        for row in col + 1..n {
            let factor = a[row * n + col] / a[col * n + col];
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                a[row * n + j] -= factor * a[col * n + j];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for j in row + 1..n {
            acc -= a[row * n + j] * x[j];
        }
        x[row] = acc / a[row * n + row];
    }
    Ok(x)
}

fn mat_vec(m: &[f64], x: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|i| (0..n).map(|j| m[i * n + j] * x[j]).sum()).collect()
}

fn mat_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

/// State values and action values of the fixed policy, computed the
/// classical way: the linear Bellman system for infinite horizon, backward
/// induction for finite horizon. `Q = r + γ P V_next` where `V_next` is the
/// value with one fewer step remaining (equal to `V` in the infinite case).
pub fn value_direct(mdp: &TabularMdp) -> Result<(Vec<f64>, Vec<f64>), OracleError> {
    mdp.validate()?;
    let n = mdp.n_states;
    let p_pi = mdp.policy_transition();
    let r_pi = mdp.policy_reward();
    let (v, v_next) = match mdp.horizon {
        None => {
            // (I − γ P_π) V = r_π
            let mut a = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    a[i * n + j] = f64::from(i == j) - mdp.gamma * p_pi[i * n + j];
                }
            }
            let v = solve_linear(a, r_pi.clone(), n)?;
            (v.clone(), v)
        }
        Some(h) => {
            let mut v = vec![0.0; n];
            let mut v_prev = vec![0.0; n];
            for _ in 0..h {
                v_prev = v;
                let pv = mat_vec(&p_pi, &v_prev, n);
                v = (0..n).map(|s| r_pi[s] + mdp.gamma * pv[s]).collect();
            }
            (v, v_prev)
        }
    };
    let mut q = vec![0.0; n * mdp.n_actions];
    for s in 0..n {
        for a in 0..mdp.n_actions {
            let future: f64 = (0..n).map(|sp| mdp.p(s, a, sp) * v_next[sp]).sum();
            q[s * mdp.n_actions + a] = mdp.reward[s * mdp.n_actions + a] + mdp.gamma * future;
        }
    }
    Ok((v, q))
}

/// Discounted state-visitation mixture `ρ^π(s'|s)`: the distribution of a
/// state drawn `Δt ∼ Geometric(1−γ)` steps ahead, **including** `Δt = 0`.
/// Infinite horizon gives the closed form `(1−γ)(I − γP_π)^{-1}`; a finite
/// horizon `h` truncates the mixture at `Δt = h−1` and renormalizes. Rows
/// are probability distributions.
pub fn occupancy(mdp: &TabularMdp) -> Result<Vec<f64>, OracleError> {
    mdp.validate()?;
    let n = mdp.n_states;
    let p_pi = mdp.policy_transition();
    match mdp.horizon {
        None => {
            // Solve (I − γP_π)ᵀ column systems: ρ = (1−γ)(I − γP_π)^{-1}.
            let mut a = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    a[i * n + j] = f64::from(i == j) - mdp.gamma * p_pi[i * n + j];
                }
            }
            let mut rho = vec![0.0; n * n];
            for col in 0..n {
                let mut e = vec![0.0; n];
                e[col] = 1.0 - mdp.gamma;
                let x = solve_linear(a.clone(), e, n)?;
                for row in 0..n {
                    rho[row * n + col] = x[row];
                }
            }
            Ok(rho)
        }
        Some(h) => {
            let weights = truncated_geometric_weights(mdp.gamma, h, 0);
            Ok(weighted_power_mixture(&p_pi, &weights, n))
        }
    }
}

/// Forward visitation `ρ₊^π(s'|s)` over strictly positive offsets
/// `Δt ∈ [1, max_offset]`, weighted `γ^{Δt−1}` and normalized. This is the
/// distribution the contrastive sampler draws positives from.
pub fn future_visitation(p_pi: &[f64], n: usize, gamma: f64, max_offset: usize) -> Vec<f64> {
    assert!(max_offset >= 1, "need at least one forward step");
    let weights = truncated_geometric_weights(gamma, max_offset, 1);
    weighted_power_mixture(p_pi, &weights, n)
}

/// Normalized weights `γ^{Δt−first}` for `Δt = first..first+count`, i.e. a
/// truncated geometric pmf (uniform in the γ → 1 limit).
fn truncated_geometric_weights(gamma: f64, count: usize, first: usize) -> Vec<(usize, f64)> {
    let mass: f64 = if (gamma - 1.0).abs() < 1e-15 {
        count as f64
    } else {
        (1.0 - gamma.powi(count as i32)) / (1.0 - gamma)
    };
    (0..count).map(|i| (first + i, gamma.powi(i as i32) / mass)).collect()
}

/// `Σ_Δ w_Δ · P^Δ` for the given `(offset, weight)` list.
fn weighted_power_mixture(p_pi: &[f64], weights: &[(usize, f64)], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    let mut power = identity(n);
    let mut at = 0usize;
    for &(offset, w) in weights {
        while at < offset {
            power = mat_mul(&power, p_pi, n);
            at += 1;
        }
        for i in 0..n * n {
            out[i] += w * power[i];
        }
    }
    out
}

/// State values recovered from the visitation mixture: the expected
/// one-step reward under `ρ^π(·|s)`, rescaled by the discounted mass
/// `Σ γ^Δt` the mixture was normalized by. Must agree with
/// [`value_direct`] — that agreement is the identity this module exists
/// to check.
pub fn value_via_occupancy(mdp: &TabularMdp) -> Result<Vec<f64>, OracleError> {
    let rho = occupancy(mdp)?;
    let n = mdp.n_states;
    let r_pi = mdp.policy_reward();
    let mass = match mdp.horizon {
        None => 1.0 / (1.0 - mdp.gamma),
        Some(h) => {
            if (mdp.gamma - 1.0).abs() < 1e-15 {
                h as f64
            } else {
                (1.0 - mdp.gamma.powi(h as i32)) / (1.0 - mdp.gamma)
            }
        }
    };
    Ok((0..n)
        .map(|s| {
            let expected: f64 = (0..n).map(|sp| rho[s * n + sp] * r_pi[sp]).sum();
            expected * mass
        })
        .collect())
}

/// A uniformly random MDP: every transition row and policy row is a
/// normalized positive vector, rewards are uniform in [−1, 1].
pub fn random_mdp(
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    horizon: Option<usize>,
    rng: &mut impl Rng,
) -> TabularMdp {
    let mut normalized_row = |k: usize| -> Vec<f64> {
        let raw: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() + 1e-3).collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    };
    let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        transition.extend(normalized_row(n_states));
    }
    let mut policy = Vec::with_capacity(n_states * n_actions);
    for _ in 0..n_states {
        policy.extend(normalized_row(n_actions));
    }
    let reward: Vec<f64> = (0..n_states * n_actions).map(|_| rng.gen_range(-1.0..1.0)).collect();
    TabularMdp { n_states, n_actions, transition, reward, gamma, horizon, policy }
}

// ---------------------------------------------------------------------------
// Contrastive ratio check
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct NceCheckConfig {
    /// Discount of the geometric positive-offset distribution.
    pub gamma_c: f64,
    /// Largest positive offset sampled (and the truncation of the analytic
    /// mixture).
    pub max_offset: usize,
    /// Steps per rollout.
    pub rollout_len: usize,
    /// Number of rollouts.
    pub n_rollouts: usize,
    /// Contrastive optimizer steps.
    pub train_steps: usize,
    /// Pairs per batch.
    pub batch_size: usize,
    /// Adam learning rate.
    pub lr: f64,
}

impl Default for NceCheckConfig {
    fn default() -> Self {
        NceCheckConfig {
            gamma_c: 0.7,
            max_offset: 12,
            rollout_len: 160,
            n_rollouts: 40,
            train_steps: 1200,
            batch_size: 32,
            lr: 2e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NceReport {
    /// Mean per-anchor Spearman correlation between learned scores and the
    /// analytic log-ratio, over anchors where the ratio varies. `None` when
    /// every anchor was degenerate.
    pub mean_spearman: Option<f64>,
    /// Per-anchor correlations (`None` where the analytic target is
    /// constant, so ranks are undefined).
    pub per_anchor: Vec<Option<f64>>,
    /// States excluded from ranking because the positive marginal gives
    /// them zero mass (unreachable as positives).
    pub excluded_states: usize,
    /// True when no anchor produced a usable correlation — e.g. uniform
    /// transitions make every log-ratio identical.
    pub degenerate: bool,
    /// The same mean correlation measured before any training (random
    /// scorer): a permutation-null reference.
    pub initial_spearman: Option<f64>,
}

/// One-hot style observation for a tabular state: a 1-row grid with the
/// agent marker at the state's index.
pub fn tabular_observation(state: usize, n_states: usize) -> Observation {
    let mut tiles = vec![TILE_FLOOR; n_states];
    tiles[state] = TILE_AGENT;
    Observation { tiles, width: n_states, height: 1, status: [0.0, 0.0, 0.0] }
}

/// Train the exact in-batch contrastive loss on rollouts from a small MDP
/// and compare the learned score table against the analytic target
/// `ln ρ₊(s'|s) − ln m(s')`, where `ρ₊` is the truncated geometric forward
/// visitation and `m` the matching positive marginal. The comparison is
/// per-anchor Spearman rank correlation: the contrastive optimum is the
/// ratio only up to an additive per-anchor constant, so ranks are the
/// identifiable part.
pub fn nce_ratio_check(
    mdp: &TabularMdp,
    cfg: &NceCheckConfig,
    seed: u64,
) -> Result<NceReport, OracleError> {
    mdp.validate()?;
    let n = mdp.n_states;
    assert!(n >= 2 && n <= 8, "ratio check is for small, enumerable chains");
    assert!(cfg.max_offset >= 1 && cfg.max_offset < cfg.rollout_len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Roll trajectories under the fixed policy.
    let p_pi = mdp.policy_transition();
    let sample_row = |row: &[f64], rng: &mut ChaCha8Rng| -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        row.len() - 1
    };
    let mut trajectories = Vec::with_capacity(cfg.n_rollouts);
    for _ in 0..cfg.n_rollouts {
        let mut s = rng.gen_range(0..n);
        let mut traj = Vec::with_capacity(cfg.rollout_len + 1);
        traj.push(s);
        for _ in 0..cfg.rollout_len {
            s = sample_row(&p_pi[s * n..(s + 1) * n], &mut rng);
            traj.push(s);
        }
        trajectories.push(traj);
    }

    // Analytic target. The offset is drawn first, independent of the state,
    // so the conditional is exactly the weighted power mixture; the
    // marginal averages the per-(t, Δt) positive distributions under the
    // same sampling scheme.
    let rho = future_visitation(&p_pi, n, cfg.gamma_c, cfg.max_offset);
    let weights = truncated_geometric_weights(cfg.gamma_c, cfg.max_offset, 1);
    let l = cfg.rollout_len;
    let mut dist_t = Vec::with_capacity(l + 1);
    dist_t.push(vec![1.0 / n as f64; n]);
    for t in 1..=l {
        let prev = &dist_t[t - 1];
        let mut next = vec![0.0; n];
        for s in 0..n {
            if prev[s] == 0.0 {
                continue;
            }
            for sp in 0..n {
                next[sp] += prev[s] * p_pi[s * n + sp];
            }
        }
        dist_t.push(next);
    }
    let mut marginal = vec![0.0; n];
    for &(dt, w) in &weights {
        let n_starts = l - dt + 1;
        for t in 0..n_starts {
            for sp in 0..n {
                marginal[sp] += w * dist_t[t + dt][sp] / n_starts as f64;
            }
        }
    }
    let included: Vec<usize> = (0..n).filter(|&sp| marginal[sp] > 1e-12).collect();
    let excluded_states = n - included.len();
    let ratio_row = |s: usize| -> Vec<f64> {
        included.iter().map(|&sp| rho[s * n + sp].ln() - marginal[sp].ln()).collect()
    };

    // The learned scorer: the real encoder on one-hot style observations.
    let obs: Vec<Observation> = (0..n).map(|s| tabular_observation(s, n)).collect();
    let obs_refs: Vec<&Observation> = obs.iter().collect();
    let net = EncoderNet::new(1, n);
    let mut params = net.init_params(&mut rng);

    let correlate = |scores: &crate::nd::NdArray<Real>| -> (Vec<Option<f64>>, Option<f64>) {
        let per_anchor: Vec<Option<f64>> = (0..n)
            .map(|s| {
                let target = ratio_row(s);
                if target.len() < 3 {
                    return None;
                }
                let spread =
                    target.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                        - target.iter().cloned().fold(f64::INFINITY, f64::min);
                if !(spread > 1e-12) {
                    return None;
                }
                let learned: Vec<f64> =
                    included.iter().map(|&sp| scores.data()[s * n + sp]).collect();
                spearman(&learned, &target)
            })
            .collect();
        let usable: Vec<f64> = per_anchor.iter().flatten().copied().collect();
        let mean = if usable.is_empty() {
            None
        } else {
            Some(usable.iter().sum::<f64>() / usable.len() as f64)
        };
        (per_anchor, mean)
    };

    let initial_scores = score_matrix(&net, &params, &obs_refs, &obs_refs);
    let (_, initial_spearman) = correlate(&initial_scores);

    // Train: offsets first, then a start index that keeps the pair in range.
    let adam = AdamConfig::with_lr(cfg.lr);
    let sampler = OffsetSampler::TruncatedGeometric { gamma: cfg.gamma_c };
    for _ in 0..cfg.train_steps {
        let mut anchors = Vec::with_capacity(cfg.batch_size);
        let mut positives = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let traj = &trajectories[rng.gen_range(0..trajectories.len())];
            let dt = sampler.sample(&mut rng, cfg.max_offset);
            let t = rng.gen_range(0..=cfg.rollout_len - dt);
            anchors.push(&obs[traj[t]]);
            positives.push(&obs[traj[t + dt]]);
        }
        let (_, _, grads) = contrastive_batch_loss(&net, &params, &anchors, &positives);
        params
            .adam_step(&grads, &adam)
            .expect("contrastive gradients on tabular observations stay finite");
    }

    let scores = score_matrix(&net, &params, &obs_refs, &obs_refs);
    let (per_anchor, mean_spearman) = correlate(&scores);
    let degenerate = mean_spearman.is_none();
    Ok(NceReport { mean_spearman, per_anchor, excluded_states, degenerate, initial_spearman })
}

/// Reflecting lazy random walk on `n` states: stay with probability 1/2,
/// otherwise step to a uniformly chosen neighbor (walls reflect into
/// staying). Single action; rewards unused by the ratio check.
pub fn random_walk_chain(n: usize, gamma: f64) -> TabularMdp {
    let mut transition = vec![0.0; n * n];
    for s in 0..n {
        let mut stay = 0.5;
        if s > 0 {
            transition[s * n + s - 1] = 0.25;
        } else {
            stay += 0.25;
        }
        if s + 1 < n {
            transition[s * n + s + 1] = 0.25;
        } else {
            stay += 0.25;
        }
        transition[s * n + s] = stay;
    }
    TabularMdp {
        n_states: n,
        n_actions: 1,
        transition,
        reward: vec![0.0; n],
        gamma,
        horizon: None,
        policy: vec![1.0; n],
    }
}

// ---------------------------------------------------------------------------
// Named check suites (driven by the CLI `verify` verb)
// ---------------------------------------------------------------------------

/// Outcome of one named identity check.
#[derive(Clone, Debug)]
pub struct SuiteCheck {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &'static str, pass: bool, detail: String) -> SuiteCheck {
    SuiteCheck { name, pass, detail }
}

/// Value identities: direct Bellman solutions vs the visitation-mixture
/// form, on hand-checked chains and random MDPs.
pub fn run_occupancy_suite(seed: u64) -> Vec<SuiteCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    // Absorbing state, r = 1, γ = 0.5: geometric series sums to 2.
    let absorbing = TabularMdp {
        n_states: 1,
        n_actions: 1,
        transition: vec![1.0],
        reward: vec![1.0],
        gamma: 0.5,
        horizon: None,
        policy: vec![1.0],
    };
    match value_direct(&absorbing) {
        Ok((v, _)) => checks.push(check(
            "absorbing-geometric-series",
            (v[0] - 2.0).abs() < 1e-12,
            format!("V = {} (want 2)", v[0]),
        )),
        Err(e) => checks.push(check("absorbing-geometric-series", false, e.to_string())),
    }

    // Two-state flip chain, reward only in state 1, γ = 0.5:
    // V(0) = γ/(1−γ²) = 2/3, V(1) = 1/(1−γ²)·... = 4/3 by hand.
    let flip = TabularMdp {
        n_states: 2,
        n_actions: 1,
        transition: vec![0.0, 1.0, 1.0, 0.0],
        reward: vec![0.0, 1.0],
        gamma: 0.5,
        horizon: None,
        policy: vec![1.0, 1.0],
    };
    let flip_ok = match (value_direct(&flip), value_via_occupancy(&flip)) {
        (Ok((vd, _)), Ok(vo)) => {
            let hand = [2.0 / 3.0, 4.0 / 3.0];
            let d = (vd[0] - hand[0]).abs().max((vd[1] - hand[1]).abs());
            let o = (vo[0] - vd[0]).abs().max((vo[1] - vd[1]).abs());
            check(
                "flip-chain-hand-values",
                d < 1e-12 && o < 1e-10,
                format!("direct err {d:.2e}, occupancy vs direct {o:.2e}"),
            )
        }
        (Err(e), _) | (_, Err(e)) => check("flip-chain-hand-values", false, e.to_string()),
    };
    checks.push(flip_ok);

    // Random MDPs: the identity itself, both horizons.
    let mut worst: f64 = 0.0;
    let mut rows_ok = true;
    let mut failures = 0;
    for i in 0..50 {
        let horizon = if i % 2 == 0 { None } else { Some(5 + (i % 7) * 9) };
        let gamma = if horizon.is_some() && i % 10 == 3 { 1.0 } else { 0.55 + 0.4 * rng.gen::<f64>() };
        let mdp = random_mdp(5, 3, gamma, horizon, &mut rng);
        match (value_direct(&mdp), value_via_occupancy(&mdp), occupancy(&mdp)) {
            (Ok((vd, _)), Ok(vo), Ok(rho)) => {
                for s in 0..mdp.n_states {
                    worst = worst.max((vd[s] - vo[s]).abs());
                    let row_sum: f64 = rho[s * mdp.n_states..(s + 1) * mdp.n_states].iter().sum();
                    if (row_sum - 1.0).abs() > 1e-9
                        || rho[s * mdp.n_states..(s + 1) * mdp.n_states].iter().any(|&p| p < -1e-15)
                    {
                        rows_ok = false;
                    }
                }
            }
            _ => failures += 1,
        }
    }
    checks.push(check(
        "occupancy-value-identity-50-random-mdps",
        worst < 1e-6 && failures == 0,
        format!("max |V_direct − V_occupancy| = {worst:.2e}, failures {failures}"),
    ));
    checks.push(check(
        "occupancy-rows-are-distributions",
        rows_ok,
        "every row sums to 1 within 1e-9 and is non-negative".to_string(),
    ));

    // γ → 0 limit: values collapse to the policy-averaged immediate reward.
    let mdp = random_mdp(4, 2, 0.0, None, &mut rng);
    let gamma_zero = match value_direct(&mdp) {
        Ok((v, _)) => {
            let r_pi = mdp.policy_reward();
            let err =
                v.iter().zip(&r_pi).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
            check("gamma-zero-limit", err < 1e-12, format!("max |V − r_π| = {err:.2e}"))
        }
        Err(e) => check("gamma-zero-limit", false, e.to_string()),
    };
    checks.push(gamma_zero);

    // Q must satisfy its defining relation against V.
    let mdp = random_mdp(6, 3, 0.9, None, &mut rng);
    let q_consistent = match value_direct(&mdp) {
        Ok((v, q)) => {
            let mut err: f64 = 0.0;
            for s in 0..mdp.n_states {
                for a in 0..mdp.n_actions {
                    let rhs: f64 = mdp.reward[s * mdp.n_actions + a]
                        + mdp.gamma
                            * (0..mdp.n_states).map(|sp| mdp.p(s, a, sp) * v[sp]).sum::<f64>();
                    err = err.max((q[s * mdp.n_actions + a] - rhs).abs());
                }
            }
            check("q-bellman-consistency", err < 1e-10, format!("max residual {err:.2e}"))
        }
        Err(e) => check("q-bellman-consistency", false, e.to_string()),
    };
    checks.push(q_consistent);

    checks
}

/// Contrastive ratio identity on the 5-state random walk, plus the
/// degenerate-uniform and null-scorer controls.
pub fn run_nce_suite(seed: u64) -> Vec<SuiteCheck> {
    let mut checks = Vec::new();
    let cfg = NceCheckConfig::default();

    let chain = random_walk_chain(5, 0.95);
    match nce_ratio_check(&chain, &cfg, seed) {
        Ok(report) => {
            let mean = report.mean_spearman.unwrap_or(f64::NAN);
            checks.push(check(
                "learned-scores-track-log-ratio",
                report.mean_spearman.map_or(false, |m| m >= 0.9),
                format!("mean Spearman {mean:.3} (need >= 0.9)"),
            ));
            let null = report.initial_spearman.unwrap_or(f64::NAN);
            checks.push(check(
                "random-scorer-near-zero",
                report.initial_spearman.map_or(false, |m| m.abs() <= 0.3),
                format!("untrained mean Spearman {null:.3} (band ±0.3)"),
            ));
            checks.push(check(
                "all-states-reachable",
                report.excluded_states == 0,
                format!("{} states excluded", report.excluded_states),
            ));
        }
        Err(e) => checks.push(check("learned-scores-track-log-ratio", false, e.to_string())),
    }

    // Uniform transitions: every ratio identical, so ranking is undefined
    // and the check must say so rather than fake a pass.
    let n = 4;
    let uniform = TabularMdp {
        n_states: n,
        n_actions: 1,
        transition: vec![1.0 / n as f64; n * n],
        reward: vec![0.0; n],
        gamma: 0.9,
        horizon: None,
        policy: vec![1.0; n],
    };
    let quick = NceCheckConfig { train_steps: 30, ..cfg };
    match nce_ratio_check(&uniform, &quick, seed) {
        Ok(report) => checks.push(check(
            "uniform-chain-reports-degenerate",
            report.degenerate && report.mean_spearman.is_none(),
            format!("degenerate = {}", report.degenerate),
        )),
        Err(e) => checks.push(check("uniform-chain-reports-degenerate", false, e.to_string())),
    }

    checks
}

/// Finite-difference audits of the three hand-written training gradients.
pub fn run_gradcheck_suite(seed: u64) -> Vec<SuiteCheck> {
    use crate::agent::{a2c_loss, AgentConfig, PolicyValueNet, UpdateBatch};
    use crate::layers::forward;
    use crate::progress::{progress_batch_loss, ProgressNet};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    let obs: Vec<Observation> = (0..4)
        .map(|i| {
            let mut tiles = vec![TILE_FLOOR; 9];
            tiles[i % 9] = TILE_AGENT;
            Observation { tiles, width: 3, height: 3, status: [0.1 * i as f32, 0.0, 0.5] }
        })
        .collect();
    let refs: Vec<&Observation> = obs.iter().collect();

    // Contrastive loss.
    {
        let net = EncoderNet::new(3, 3);
        let mut params = net.init_params(&mut rng);
        let anchors = vec![refs[0], refs[1], refs[2]];
        let positives = vec![refs[1], refs[2], refs[3]];
        let xa = encode_batch::<Real>(&anchors);
        let xp = encode_batch::<Real>(&positives);
        clear_relu_kinks(&net.torso, &mut params, &[&xa, &xp], 1e-3);
        let (_, _, grads) = contrastive_batch_loss(&net, &params, &anchors, &positives);
        let report = finite_diff_check(&mut params, &grads, 1e-5, 1e-7, |p| {
            contrastive_batch_loss(&net, p, &anchors, &positives).0
        });
        checks.push(check(
            "contrastive-loss-gradient",
            report.max_rel_err < 1e-4,
            format!("max rel err {:.2e} at {}", report.max_rel_err, report.worst_param),
        ));
    }

    // Progress regression loss.
    {
        let net = ProgressNet::new(3, 3);
        let mut params = net.init_params(&mut rng);
        let a = vec![refs[0], refs[1], refs[2]];
        let b = vec![refs[1], refs[2], refs[3]];
        let targets = vec![0.7, -1.1, 2.0];
        let x = crate::encode::encode_pair_batch::<Real>(&a, &b);
        clear_relu_kinks(&net.torso, &mut params, &[&x], 1e-3);
        let (_, grads) = progress_batch_loss(&net, &params, &a, &b, &targets);
        let report = finite_diff_check(&mut params, &grads, 1e-5, 1e-7, |p| {
            progress_batch_loss(&net, p, &a, &b, &targets).0
        });
        checks.push(check(
            "progress-loss-gradient",
            report.max_rel_err < 1e-4,
            format!("max rel err {:.2e} at {}", report.max_rel_err, report.worst_param),
        ));
    }

    // Actor-critic loss.
    {
        let net = PolicyValueNet::new(3, 3);
        let mut params = net.init_params(&mut rng);
        let actions = vec![1usize, 4, 2, 0];
        let returns = vec![0.3, -0.2, 0.6, 1.1];
        let advantages = vec![0.5, -1.0, 0.25, 0.0];
        let cfg = AgentConfig::default();
        let x = encode_batch::<Real>(&refs);
        clear_relu_kinks(&net.torso, &mut params, &[&x], 1e-3);
        let (f, _) = forward(&net.torso, &params, &x);
        clear_relu_kinks(&net.trunk, &mut params, &[&f], 1e-3);
        let batch = UpdateBatch {
            obs: refs.clone(),
            actions: &actions,
            returns: &returns,
            advantages: &advantages,
        };
        let (_, grads) = a2c_loss(&net, &params, &batch, &cfg);
        let report = finite_diff_check(&mut params, &grads, 1e-5, 1e-7, |p| {
            a2c_loss(&net, p, &batch, &cfg).0.total
        });
        checks.push(check(
            "actor-critic-loss-gradient",
            report.max_rel_err < 1e-4,
            format!("max rel err {:.2e} at {}", report.max_rel_err, report.worst_param),
        ));
    }

    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_reward_means_zero_value_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for horizon in [None, Some(17)] {
            let mut mdp = random_mdp(5, 2, 0.9, horizon, &mut rng);
            mdp.reward.iter_mut().for_each(|r| *r = 0.0);
            let (v, q) = value_direct(&mdp).unwrap();
            assert!(v.iter().all(|&x| x == 0.0));
            assert!(q.iter().all(|&x| x == 0.0));
            let vo = value_via_occupancy(&mdp).unwrap();
            assert!(vo.iter().all(|&x| x.abs() < 1e-15));
        }
    }

    #[test]
    fn absorbing_state_matches_geometric_series() {
        let mdp = TabularMdp {
            n_states: 1,
            n_actions: 1,
            transition: vec![1.0],
            reward: vec![1.0],
            gamma: 0.5,
            horizon: None,
            policy: vec![1.0],
        };
        let (v, q) = value_direct(&mdp).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-12, "1/(1−γ) with γ=0.5");
        assert!((q[0] - 2.0).abs() < 1e-12);
        let vo = value_via_occupancy(&mdp).unwrap();
        assert!((vo[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn flip_chain_matches_hand_calculation() {
        // s0 <-> s1 deterministically, reward 1 collected in s1.
        // From s0 rewards land at odd t: V(0) = γ/(1−γ²) = 2/3 at γ = 1/2;
        // from s1 they land at even t: V(1) = 1/(1−γ²) = 4/3.
        let mdp = TabularMdp {
            n_states: 2,
            n_actions: 1,
            transition: vec![0.0, 1.0, 1.0, 0.0],
            reward: vec![0.0, 1.0],
            gamma: 0.5,
            horizon: None,
            policy: vec![1.0, 1.0],
        };
        let (v, _) = value_direct(&mdp).unwrap();
        assert!((v[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((v[1] - 4.0 / 3.0).abs() < 1e-12);
        let vo = value_via_occupancy(&mdp).unwrap();
        assert!((vo[0] - v[0]).abs() < 1e-10);
        assert!((vo[1] - v[1]).abs() < 1e-10);
    }

    #[test]
    fn occupancy_value_identity_holds_on_random_mdps() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for i in 0..50 {
            let horizon = if i % 2 == 0 { None } else { Some(3 + i) };
            let gamma = if i == 7 { 0.0 } else { 0.5 + 0.45 * rng.gen::<f64>() };
            let mdp = random_mdp(5, 3, gamma, horizon, &mut rng);
            let (vd, _) = value_direct(&mdp).unwrap();
            let vo = value_via_occupancy(&mdp).unwrap();
            for s in 0..mdp.n_states {
                assert!(
                    (vd[s] - vo[s]).abs() < 1e-6,
                    "mdp {i} state {s}: direct {} vs occupancy {}",
                    vd[s],
                    vo[s]
                );
            }
        }
    }

    #[test]
    fn finite_horizon_with_undiscounted_rewards_works() {
        // γ = 1 is fine when the horizon is finite: V is a plain sum.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mdp = random_mdp(4, 2, 1.0, Some(12), &mut rng);
        let (vd, _) = value_direct(&mdp).unwrap();
        let vo = value_via_occupancy(&mdp).unwrap();
        for s in 0..mdp.n_states {
            assert!((vd[s] - vo[s]).abs() < 1e-9);
        }
    }

    #[test]
    fn occupancy_rows_are_probability_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for horizon in [None, Some(9)] {
            let mdp = random_mdp(6, 2, 0.93, horizon, &mut rng);
            let rho = occupancy(&mdp).unwrap();
            for s in 0..mdp.n_states {
                let row = &rho[s * mdp.n_states..(s + 1) * mdp.n_states];
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "row {s} sums to {sum}");
                assert!(row.iter().all(|&p| p >= -1e-15), "row {s} has negative mass");
            }
        }
    }

    #[test]
    fn gamma_zero_collapses_to_immediate_reward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mdp = random_mdp(5, 3, 0.0, None, &mut rng);
        let (v, _) = value_direct(&mdp).unwrap();
        let r_pi = mdp.policy_reward();
        for s in 0..mdp.n_states {
            assert!((v[s] - r_pi[s]).abs() < 1e-12);
        }
        let vo = value_via_occupancy(&mdp).unwrap();
        for s in 0..mdp.n_states {
            assert!((vo[s] - r_pi[s]).abs() < 1e-12);
        }
    }

    #[test]
    fn q_satisfies_its_defining_relation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mdp = random_mdp(6, 4, 0.85, None, &mut rng);
        let (v, q) = value_direct(&mdp).unwrap();
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                let rhs: f64 = mdp.reward[s * mdp.n_actions + a]
                    + mdp.gamma * (0..mdp.n_states).map(|sp| mdp.p(s, a, sp) * v[sp]).sum::<f64>();
                assert!((q[s * mdp.n_actions + a] - rhs).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn invalid_mdps_are_rejected_with_typed_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let good = random_mdp(3, 2, 0.9, None, &mut rng);

        let mut bad = good.clone();
        bad.transition[0] += 0.5;
        assert!(matches!(bad.validate(), Err(OracleError::BadTransition { s: 0, a: 0, .. })));

        let mut bad = good.clone();
        bad.transition[0] = -0.1;
        bad.transition[1] += 0.1;
        assert!(matches!(bad.validate(), Err(OracleError::NegativeProbability { .. })));

        let mut bad = good.clone();
        bad.policy[0] += 0.25;
        assert!(matches!(bad.validate(), Err(OracleError::BadPolicy { s: 0, .. })));

        let mut bad = good.clone();
        bad.gamma = 1.0;
        assert!(matches!(bad.validate(), Err(OracleError::SingularSystem { .. })));

        let mut bad = good.clone();
        bad.gamma = 1.2;
        assert!(matches!(bad.validate(), Err(OracleError::BadDiscount { .. })));

        let mut bad = good.clone();
        bad.horizon = Some(0);
        assert!(matches!(bad.validate(), Err(OracleError::ZeroHorizon)));

        assert!(good.validate().is_ok());
    }

    #[test]
    fn learned_contrastive_scores_rank_like_the_analytic_ratio() {
        let chain = random_walk_chain(5, 0.95);
        let cfg = NceCheckConfig::default();
        let report = nce_ratio_check(&chain, &cfg, 0).unwrap();
        assert_eq!(report.excluded_states, 0, "walk reaches every state");
        assert!(!report.degenerate);
        let initial = report.initial_spearman.expect("ratios vary on the chain");
        assert!(
            initial.abs() <= 0.3,
            "untrained scorer should sit near the permutation null, got {initial}"
        );
        let trained = report.mean_spearman.unwrap();
        assert!(
            trained >= 0.9,
            "trained scores must rank like the analytic log-ratio, got {trained}"
        );
    }

    #[test]
    fn rank_correlation_ignores_per_anchor_score_shifts() {
        // The contrastive optimum is only identified up to an additive
        // per-anchor constant; the comparison must not care. Shift every
        // learned score row by a different constant and re-rank by hand.
        let chain = random_walk_chain(5, 0.95);
        let n = chain.n_states;
        let p_pi = chain.policy_transition();
        let rho = future_visitation(&p_pi, n, 0.7, 12);
        let marginal: Vec<f64> = (0..n)
            .map(|sp| (0..n).map(|s| rho[s * n + sp]).sum::<f64>() / n as f64)
            .collect();
        for s in 0..n {
            let target: Vec<f64> =
                (0..n).map(|sp| rho[s * n + sp].ln() - marginal[sp].ln()).collect();
            let scores: Vec<f64> = (0..n).map(|sp| 0.3 * sp as f64 - target[sp]).collect();
            let base = spearman(&scores, &target).unwrap();
            let shifted: Vec<f64> = scores.iter().map(|v| v + 17.0 * (s as f64 + 1.0)).collect();
            let after = spearman(&shifted, &target).unwrap();
            assert!((base - after).abs() < 1e-12, "anchor {s}: {base} vs {after}");
        }
    }

    #[test]
    fn uniform_transitions_report_degenerate_rather_than_pass() {
        let n = 4;
        let uniform = TabularMdp {
            n_states: n,
            n_actions: 1,
            transition: vec![1.0 / n as f64; n * n],
            reward: vec![0.0; n],
            gamma: 0.9,
            horizon: None,
            policy: vec![1.0; n],
        };
        let cfg = NceCheckConfig { train_steps: 20, ..NceCheckConfig::default() };
        let report = nce_ratio_check(&uniform, &cfg, 1).unwrap();
        assert!(report.degenerate);
        assert!(report.mean_spearman.is_none());
        assert!(report.per_anchor.iter().all(Option::is_none));
    }

    #[test]
    fn suites_pass_end_to_end() {
        for (name, checks) in [
            ("occupancy", run_occupancy_suite(0)),
            ("gradcheck", run_gradcheck_suite(0)),
        ] {
            for c in &checks {
                assert!(c.pass, "suite {name}, check {}: {}", c.name, c.detail);
            }
            assert!(!checks.is_empty());
        }
    }
}
