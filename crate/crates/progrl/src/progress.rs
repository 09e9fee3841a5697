//! Temporal-progress model: a regressor `g(s_a, s_b)` trained to predict the
//! signed log temporal distance between two states of the same episode,
//! `sgn(Δt)·ln(1+|Δt|)`. A trained `g` evaluated on (recent state, current
//! state) tells the online learner how much forward progress the last few
//! steps made, and is added to the environment reward as an exploration
//! bonus.
//!
//! The two observations enter by early fusion: their channel planes are
//! concatenated and consumed by a conv torso with the same stack shape as
//! the contrastive encoder (so torso parameters can be transplanted between
//! the two models), followed by a single dense head producing one scalar.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::demos::{sample_progress_pair, DemoDataset, ProgressPair};
use crate::encode::{encode_pair_batch, OBS_CHANNELS};
use crate::env::Observation;
use crate::layers::{backward, forward, Layer, Stack};
use crate::nd::NdArray;
use crate::params::{AdamConfig, Grads, OptimError, ParamStore};
use crate::pretrain::{split_dataset, torso_stack, FEAT_DIM};
use crate::Real;

/// Input channels of the fused pair encoding: both observations' planes.
pub const PAIR_CHANNELS: usize = 2 * OBS_CHANNELS;

/// Progress network: early-fusion conv torso plus a scalar head. Parameter
/// names are `torso.*` (same scheme as the encoder torso, so a trained
/// progress torso can seed an encoder-shaped network) and `head.*`.
pub struct ProgressNet {
    pub torso: Stack,
    pub head: Stack,
    pub height: usize,
    pub width: usize,
}

impl ProgressNet {
    pub fn new(height: usize, width: usize) -> ProgressNet {
        ProgressNet {
            torso: torso_stack(PAIR_CHANNELS, height, width),
            head: Stack::new(vec![Layer::dense("head", FEAT_DIM, 1)]),
            height,
            width,
        }
    }

    /// Fresh parameters for torso and head.
    pub fn init_params(&self, rng: &mut impl Rng) -> ParamStore<Real> {
        let mut params = ParamStore::new();
        self.torso.init_params(&mut params, rng);
        self.head.init_params(&mut params, rng);
        params
    }

    /// Forward-only batch evaluation: `g(a[i], b[i])` for each pair.
    pub fn predict(&self, params: &ParamStore<Real>, a: &[&Observation], b: &[&Observation]) -> Vec<Real> {
        let (f, _) = forward(&self.torso, params, &encode_pair_batch(a, b));
        let (out, _) = forward(&self.head, params, &f);
        out.data().to_vec()
    }
}

/// Regression target `sgn(Δt)·ln(1+|Δt|)`; exactly antisymmetric in `Δt`.
pub fn progress_target(dt: i64) -> Real {
    let magnitude = (1.0 + dt.unsigned_abs() as Real).ln();
    match dt.signum() {
        1 => magnitude,
        -1 => -magnitude,
        _ => 0.0,
    }
}

/// Target under the configured direction mode: signed keeps the sign of the
/// offset, unsigned regresses the plain log distance `ln(1+|Δt|)`.
pub fn pair_target(dt: i64, signed: bool) -> Real {
    if signed {
        progress_target(dt)
    } else {
        progress_target(dt.unsigned_abs() as i64)
    }
}

/// Mean squared error between `g(a[i], b[i])` and `targets[i]`, with
/// gradients for all torso and head parameters.
pub fn progress_batch_loss(
    net: &ProgressNet,
    params: &ParamStore<Real>,
    a: &[&Observation],
    b: &[&Observation],
    targets: &[Real],
) -> (Real, Grads<Real>) {
    let n = a.len();
    assert!(n > 0, "progress loss needs at least one pair");
    assert_eq!(b.len(), n, "one second state per first state");
    assert_eq!(targets.len(), n, "one target per pair");

    let (f, tape_torso) = forward(&net.torso, params, &encode_pair_batch(a, b));
    let (out, tape_head) = forward(&net.head, params, &f);

    let mut loss = 0.0;
    let mut dout = NdArray::zeros(&[n, 1]);
    for i in 0..n {
        let r = out.data()[i] - targets[i];
        loss += r * r;
        dout.data_mut()[i] = 2.0 * r / n as Real;
    }
    loss /= n as Real;

    let mut grads = Grads::new();
    let df = backward(&net.head, params, &tape_head, &dout, &mut grads);
    backward(&net.torso, params, &tape_torso, &df, &mut grads);
    (loss, grads)
}

/// Pure evaluation of `g` on one (earlier, current) pair. The caller owns
/// any scaling applied to the result.
pub fn progress_reward(
    net: &ProgressNet,
    params: &ParamStore<Real>,
    s_prev: &Observation,
    s_now: &Observation,
) -> Real {
    net.predict(params, &[s_prev], &[s_now])[0]
}

/// Batched form of [`progress_reward`]: one forward pass for many pairs.
pub fn progress_reward_batch(
    net: &ProgressNet,
    params: &ParamStore<Real>,
    prev: &[&Observation],
    now: &[&Observation],
) -> Vec<Real> {
    net.predict(params, prev, now)
}

#[derive(Clone, Debug)]
pub struct ProgressConfig {
    /// Optimizer steps.
    pub steps: usize,
    /// Pairs per batch.
    pub batch_size: usize,
    /// Adam learning rate.
    pub lr: f64,
    /// Keep the sign of the temporal offset in the target (the default);
    /// unsigned mode regresses only the distance.
    pub signed: bool,
    /// Fraction of episodes held out for evaluation.
    pub eval_fraction: f64,
    /// Steps between metric log rows.
    pub eval_interval: usize,
    /// Size of the fixed held-out pair set used for the MSE metric.
    pub eval_pairs: usize,
}

impl Default for ProgressConfig {
    fn default() -> Self {
        ProgressConfig {
            steps: 20_000,
            batch_size: 64,
            lr: 3e-4,
            signed: true,
            eval_fraction: 0.1,
            eval_interval: 500,
            eval_pairs: 512,
        }
    }
}

impl ProgressConfig {
    pub fn validate(&self) {
        assert!(self.steps > 0, "step count must be positive");
        assert!(self.batch_size > 0, "batch size must be positive");
        assert!(self.lr > 0.0, "learning rate must be positive");
        assert!(
            (0.0..1.0).contains(&self.eval_fraction),
            "eval fraction must be in [0, 1)"
        );
        assert!(self.eval_interval > 0, "eval interval must be positive");
        assert!(self.eval_pairs > 0, "eval pair count must be positive");
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ProgressLogRow {
    pub step: usize,
    pub train_loss: f64,
    pub heldout_mse: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum ProgressError {
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("training diverged at step {step}: non-finite gradient for `{name}`")]
    BadGradient { step: usize, name: String },
}

/// Mean squared error of `g` over a fixed pair set, evaluated forward-only
/// in chunks of `chunk` pairs.
pub fn pair_set_mse(
    net: &ProgressNet,
    params: &ParamStore<Real>,
    pairs: &[ProgressPair<'_>],
    signed: bool,
    chunk: usize,
) -> f64 {
    assert!(!pairs.is_empty(), "MSE over an empty pair set is undefined");
    let mut total = 0.0;
    for block in pairs.chunks(chunk.max(1)) {
        let a: Vec<&Observation> = block.iter().map(|p| p.a).collect();
        let b: Vec<&Observation> = block.iter().map(|p| p.b).collect();
        let preds = net.predict(params, &a, &b);
        for (pred, pair) in preds.iter().zip(block) {
            let r = pred - pair_target(pair.dt, signed);
            total += r * r;
        }
    }
    total / pairs.len() as f64
}

/// Train the progress model on a demonstration dataset. Returns the final
/// parameters and the metrics log (train loss of the pre-update batch and
/// MSE over a fixed held-out pair set, one row per eval interval).
pub fn train_progress(
    ds: &DemoDataset,
    cfg: &ProgressConfig,
    seed: u64,
) -> Result<(ParamStore<Real>, Vec<ProgressLogRow>), ProgressError> {
    cfg.validate();
    let (train, held) = split_dataset(ds, cfg.eval_fraction);
    let eval_split = if held.n_episodes() > 0 { &held } else { &train };
    let config = &ds.manifest().config;
    let net = ProgressNet::new(config.height, config.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = net.init_params(&mut rng);
    let adam = AdamConfig::with_lr(cfg.lr);

    // One fixed held-out pair set so the MSE metric is comparable across
    // steps instead of re-rolling its own sampling noise every interval.
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let eval_set: Vec<ProgressPair<'_>> =
        (0..cfg.eval_pairs).map(|_| sample_progress_pair(eval_split, &mut eval_rng)).collect();

    let mut log = Vec::new();
    for step in 0..cfg.steps {
        let mut a = Vec::with_capacity(cfg.batch_size);
        let mut b = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let pair = sample_progress_pair(&train, &mut rng);
            a.push(pair.a);
            b.push(pair.b);
            targets.push(pair_target(pair.dt, cfg.signed));
        }
        let (loss, grads) = progress_batch_loss(&net, &params, &a, &b, &targets);
        if !loss.is_finite() {
            return Err(ProgressError::Diverged { step, loss });
        }
        if step % cfg.eval_interval == 0 || step + 1 == cfg.steps {
            let heldout_mse = pair_set_mse(&net, &params, &eval_set, cfg.signed, cfg.batch_size);
            log.push(ProgressLogRow { step, train_loss: loss, heldout_mse });
        }
        match params.adam_step(&grads, &adam) {
            Ok(()) => {}
            Err(OptimError::NonFiniteGrad { name }) => {
                return Err(ProgressError::BadGradient { step, name });
            }
            Err(other) => panic!("all progress parameters receive gradients: {other}"),
        }
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ckpt::Checkpoint;
    use crate::demos::{generate_dataset, Episode};
    use crate::encode::encode_pair_batch;
    use crate::env::{DungeonConfig, Task, TILE_AGENT, TILE_FLOOR};
    use crate::gradcheck::{clear_relu_kinks, finite_diff_check, pre_activations_clear_of_kinks};
    use crate::stats::{mean, std_dev};

    /// 3x3 observation with the agent at cell `i` (mod 9).
    fn cycle_state(i: usize) -> Observation {
        let mut tiles = vec![TILE_FLOOR; 9];
        tiles[i % 9] = TILE_AGENT;
        Observation { tiles, width: 3, height: 3, status: [0.0, 0.0, 0.0] }
    }

    /// Synthetic 1x1 episode of `t_len` steps; observation `t` stores `t` in
    /// its first status slot.
    fn flat_episode(seed: u64, t_len: usize) -> Episode {
        let observations = (0..=t_len)
            .map(|t| Observation {
                tiles: vec![TILE_FLOOR],
                width: 1,
                height: 1,
                status: [t as f32, 0.0, 0.0],
            })
            .collect();
        Episode { task: Task::Score, seed, observations, rewards: vec![0.0; t_len] }
    }

    fn flat_dataset(n_episodes: usize, t_len: usize) -> DemoDataset {
        let config = DungeonConfig { width: 1, height: 1, ..DungeonConfig::default() };
        let episodes = (0..n_episodes).map(|e| flat_episode(e as u64, t_len)).collect();
        DemoDataset::from_episodes(config, episodes)
    }

    fn zeroed_params(net: &ProgressNet) -> ParamStore<Real> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = net.init_params(&mut rng);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            for v in params.get_mut(&name).data_mut() {
                *v = 0.0;
            }
        }
        params
    }

    #[test]
    fn target_matches_hand_computed_values() {
        assert_eq!(progress_target(0), 0.0);
        // ln(100) and -ln(8), computed independently.
        assert!((progress_target(99) - 4.605170185988092).abs() < 1e-12);
        assert!((progress_target(-7) - (-2.0794415416798357)).abs() < 1e-12);
        for dt in 1..=100i64 {
            assert_eq!(progress_target(-dt), -progress_target(dt), "antisymmetry at {dt}");
        }
        // Unsigned mode discards direction.
        assert_eq!(pair_target(-7, false), progress_target(7));
        assert_eq!(pair_target(-7, true), -progress_target(7));
    }

    #[test]
    fn zero_initialized_model_outputs_zero_for_all_inputs() {
        let net = ProgressNet::new(3, 3);
        let params = zeroed_params(&net);
        let states: Vec<Observation> = (0..6).map(cycle_state).collect();
        for s in &states {
            for sp in &states {
                assert_eq!(progress_reward(&net, &params, s, sp), 0.0);
            }
        }
    }

    #[test]
    fn loss_is_zero_iff_predictions_equal_targets() {
        let net = ProgressNet::new(3, 3);
        let params = zeroed_params(&net);
        let s0 = cycle_state(0);
        let s1 = cycle_state(1);
        // Zero net, zero targets: exact zero loss.
        let (loss, _) = progress_batch_loss(&net, &params, &[&s0, &s1], &[&s1, &s0], &[0.0, 0.0]);
        assert_eq!(loss, 0.0);
        // Any prediction-target mismatch makes it strictly positive.
        let target = progress_target(3);
        let (loss, _) = progress_batch_loss(&net, &params, &[&s0], &[&s1], &[target]);
        assert!((loss - target * target).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let net = ProgressNet::new(3, 3);
        let a_owned: Vec<Observation> = (0..4).map(cycle_state).collect();
        let b_owned: Vec<Observation> = (2..6).map(cycle_state).collect();
        let a: Vec<&Observation> = a_owned.iter().collect();
        let b: Vec<&Observation> = b_owned.iter().collect();
        let targets: Vec<Real> = (1..=4).map(|dt| progress_target(dt)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = net.init_params(&mut rng);
        // Central differences need the torso's relu pre-activations away
        // from their kinks.
        let x = encode_pair_batch::<Real>(&a, &b);
        clear_relu_kinks(&net.torso, &mut params, &[&x], 1e-3);
        assert!(pre_activations_clear_of_kinks(&net.torso, &params, &x, 1e-3));
        let (_, grads) = progress_batch_loss(&net, &params, &a, &b, &targets);
        let report = finite_diff_check(&mut params, &grads, 1e-5, 1e-7, |p| {
            progress_batch_loss(&net, p, &a, &b, &targets).0
        });
        assert!(
            report.max_rel_err < 1e-4,
            "rel err {} at {}[{}] (analytic {}, numeric {})",
            report.max_rel_err,
            report.worst_param,
            report.worst_index,
            report.analytic,
            report.numeric
        );
    }

    #[test]
    fn constant_zero_net_loss_matches_target_second_moment() {
        // With an all-zero network every per-pair loss is exactly target²,
        // so the mean batch loss must agree with an independent Monte-Carlo
        // estimate of E[target²] under the pair distribution.
        let ds = flat_dataset(8, 40);
        let net = ProgressNet::new(1, 1);
        let params = zeroed_params(&net);

        let mut mc_rng = ChaCha8Rng::seed_from_u64(404);
        let mc: Vec<f64> = (0..100_000)
            .map(|_| {
                let pair = sample_progress_pair(&ds, &mut mc_rng);
                let t = pair_target(pair.dt, false);
                t * t
            })
            .collect();
        let mc_mean = mean(&mc);
        let mc_se = std_dev(&mc) / (mc.len() as f64).sqrt();

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let batches: Vec<f64> = (0..200)
            .map(|_| {
                let mut a = Vec::new();
                let mut b = Vec::new();
                let mut targets = Vec::new();
                for _ in 0..64 {
                    let pair = sample_progress_pair(&ds, &mut rng);
                    a.push(pair.a);
                    b.push(pair.b);
                    targets.push(pair_target(pair.dt, false));
                }
                progress_batch_loss(&net, &params, &a, &b, &targets).0
            })
            .collect();
        let measured = mean(&batches);
        let measured_se = std_dev(&batches) / (batches.len() as f64).sqrt();

        let tol = 4.0 * (mc_se + measured_se);
        assert!(
            (measured - mc_mean).abs() < tol,
            "zero-net loss {measured} vs Monte-Carlo second moment {mc_mean} (tol {tol})"
        );
    }

    #[test]
    fn nan_inputs_abort_training_with_a_diagnostic() {
        let config = DungeonConfig { width: 1, height: 1, ..DungeonConfig::default() };
        let episodes: Vec<Episode> = (0..2)
            .map(|e| {
                let mut ep = flat_episode(e, 10);
                for obs in &mut ep.observations {
                    obs.status[0] = f32::NAN;
                }
                ep
            })
            .collect();
        let ds = DemoDataset::from_episodes(config, episodes);
        let cfg = ProgressConfig { steps: 5, batch_size: 4, eval_pairs: 4, ..Default::default() };
        match train_progress(&ds, &cfg, 0) {
            Err(ProgressError::Diverged { step, .. })
            | Err(ProgressError::BadGradient { step, .. }) => assert_eq!(step, 0),
            Ok(_) => panic!("NaN inputs must abort training"),
        }
    }

    #[test]
    fn same_seed_reproduces_identical_checkpoints() {
        let ds = flat_dataset(4, 30);
        let cfg = ProgressConfig {
            steps: 25,
            batch_size: 8,
            eval_interval: 10,
            eval_pairs: 16,
            ..Default::default()
        };
        let (p1, _) = train_progress(&ds, &cfg, 5).unwrap();
        let (p2, _) = train_progress(&ds, &cfg, 5).unwrap();
        let j1 = Checkpoint::from_store(&p1, 5).to_json().unwrap();
        let j2 = Checkpoint::from_store(&p2, 5).to_json().unwrap();
        assert_eq!(j1, j2, "same seed must reproduce the checkpoint byte for byte");
    }

    #[test]
    fn trained_model_orders_time_on_heldout_data() {
        let config = DungeonConfig::default();
        let ds = generate_dataset(&config, Task::Score, 32).unwrap();
        let cfg = ProgressConfig {
            steps: 1600,
            batch_size: 32,
            lr: 1e-3,
            eval_interval: 100,
            eval_pairs: 256,
            ..Default::default()
        };
        let (params, log) = train_progress(&ds, &cfg, 11).unwrap();
        let net = ProgressNet::new(config.height, config.width);
        let (_, held) = split_dataset(&ds, cfg.eval_fraction);

        // Training must at least halve the held-out MSE.
        let first = log.first().unwrap().heldout_mse;
        let last = log.last().unwrap().heldout_mse;
        assert!(
            last * 2.0 <= first,
            "held-out MSE only moved {first} -> {last}; expected at least 2x improvement"
        );

        // ...and beat the mean predictor (whose MSE is the target variance)
        // by the same factor.
        let mut var_rng = ChaCha8Rng::seed_from_u64(123);
        let targets: Vec<f64> = (0..2000)
            .map(|_| pair_target(sample_progress_pair(&held, &mut var_rng).dt, cfg.signed))
            .collect();
        let target_var = std_dev(&targets).powi(2);
        assert!(
            last <= 0.5 * target_var,
            "held-out MSE {last} vs target variance {target_var}: mean predictor not beaten 2x"
        );

        // Binned monotonicity: mean prediction rises with the offset's
        // magnitude bin [2^j, 2^(j+1)) for j = 0..5 on held-out pairs.
        let mut bin_means = Vec::new();
        for j in 0..6 {
            let (lo, hi) = (1usize << j, 1usize << (j + 1));
            let mut a = Vec::new();
            let mut b = Vec::new();
            for (ep_idx, ep) in held.episodes().iter().enumerate() {
                for t in (0..ep.len()).step_by(3) {
                    let dt = lo + (t + ep_idx) % (hi - lo);
                    if t + dt <= ep.len() {
                        a.push(held.obs(ep_idx, t));
                        b.push(held.obs(ep_idx, t + dt));
                    }
                }
            }
            assert!(a.len() >= 20, "bin {j} too thin: {} pairs", a.len());
            let preds = net.predict(&params, &a, &b);
            bin_means.push(mean(&preds));
        }
        for j in 1..bin_means.len() {
            assert!(
                bin_means[j] > bin_means[j - 1],
                "bin means not increasing: {bin_means:?}"
            );
        }

        // A state paired with itself should read as no progress for most
        // states even though Δt = 0 never appears in training.
        let mut same = Vec::new();
        for (ep_idx, ep) in ds.episodes().iter().enumerate() {
            for t in (0..=ep.len()).step_by(7) {
                same.push(ds.obs(ep_idx, t));
            }
        }
        same.truncate(400);
        let preds = net.predict(&params, &same, &same);
        let in_band = preds.iter().filter(|g| g.abs() < 0.5).count();
        assert!(
            in_band as f64 >= 0.8 * preds.len() as f64,
            "only {in_band}/{} self-pairs inside |g| < 0.5",
            preds.len()
        );

        // Direction: a 32-step forward pair must outscore its reversal on
        // at least 90% of held-out anchors.
        let mut fwd_a = Vec::new();
        let mut fwd_b = Vec::new();
        for (ep_idx, ep) in held.episodes().iter().enumerate() {
            for t in 0..ep.len().saturating_sub(32) {
                fwd_a.push(held.obs(ep_idx, t));
                fwd_b.push(held.obs(ep_idx, t + 32));
                if fwd_a.len() >= 200 {
                    break;
                }
            }
        }
        assert!(fwd_a.len() >= 30, "not enough 32-step pairs: {}", fwd_a.len());
        let forward = net.predict(&params, &fwd_a, &fwd_b);
        let reversed = net.predict(&params, &fwd_b, &fwd_a);
        let wins = forward.iter().zip(&reversed).filter(|(f, r)| f > r).count();
        assert!(
            wins as f64 >= 0.9 * forward.len() as f64,
            "forward pair outscored its reversal on only {wins}/{}",
            forward.len()
        );
    }
}
