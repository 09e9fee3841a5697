//! Contrastive pre-training of the state encoder.
//!
//! The encoder scores state pairs with a bilinear-style implicit model
//! `f(s, s') = ⟨φ(torso(s)), ψ(torso(s'))⟩ / √d`: one shared convolutional
//! torso, two distinct projection heads. Training classifies, for each
//! anchor in a batch, which of the batch's candidate states is the anchor's
//! true geometric-offset future — softmax cross-entropy over a score matrix.
//! The two heads stay asymmetric on purpose: the quantity the scores
//! approximate (a discounted future-state density ratio) is not symmetric in
//! its arguments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::demos::{sample_anchor_positive, DemoDataset};
use crate::encode::{encode_batch, OBS_CHANNELS};
use crate::env::Observation;
use crate::layers::{backward, forward, Layer, Stack};
use crate::loss::softmax_cross_entropy;
use crate::nd::{dot, gemm_nn, gemm_tn, matmul_nt, NdArray};
use crate::params::{AdamConfig, Grads, OptimError, ParamStore};
use crate::Real;

/// Feature dimension shared by the torso output and both heads.
pub const FEAT_DIM: usize = 64;

/// Convolutional torso: `[B, in_ch, H, W] -> [B, FEAT_DIM]`. Parameter names
/// are `torso.c1.*`, `torso.c2.*`, `torso.fc.*`.
pub fn torso_stack(in_channels: usize, height: usize, width: usize) -> Stack {
    Stack::new(vec![
        Layer::conv2d("torso.c1", in_channels, 8),
        Layer::Relu,
        Layer::conv2d("torso.c2", 8, 16),
        Layer::Relu,
        Layer::Flatten,
        Layer::dense("torso.fc", 16 * height * width, FEAT_DIM),
    ])
}

/// Encoder: shared torso plus the two projection heads.
pub struct EncoderNet {
    pub torso: Stack,
    pub phi: Stack,
    pub psi: Stack,
    pub height: usize,
    pub width: usize,
}

impl EncoderNet {
    pub fn new(height: usize, width: usize) -> EncoderNet {
        EncoderNet {
            torso: torso_stack(OBS_CHANNELS, height, width),
            phi: Stack::new(vec![Layer::dense("phi", FEAT_DIM, FEAT_DIM)]),
            psi: Stack::new(vec![Layer::dense("psi", FEAT_DIM, FEAT_DIM)]),
            height,
            width,
        }
    }

    /// Fresh parameters for torso and both heads.
    pub fn init_params(&self, rng: &mut impl Rng) -> ParamStore<Real> {
        let mut params = ParamStore::new();
        self.torso.init_params(&mut params, rng);
        self.phi.init_params(&mut params, rng);
        self.psi.init_params(&mut params, rng);
        params
    }

    /// Anchor-side embeddings `φ(torso(s))`, forward only.
    pub fn anchor_embeddings(&self, params: &ParamStore<Real>, obs: &[&Observation]) -> NdArray<Real> {
        let (f, _) = forward(&self.torso, params, &encode_batch(obs));
        forward(&self.phi, params, &f).0
    }

    /// Target-side embeddings `ψ(torso(s))`, forward only.
    pub fn target_embeddings(&self, params: &ParamStore<Real>, obs: &[&Observation]) -> NdArray<Real> {
        let (f, _) = forward(&self.torso, params, &encode_batch(obs));
        forward(&self.psi, params, &f).0
    }
}

/// Score one pair: `⟨φ(torso(s)), ψ(torso(s'))⟩ / √d`. Not symmetric — the
/// two heads are distinct parameter sets.
pub fn score(net: &EncoderNet, params: &ParamStore<Real>, s: &Observation, sp: &Observation) -> Real {
    let a = net.anchor_embeddings(params, &[s]);
    let b = net.target_embeddings(params, &[sp]);
    dot(a.row(0), b.row(0)) / (FEAT_DIM as Real).sqrt()
}

/// Score matrix `[n_anchors, n_targets]` between two observation sets.
pub fn score_matrix(
    net: &EncoderNet,
    params: &ParamStore<Real>,
    anchors: &[&Observation],
    targets: &[&Observation],
) -> NdArray<Real> {
    let ea = net.anchor_embeddings(params, anchors);
    let ep = net.target_embeddings(params, targets);
    let scale = 1.0 / (FEAT_DIM as Real).sqrt();
    matmul_nt(&ea, &ep).map(|v| v * scale)
}

/// Fraction of rows whose maximum sits on the diagonal.
fn diagonal_accuracy(logits: &NdArray<Real>) -> f64 {
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    let mut hits = 0usize;
    for i in 0..b {
        let row = &logits.data()[i * k..(i + 1) * k];
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite scores"))
            .unwrap()
            .0;
        if argmax == i {
            hits += 1;
        }
    }
    hits as f64 / b as f64
}

/// In-batch contrastive loss over `B` (anchor, positive) pairs: row `i` of
/// the `B x B` score matrix is classified against target `i`, so every other
/// pair's positive serves as a negative. Returns (loss, batch accuracy,
/// gradients for torso and both heads).
pub fn contrastive_batch_loss(
    net: &EncoderNet,
    params: &ParamStore<Real>,
    anchors: &[&Observation],
    positives: &[&Observation],
) -> (Real, f64, Grads<Real>) {
    let b = anchors.len();
    assert!(b >= 2, "in-batch contrastive loss needs B >= 2, got {b}");
    assert_eq!(positives.len(), b, "one positive per anchor");
    let d = FEAT_DIM;
    let scale = 1.0 / (d as Real).sqrt();

    let (fa, tape_a) = forward(&net.torso, params, &encode_batch(anchors));
    let (fp, tape_p) = forward(&net.torso, params, &encode_batch(positives));
    let (ea, tape_phi) = forward(&net.phi, params, &fa);
    let (ep, tape_psi) = forward(&net.psi, params, &fp);

    let logits = matmul_nt(&ea, &ep).map(|v| v * scale);
    let targets: Vec<usize> = (0..b).collect();
    let (loss, dlogits) = softmax_cross_entropy(&logits, &targets);
    let acc = diagonal_accuracy(&logits);

    let dlogits = dlogits.map(|v| v * scale);
    let mut dea = NdArray::zeros(&[b, d]);
    gemm_nn(b, b, d, dlogits.data(), ep.data(), dea.data_mut(), false);
    let mut dep = NdArray::zeros(&[b, d]);
    gemm_tn(b, b, d, dlogits.data(), ea.data(), dep.data_mut(), false);

    let mut grads = Grads::new();
    let dfa = backward(&net.phi, params, &tape_phi, &dea, &mut grads);
    let dfp = backward(&net.psi, params, &tape_psi, &dep, &mut grads);
    backward(&net.torso, params, &tape_a, &dfa, &mut grads);
    backward(&net.torso, params, &tape_p, &dfp, &mut grads);
    (loss, acc, grads)
}

/// Contrastive loss with explicit per-anchor candidate sets instead of
/// in-batch sharing. `candidates[i][0]` must be anchor `i`'s positive; the
/// rest are its negatives. Costs `B x K` torso passes — kept for fidelity
/// experiments, not the training default.
pub fn contrastive_batch_loss_explicit(
    net: &EncoderNet,
    params: &ParamStore<Real>,
    anchors: &[&Observation],
    candidates: &[Vec<&Observation>],
) -> (Real, f64, Grads<Real>) {
    let b = anchors.len();
    assert!(b >= 1 && !candidates.is_empty(), "empty explicit batch");
    assert_eq!(candidates.len(), b, "one candidate set per anchor");
    let k = candidates[0].len();
    assert!(k >= 2, "need at least one negative per anchor");
    assert!(candidates.iter().all(|c| c.len() == k), "ragged candidate sets");
    let d = FEAT_DIM;
    let scale = 1.0 / (d as Real).sqrt();

    let flat: Vec<&Observation> = candidates.iter().flatten().copied().collect();
    let (fa, tape_a) = forward(&net.torso, params, &encode_batch(anchors));
    let (fc, tape_c) = forward(&net.torso, params, &encode_batch(&flat));
    let (ea, tape_phi) = forward(&net.phi, params, &fa);
    let (ec, tape_psi) = forward(&net.psi, params, &fc);

    let mut logits = NdArray::zeros(&[b, k]);
    for i in 0..b {
        for j in 0..k {
            logits.row_mut(i)[j] = dot(ea.row(i), ec.row(i * k + j)) * scale;
        }
    }
    let targets = vec![0usize; b];
    let (loss, dlogits) = softmax_cross_entropy(&logits, &targets);
    let acc = {
        let mut hits = 0usize;
        for i in 0..b {
            let row = logits.row(i);
            if row.iter().all(|&v| v <= row[0]) && row[1..].iter().all(|&v| v < row[0]) {
                hits += 1;
            }
        }
        hits as f64 / b as f64
    };

    let mut dea = NdArray::zeros(&[b, d]);
    let mut dec = NdArray::zeros(&[b * k, d]);
    for i in 0..b {
        for j in 0..k {
            let g = dlogits.row(i)[j] * scale;
            for t in 0..d {
                dea.row_mut(i)[t] += g * ec.row(i * k + j)[t];
                dec.row_mut(i * k + j)[t] += g * ea.row(i)[t];
            }
        }
    }

    let mut grads = Grads::new();
    let dfa = backward(&net.phi, params, &tape_phi, &dea, &mut grads);
    let dfc = backward(&net.psi, params, &tape_psi, &dec, &mut grads);
    backward(&net.torso, params, &tape_a, &dfa, &mut grads);
    backward(&net.torso, params, &tape_c, &dfc, &mut grads);
    (loss, acc, grads)
}

/// Pre-training hyperparameters.
#[derive(Clone, Debug)]
pub struct PretrainConfig {
    /// Geometric discount over positive offsets.
    pub gamma_c: f64,
    /// Anchors per batch.
    pub batch_size: usize,
    /// Candidates per anchor in explicit-negative mode (ignored in-batch,
    /// where every row has `batch_size` candidates).
    pub candidates: usize,
    /// Optimizer steps.
    pub steps: usize,
    pub lr: f64,
    /// Fraction of episodes held out for evaluation.
    pub eval_fraction: f64,
    /// Steps between metric rows (step 0 and the final step always log).
    pub eval_interval: usize,
    /// Batches averaged per held-out evaluation.
    pub eval_batches: usize,
    /// Share positives as negatives across the batch (the training default);
    /// `false` samples explicit per-anchor negatives instead.
    pub in_batch: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            gamma_c: 0.95,
            batch_size: 64,
            candidates: 64,
            steps: 20_000,
            lr: 3e-4,
            eval_fraction: 0.1,
            eval_interval: 500,
            eval_batches: 4,
            in_batch: true,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) {
        assert!(self.gamma_c > 0.0 && self.gamma_c < 1.0, "gamma_c must be in (0,1)");
        assert!(self.batch_size >= 2, "batch size must be at least 2");
        assert!(
            self.candidates <= self.batch_size,
            "candidates per anchor cannot exceed the batch size"
        );
        assert!(self.steps >= 1, "need at least one training step");
        assert!(self.lr > 0.0, "learning rate must be positive");
        assert!(
            (0.0..1.0).contains(&self.eval_fraction),
            "eval fraction must be in [0,1)"
        );
        assert!(self.eval_interval >= 1 && self.eval_batches >= 1);
    }
}

/// One metrics row of the training log.
#[derive(Clone, Copy, Debug)]
pub struct PretrainLogRow {
    pub step: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub heldout_acc: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum PretrainError {
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("training diverged at step {step}: non-finite gradient for `{name}`")]
    BadGradient { step: usize, name: String },
}

/// Split episodes into (train, held-out) by the eval fraction; the tail of
/// the episode list is held out. A zero fraction yields an empty held-out
/// set and evaluation falls back to the training split.
pub fn split_dataset(ds: &DemoDataset, eval_fraction: f64) -> (DemoDataset, DemoDataset) {
    let n = ds.n_episodes();
    let n_held = if eval_fraction > 0.0 {
        (((n as f64) * eval_fraction).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let episodes = ds.episodes();
    let config = ds.manifest().config.clone();
    let train = DemoDataset::from_episodes(config.clone(), episodes[..n - n_held].to_vec());
    let held = DemoDataset::from_episodes(config, episodes[n - n_held..].to_vec());
    (train, held)
}

fn assemble_pairs<'a>(
    ds: &'a DemoDataset,
    rng: &mut impl Rng,
    gamma_c: f64,
    b: usize,
) -> (Vec<&'a Observation>, Vec<&'a Observation>) {
    let mut anchors = Vec::with_capacity(b);
    let mut positives = Vec::with_capacity(b);
    for _ in 0..b {
        let (a, p, _) = sample_anchor_positive(ds, rng, gamma_c);
        anchors.push(a);
        positives.push(p);
    }
    (anchors, positives)
}

/// Mean in-batch accuracy over `n_batches` freshly sampled batches. Pure
/// given the seed.
pub fn eval_accuracy(
    net: &EncoderNet,
    params: &ParamStore<Real>,
    ds: &DemoDataset,
    cfg: &PretrainConfig,
    n_batches: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (FEAT_DIM as Real).sqrt();
    let mut acc = 0.0;
    for _ in 0..n_batches {
        let (anchors, positives) = assemble_pairs(ds, &mut rng, cfg.gamma_c, cfg.batch_size);
        let ea = net.anchor_embeddings(params, &anchors);
        let ep = net.target_embeddings(params, &positives);
        let logits = matmul_nt(&ea, &ep).map(|v| v * scale);
        acc += diagonal_accuracy(&logits);
    }
    acc / n_batches as f64
}

/// Train the encoder on a demonstration dataset. Returns the final
/// parameters and the metrics log (train loss/accuracy of the pre-update
/// batch, held-out accuracy, one row per eval interval).
pub fn train_encoder(
    ds: &DemoDataset,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(ParamStore<Real>, Vec<PretrainLogRow>), PretrainError> {
    cfg.validate();
    let (train, held) = split_dataset(ds, cfg.eval_fraction);
    let eval_split = if held.n_episodes() > 0 { &held } else { &train };
    let config = &ds.manifest().config;
    let net = EncoderNet::new(config.height, config.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = net.init_params(&mut rng);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut log = Vec::new();

    for step in 0..cfg.steps {
        let (loss, acc, grads) = if cfg.in_batch {
            let (anchors, positives) = assemble_pairs(&train, &mut rng, cfg.gamma_c, cfg.batch_size);
            contrastive_batch_loss(&net, &params, &anchors, &positives)
        } else {
            let mut anchors = Vec::with_capacity(cfg.batch_size);
            let mut candidates = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let s = crate::demos::sample_contrastive(&train, &mut rng, cfg.gamma_c, cfg.candidates);
                anchors.push(s.anchor);
                let mut c = vec![s.positive];
                c.extend(s.negatives);
                candidates.push(c);
            }
            contrastive_batch_loss_explicit(&net, &params, &anchors, &candidates)
        };
        if !loss.is_finite() {
            return Err(PretrainError::Diverged { step, loss });
        }
        if step % cfg.eval_interval == 0 || step + 1 == cfg.steps {
            let heldout_acc =
                eval_accuracy(&net, &params, eval_split, cfg, cfg.eval_batches, seed ^ step as u64);
            log.push(PretrainLogRow { step, train_loss: loss, train_acc: acc, heldout_acc });
        }
        match params.adam_step(&grads, &adam) {
            Ok(()) => {}
            Err(OptimError::NonFiniteGrad { name }) => {
                return Err(PretrainError::BadGradient { step, name });
            }
            Err(other) => panic!("all encoder parameters receive gradients: {other}"),
        }
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demos::{generate_dataset, Episode};
    use crate::env::{DungeonConfig, Task, TILE_AGENT, TILE_FLOOR};
    use crate::gradcheck::{clear_relu_kinks, finite_diff_check, pre_activations_clear_of_kinks};

    /// Observations for a deterministic 5-state cycle on a 3x3 grid: state i
    /// has the agent at cell i, floor elsewhere.
    fn cycle_state(i: usize) -> Observation {
        let mut tiles = vec![TILE_FLOOR; 9];
        tiles[i] = TILE_AGENT;
        Observation { tiles, width: 3, height: 3, status: [0.0, 0.0, 0.0] }
    }

    /// Episodes that walk the 5-cycle; the ideal encoder ranks s_{i+1}
    /// highest among candidate futures of s_i.
    fn cycle_dataset(n_episodes: usize, t_len: usize) -> DemoDataset {
        let config = DungeonConfig { width: 3, height: 3, ..DungeonConfig::default() };
        let episodes = (0..n_episodes)
            .map(|e| Episode {
                task: Task::Score,
                seed: e as u64,
                observations: (0..=t_len).map(|t| cycle_state((e + t) % 5)).collect(),
                rewards: vec![0.0; t_len],
            })
            .collect();
        DemoDataset::from_episodes(config, episodes)
    }

    fn small_cfg() -> PretrainConfig {
        PretrainConfig {
            batch_size: 16,
            candidates: 16,
            steps: 600,
            lr: 1e-3,
            gamma_c: 0.7,
            eval_interval: 100,
            eval_batches: 4,
            ..PretrainConfig::default()
        }
    }

    #[test]
    fn zero_heads_score_zero_and_scores_are_asymmetric_in_general() {
        let net = EncoderNet::new(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = net.init_params(&mut rng);
        let (s, sp) = (cycle_state(0), cycle_state(3));
        // Zero both heads: every score collapses to zero exactly.
        for name in ["phi.w", "phi.b", "psi.w", "psi.b"] {
            let z = NdArray::zeros(params.get(name).shape());
            *params.get_mut(name) = z;
        }
        assert_eq!(score(&net, &params, &s, &sp), 0.0);
        // Fresh random heads: no symmetry constraint ties the two directions.
        let params = net.init_params(&mut rng);
        let ab = score(&net, &params, &s, &sp);
        let ba = score(&net, &params, &sp, &s);
        assert!(ab.is_finite() && ba.is_finite());
        assert!((ab - ba).abs() > 1e-12, "distinct heads break symmetry: {ab} vs {ba}");
    }

    #[test]
    fn identical_embeddings_give_log_b_loss() {
        let net = EncoderNet::new(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = net.init_params(&mut rng);
        // One repeated state: every row of the score matrix is constant, so
        // the softmax is uniform and the loss is exactly ln B.
        let s = cycle_state(2);
        let batch: Vec<&Observation> = vec![&s; 8];
        let (loss, _, _) = contrastive_batch_loss(&net, &params, &batch, &batch);
        assert!((loss - (8.0f64).ln()).abs() < 1e-12, "loss {loss} vs ln 8");
    }

    #[test]
    #[should_panic(expected = "B >= 2")]
    fn single_pair_batches_are_rejected() {
        let net = EncoderNet::new(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = net.init_params(&mut rng);
        let s = cycle_state(0);
        contrastive_batch_loss(&net, &params, &[&s], &[&s]);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let net = EncoderNet::new(3, 3);
        let anchors_owned: Vec<Observation> = (0..4).map(cycle_state).collect();
        let positives_owned: Vec<Observation> = (1..5).map(cycle_state).collect();
        let anchors: Vec<&Observation> = anchors_owned.iter().collect();
        let positives: Vec<&Observation> = positives_owned.iter().collect();
        // Pre-activations must stay clear of relu kinks for both torso
        // passes, so central differences see a smooth loss.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = net.init_params(&mut rng);
        let xa = encode_batch::<Real>(&anchors);
        let xp = encode_batch::<Real>(&positives);
        clear_relu_kinks(&net.torso, &mut params, &[&xa, &xp], 1e-3);
        assert!(pre_activations_clear_of_kinks(&net.torso, &params, &xa, 1e-3));
        assert!(pre_activations_clear_of_kinks(&net.torso, &params, &xp, 1e-3));
        let (_, _, grads) = contrastive_batch_loss(&net, &params, &anchors, &positives);
        let report = finite_diff_check(&mut params, &grads, 1e-5, 1e-7, |p| {
            contrastive_batch_loss(&net, p, &anchors, &positives).0
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
    fn explicit_negative_gradient_matches_finite_differences() {
        let net = EncoderNet::new(3, 3);
        let states: Vec<Observation> = (0..5).map(cycle_state).collect();
        let anchors: Vec<&Observation> = vec![&states[0], &states[2]];
        let candidates: Vec<Vec<&Observation>> =
            vec![vec![&states[1], &states[3], &states[4]], vec![&states[3], &states[0], &states[1]]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = net.init_params(&mut rng);
        let xa = encode_batch::<Real>(&anchors);
        let flat: Vec<&Observation> = candidates.iter().flatten().copied().collect();
        let xc = encode_batch::<Real>(&flat);
        clear_relu_kinks(&net.torso, &mut params, &[&xa, &xc], 1e-3);
        let (_, _, grads) = contrastive_batch_loss_explicit(&net, &params, &anchors, &candidates);
        let report = finite_diff_check(&mut params, &grads, 1e-5, 1e-7, |p| {
            contrastive_batch_loss_explicit(&net, p, &anchors, &candidates).0
        });
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn row_shifts_leave_loss_and_accuracy_unchanged() {
        // Softmax cross-entropy is invariant to adding a constant per row;
        // inject the constant explicitly into a real score matrix.
        let net = EncoderNet::new(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = net.init_params(&mut rng);
        let states: Vec<Observation> = (0..5).map(cycle_state).collect();
        let anchors: Vec<&Observation> = states.iter().take(4).collect();
        let targets_obs: Vec<&Observation> = states.iter().skip(1).collect();
        let logits = score_matrix(&net, &params, &anchors, &targets_obs);
        let targets: Vec<usize> = (0..4).collect();
        let (loss, _) = softmax_cross_entropy(&logits, &targets);
        let acc = diagonal_accuracy(&logits);
        let mut shifted = logits.clone();
        for i in 0..4 {
            let c = 3.7 * (i as f64 + 1.0);
            for v in shifted.row_mut(i) {
                *v += c;
            }
        }
        let (loss_s, _) = softmax_cross_entropy(&shifted, &targets);
        assert!((loss - loss_s).abs() < 1e-9, "{loss} vs {loss_s}");
        assert_eq!(acc, diagonal_accuracy(&shifted));
    }

    #[test]
    fn accuracy_is_invariant_under_embedding_rescale() {
        let net = EncoderNet::new(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = net.init_params(&mut rng);
        let states: Vec<Observation> = (0..5).map(cycle_state).collect();
        let anchors: Vec<&Observation> = states.iter().take(4).collect();
        let targets: Vec<&Observation> = states.iter().skip(1).collect();
        let ea = net.anchor_embeddings(&params, &anchors);
        let ep = net.target_embeddings(&params, &targets);
        let base = diagonal_accuracy(&matmul_nt(&ea, &ep));
        let lambda = 2.5;
        let scaled = matmul_nt(&ea.map(|v| v * lambda), &ep.map(|v| v * lambda));
        assert_eq!(base, diagonal_accuracy(&scaled));
    }

    #[test]
    fn training_on_a_cycle_ranks_successors_first() {
        let ds = cycle_dataset(8, 25);
        let (params, log) = train_encoder(&ds, &small_cfg(), 11).unwrap();
        let net = EncoderNet::new(3, 3);
        // Canonical batch: anchor i = state i, positive i = its successor.
        let states: Vec<Observation> = (0..5).map(cycle_state).collect();
        let anchors: Vec<&Observation> = states.iter().collect();
        let successors: Vec<&Observation> =
            (0..5).map(|i| &states[(i + 1) % 5]).collect();
        let logits = score_matrix(&net, &params, &anchors, &successors);
        let acc = diagonal_accuracy(&logits);
        assert!(acc >= 0.9, "successor ranked first for only {acc} of anchors");
        // Loss fell well below its ln B starting plateau.
        let first = log.first().unwrap();
        let last = log.last().unwrap();
        assert!(last.train_loss < first.train_loss);
    }

    #[test]
    fn heldout_accuracy_beats_chance_after_training() {
        // Real demonstrations: distinct states throughout, so in-batch
        // accuracy is not capped by duplicate-positive ties.
        let config = DungeonConfig::default();
        let ds = generate_dataset(&config, Task::Score, 48).unwrap();
        let cfg = PretrainConfig {
            gamma_c: 0.8,
            batch_size: 16,
            candidates: 16,
            steps: 900,
            lr: 2e-3,
            eval_interval: 100,
            eval_batches: 4,
            ..PretrainConfig::default()
        };
        let (params, log) = train_encoder(&ds, &cfg, 7).unwrap();
        let net = EncoderNet::new(config.height, config.width);
        let (_, held) = split_dataset(&ds, cfg.eval_fraction);
        let n_batches = 8;
        let acc = eval_accuracy(&net, &params, &held, &cfg, n_batches, 99);
        let chance = 1.0 / cfg.batch_size as f64;
        let n_rows = (n_batches * cfg.batch_size) as f64;
        let se = (acc.max(chance) * (1.0 - acc.max(chance)) / n_rows).sqrt();
        assert!(
            acc > chance + 5.0 * se,
            "held-out accuracy {acc} does not beat chance {chance} by 5 SE ({se})"
        );
        // At step 0 accuracy is chance-level: random init knows nothing.
        let first = log.first().unwrap();
        let sigma0 = (chance * (1.0 - chance) / (cfg.eval_batches * cfg.batch_size) as f64).sqrt();
        assert!(
            (first.heldout_acc - chance).abs() <= 3.0 * sigma0 + 1e-9,
            "step-0 accuracy {} strays from chance {chance}",
            first.heldout_acc
        );
    }

    #[test]
    fn same_seed_reproduces_identical_checkpoints() {
        let ds = cycle_dataset(6, 20);
        let cfg = PretrainConfig { steps: 40, batch_size: 8, candidates: 8, ..small_cfg() };
        let (p1, _) = train_encoder(&ds, &cfg, 123).unwrap();
        let (p2, _) = train_encoder(&ds, &cfg, 123).unwrap();
        let c1 = crate::ckpt::Checkpoint::from_store(&p1, 123).to_json().unwrap();
        let c2 = crate::ckpt::Checkpoint::from_store(&p2, 123).to_json().unwrap();
        assert_eq!(c1, c2, "same seed must yield byte-identical checkpoints");
    }

    #[test]
    fn explicit_negative_mode_also_learns_the_cycle() {
        let ds = cycle_dataset(8, 25);
        let cfg = PretrainConfig {
            in_batch: false,
            batch_size: 8,
            candidates: 6,
            steps: 2500,
            ..small_cfg()
        };
        let (params, _) = train_encoder(&ds, &cfg, 5).unwrap();
        let net = EncoderNet::new(3, 3);
        let states: Vec<Observation> = (0..5).map(cycle_state).collect();
        let anchors: Vec<&Observation> = states.iter().collect();
        let successors: Vec<&Observation> = (0..5).map(|i| &states[(i + 1) % 5]).collect();
        let acc = diagonal_accuracy(&score_matrix(&net, &params, &anchors, &successors));
        assert!(acc >= 0.8, "explicit-negative training reached only {acc}");
    }

    #[test]
    fn trained_beats_random_on_real_demonstrations() {
        let config = DungeonConfig::default();
        let ds = generate_dataset(&config, Task::Score, 12).unwrap();
        let cfg = PretrainConfig {
            batch_size: 16,
            candidates: 16,
            steps: 220,
            lr: 1e-3,
            eval_interval: 50,
            ..PretrainConfig::default()
        };
        let (trained, _) = train_encoder(&ds, &cfg, 31).unwrap();
        let net = EncoderNet::new(config.height, config.width);
        let mut rng = ChaCha8Rng::seed_from_u64(500);
        let random = net.init_params(&mut rng);
        let (_, held) = split_dataset(&ds, cfg.eval_fraction);
        // Paired comparison on identical batch seeds.
        let accs_trained: Vec<f64> =
            (0..20).map(|i| eval_accuracy(&net, &trained, &held, &cfg, 1, 1000 + i)).collect();
        let accs_random: Vec<f64> =
            (0..20).map(|i| eval_accuracy(&net, &random, &held, &cfg, 1, 1000 + i)).collect();
        let p = crate::stats::paired_t_pvalue_greater(&accs_trained, &accs_random);
        assert!(p < 0.01, "trained encoder not significantly better (p = {p})");
        for a in accs_trained.iter().chain(&accs_random) {
            assert!((0.0..=1.0).contains(a));
        }
    }
}
