//! Observation → network-input encoding.
//!
//! Tiles become one-hot planes; the level and score entries of the status
//! vector become constant broadcast planes. The step counter is deliberately
//! left out of the encoding: a network that can read elapsed time off the
//! input can regress temporal distance without looking at the world at all,
//! which would hollow out both the contrastive and the progress objectives.

use crate::env::{Observation, N_TILE_CODES};
use crate::nd::NdArray;
use crate::scalar::Scalar;

/// Channels per observation: one-hot tile planes plus level and score.
pub const OBS_CHANNELS: usize = N_TILE_CODES + 2;

/// Entries of `Observation::status` that get broadcast planes (level, score).
/// The third entry — elapsed steps — is excluded by design.
const STATUS_CHANNELS: usize = 2;

/// Encode observations into a `[B, OBS_CHANNELS, H, W]` batch.
pub fn encode_batch<T: Scalar>(observations: &[&Observation]) -> NdArray<T> {
    assert!(!observations.is_empty(), "cannot encode an empty batch");
    let (w, h) = (observations[0].width, observations[0].height);
    let plane = w * h;
    let mut out = NdArray::zeros(&[observations.len(), OBS_CHANNELS, h, w]);
    for (i, obs) in observations.iter().enumerate() {
        assert_eq!(obs.width, w, "mixed observation widths in one batch");
        assert_eq!(obs.height, h, "mixed observation heights in one batch");
        let sample = &mut out.data_mut()[i * OBS_CHANNELS * plane..(i + 1) * OBS_CHANNELS * plane];
        write_sample(obs, sample, plane);
    }
    out
}

fn write_sample<T: Scalar>(obs: &Observation, sample: &mut [T], plane: usize) {
    for (p, &code) in obs.tiles.iter().enumerate() {
        let code = code as usize;
        assert!(code < N_TILE_CODES, "tile code {code} out of range");
        sample[code * plane + p] = T::one();
    }
    for (k, &s) in obs.status.iter().take(STATUS_CHANNELS).enumerate() {
        let v = T::from_f64_lossy(s as f64);
        sample[(N_TILE_CODES + k) * plane..(N_TILE_CODES + k + 1) * plane].fill(v);
    }
}

/// Encode state pairs into a `[B, 2*OBS_CHANNELS, H, W]` batch by channel
/// concatenation: the first half of the channels encodes `a[i]`, the second
/// half `b[i]`. Used by models that consume two states jointly.
pub fn encode_pair_batch<T: Scalar>(a: &[&Observation], b: &[&Observation]) -> NdArray<T> {
    assert_eq!(a.len(), b.len(), "pair batch sides must have equal length");
    assert!(!a.is_empty(), "cannot encode an empty batch");
    let (w, h) = (a[0].width, a[0].height);
    let plane = w * h;
    let stride = 2 * OBS_CHANNELS * plane;
    let mut out = NdArray::zeros(&[a.len(), 2 * OBS_CHANNELS, h, w]);
    for i in 0..a.len() {
        for (side, obs) in [(0, a[i]), (1, b[i])] {
            assert_eq!(obs.width, w, "mixed observation widths in one batch");
            assert_eq!(obs.height, h, "mixed observation heights in one batch");
            let base = i * stride + side * OBS_CHANNELS * plane;
            write_sample(obs, &mut out.data_mut()[base..base + OBS_CHANNELS * plane], plane);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{DungeonConfig, GameState, Task, TILE_AGENT};
    use crate::Real;

    fn sample_obs(seed: u64) -> Observation {
        let (_, obs) = GameState::reset(&DungeonConfig { seed, ..DungeonConfig::default() }, Task::Score);
        obs
    }

    #[test]
    fn batch_shape_and_one_hot_structure() {
        let o1 = sample_obs(1);
        let o2 = sample_obs(2);
        let x: NdArray<Real> = encode_batch(&[&o1, &o2]);
        assert_eq!(x.shape(), &[2, OBS_CHANNELS, 12, 12]);
        let plane = 144;
        for i in 0..2 {
            let sample = &x.data()[i * OBS_CHANNELS * plane..];
            for p in 0..plane {
                let ones: usize = (0..N_TILE_CODES)
                    .filter(|c| sample[c * plane + p] == 1.0)
                    .count();
                let zeros: usize = (0..N_TILE_CODES)
                    .filter(|c| sample[c * plane + p] == 0.0)
                    .count();
                assert_eq!(ones, 1, "exactly one tile plane is hot at each position");
                assert_eq!(zeros, N_TILE_CODES - 1);
            }
        }
    }

    #[test]
    fn agent_plane_has_exactly_one_cell() {
        let obs = sample_obs(3);
        let x: NdArray<Real> = encode_batch(&[&obs]);
        let plane = 144;
        let agent_sum: Real =
            x.data()[TILE_AGENT as usize * plane..(TILE_AGENT as usize + 1) * plane].iter().sum();
        assert_eq!(agent_sum, 1.0);
    }

    #[test]
    fn status_planes_broadcast_level_and_score() {
        let mut obs = sample_obs(4);
        obs.status = [0.5, 0.25, 0.9];
        let x: NdArray<Real> = encode_batch(&[&obs]);
        let plane = 144;
        let level_plane = &x.data()[N_TILE_CODES * plane..(N_TILE_CODES + 1) * plane];
        let score_plane = &x.data()[(N_TILE_CODES + 1) * plane..(N_TILE_CODES + 2) * plane];
        assert!(level_plane.iter().all(|&v| v == 0.5));
        assert!(score_plane.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn elapsed_steps_do_not_reach_the_network() {
        let a = sample_obs(5);
        let mut b = a.clone();
        b.status[2] = 0.77;
        let xa: NdArray<Real> = encode_batch(&[&a]);
        let xb: NdArray<Real> = encode_batch(&[&b]);
        assert_eq!(xa.data(), xb.data(), "step-counter changes are invisible to the encoding");
    }

    #[test]
    fn pair_batch_concatenates_along_channels() {
        let a = sample_obs(6);
        let b = sample_obs(7);
        let single_a: NdArray<Real> = encode_batch(&[&a]);
        let single_b: NdArray<Real> = encode_batch(&[&b]);
        let pair: NdArray<Real> = encode_pair_batch(&[&a], &[&b]);
        assert_eq!(pair.shape(), &[1, 2 * OBS_CHANNELS, 12, 12]);
        let half = OBS_CHANNELS * 144;
        assert_eq!(&pair.data()[..half], single_a.data());
        assert_eq!(&pair.data()[half..], single_b.data());
    }
}
