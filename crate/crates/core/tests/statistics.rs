//! Statistical checks of the sampling primitives (fixed seeds, pinned critical values).

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use collusion_core::agent::{encode_observation, select_action, ReplayBuffer, Transition};
use collusion_core::env::{Action, GameHistory};
use collusion_core::nn::{Activation, QNetwork};

fn chi_square(counts: &[usize], expected: &[f64]) -> f64 {
    counts.iter().zip(expected).map(|(&c, &e)| (c as f64 - e).powi(2) / e).sum()
}

#[test]
fn replay_sampling_is_uniform() {
    // 99% critical value of chi-square with 9 degrees of freedom
    const CHI2_DF9_99: f64 = 21.665994;
    let obs = Arc::new(encode_observation(&GameHistory::new(1), 1, 1, None));
    let mut buf = ReplayBuffer::new(10);
    for k in 0..25 {
        buf.remember(Transition {
            obs: Arc::clone(&obs),
            action: Action::Paper,
            reward: k as f64,
            next_obs: Arc::clone(&obs),
            terminal: false,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts = [0usize; 10];
    for i in buf.sample_indices(&mut rng, 50_000) {
        counts[i] += 1;
    }
    let chi = chi_square(&counts, &[5_000.0; 10]);
    assert!(chi < CHI2_DF9_99, "chi2 {chi} counts {counts:?}");
}

#[test]
fn epsilon_mixture_law() {
    let obs = encode_observation(&GameHistory::new(1), 1, 1, None);
    let mut net = QNetwork::zeros(&[9, 3], Activation::Linear).unwrap();
    net.layer_mut(0).set_bias(2, 1.0);
    for (seed, eps) in [(1u64, 0.1), (2, 0.5), (3, 0.9)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 30_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[select_action(&net, &obs, eps, &mut rng).unwrap().code()] += 1;
        }
        let other = eps / 3.0 * n as f64;
        let expected = [other, other, n as f64 - 2.0 * other];
        let chi = chi_square(&counts, &expected);
        assert!(chi < 9.2103, "eps {eps}: chi2 {chi} counts {counts:?}");
    }
}
