//! Fixtures shared by the benchmarks.

use evisurro_core::evidential::ParamGradient;
use evisurro_core::{CalibrationOptions, CalibrationTable, EvidentialNet, NetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRID: [usize; 2] = [32, 32];

pub fn net(hidden: usize) -> EvidentialNet {
    EvidentialNet::init(NetConfig {
        input_dim: 3,
        hidden_sizes: vec![hidden, hidden],
        grid_shape: GRID.to_vec(),
        seed: 0,
    })
    .expect("valid config")
}

pub fn upstream(n: usize) -> Vec<ParamGradient> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..n)
        .map(|_| ParamGradient {
            gamma: rng.random_range(-1.0..1.0),
            nu: rng.random_range(-1.0..1.0),
            alpha_shape: rng.random_range(-1.0..1.0),
            beta_scale: rng.random_range(-1.0..1.0),
        })
        .collect()
}

/// Random per-member score rows: `members` rows of `elements` scores each.
pub fn score_rows(members: usize, elements: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..members)
        .map(|_| (0..elements).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn table(members: usize, pooled: bool) -> CalibrationTable {
    let n: usize = GRID.iter().product();
    CalibrationTable::from_member_scores(
        GRID.to_vec(),
        0.1,
        CalibrationOptions {
            pooled,
            ..CalibrationOptions::default()
        },
        (0..members as u64).collect(),
        &score_rows(members, n, 2),
        &score_rows(members, n, 3),
    )
    .expect("consistent rows")
}
