#![allow(dead_code)]

use contlab::numerics::Tensor;
use contlab::stream::{self, GenConfig, Stream};
use contlab::trainer::{Dims, TrainConfig};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub fn rows(r: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(r).unwrap()
}

/// Small stream: `d_t = d_v = 4`, balanced classes.
pub fn small_stream(
    seed: u64,
    events: usize,
    per_event: usize,
    separation: f64,
    drift: f64,
) -> Stream {
    stream::generate(&GenConfig {
        num_events: events,
        samples_per_event: per_event,
        d_t: 4,
        d_v: 4,
        separation,
        drift_speed: drift,
        seed,
        ..GenConfig::default()
    })
    .unwrap()
}

pub fn small_dims() -> Dims {
    Dims {
        d_t: 4,
        d_v: 4,
        d_z: 4,
        d_e: 4,
        d_env: 4,
        d_g: 2,
        d_h: 8,
        r: 2,
    }
}

pub fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        dims: small_dims(),
        seed,
        max_epochs: 4,
        ..TrainConfig::default()
    }
}

use contlab::stream::{Batch, Split};
use contlab::trainer::{Model, StepInputs};

/// A model mid-way through event 2 with a step prepared on a 4-row batch
/// (two fake rows), so every loss term is live and the dynamics path
/// integrates from `t0 = 1` to `t = 2`.
pub fn gradient_fixture(seed: u64) -> (Model, StepInputs) {
    let s = small_stream(seed, 2, 60, 2.0, 1.0);
    let mut config = small_config(seed);
    // the tape treats accepted step sizes as constants; tight tolerances make
    // their parameter sensitivity negligible next to the finite-difference step
    config.solver = contlab::odeint::SolverConfig::with_tolerances(1e-11, 1e-11);
    let mut model = Model::new(config).unwrap();
    let pick = |k: usize| -> Batch {
        let train = s.samples_of(k, Split::Train);
        let fake: Vec<_> = train.iter().filter(|x| x.y == 1).take(2).copied().collect();
        let real: Vec<_> = train.iter().filter(|x| x.y == 0).take(2).copied().collect();
        Batch::from_samples(&[fake[0], real[0], fake[1], real[1]]).unwrap()
    };
    model.begin_event(1).unwrap();
    model.train_step(&pick(1)).unwrap();
    model.train_step(&pick(1)).unwrap();
    model.begin_event(2).unwrap();
    let inputs = model.prepare_step(&pick(2), &mut rng(seed + 1)).unwrap();
    (model, inputs)
}
