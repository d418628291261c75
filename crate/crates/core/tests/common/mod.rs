#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use xivector::model::{ModelConfig, ModelParams};
use xivector::train::{batch_gradient, batch_loss, Example};
use xivector::{Exec, Pooling, Tensor};

pub const FD_STEP: f64 = 1e-5;

/// Micro model used for finite-difference checks: F=4, D=8, C=3.
pub fn micro_params(pooling: Pooling, seed: u64) -> ModelParams {
    let cfg = ModelConfig::desk(4, 8, 4, 5, 3, pooling).unwrap();
    let mut params = ModelParams::init(cfg, seed);
    // Move away from the all-zero biases and prior so no gradient vanishes
    // by symmetry.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    for i in 0..params.tensors().len() {
        for v in params.tensor_mut(i).data_mut() {
            *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    params
}

pub fn random_batch(n: usize, t: usize, f: usize, classes: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| Example {
            features: Tensor::new(vec![t, f], (0..t * f).map(|_| rng.sample(StandardNormal)).collect()).unwrap(),
            label: i % classes,
        })
        .collect()
}

/// Per-tensor `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` using
/// central differences of the mean batch loss.
pub fn gradient_errors(params: &ModelParams, batch: &[Example]) -> Vec<(String, f64)> {
    let (_, analytic) = batch_gradient(params, batch, Exec::Sequential).unwrap();
    let mut p = params.clone();
    let mut out = Vec::new();
    for (idx, name) in params.layout().names().iter().enumerate() {
        let mut diff = 0.0;
        let mut na = 0.0;
        let mut nn = 0.0;
        for j in 0..params.tensor(idx).len() {
            let orig = p.tensor(idx).data()[j];
            p.tensor_mut(idx).data_mut()[j] = orig + FD_STEP;
            let up = batch_loss(&p, batch).unwrap();
            p.tensor_mut(idx).data_mut()[j] = orig - FD_STEP;
            let down = batch_loss(&p, batch).unwrap();
            p.tensor_mut(idx).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.0[idx][j];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        let scale = na.sqrt().max(nn.sqrt());
        let rel = if scale == 0.0 { 0.0 } else { diff.sqrt() / scale };
        out.push((name.clone(), rel));
    }
    out
}
