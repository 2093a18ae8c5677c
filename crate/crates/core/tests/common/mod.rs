#![allow(dead_code)]

use mian::init::Initializer;
use mian::numerics::{ParamKind, ParamStore};
use mian::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn init(seed: u64, stddev: f64) -> Initializer {
    Initializer { seed, stddev }
}

/// Gives biases and gains random values so they take part in every check.
pub fn perturb_biases_and_gains(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let kind = store.get(id).kind;
        let offset = match kind {
            ParamKind::Bias => 0.0,
            ParamKind::Gain => 1.0,
            _ => continue,
        };
        for v in store.value_mut(id).data_mut() {
            *v = offset + rng.random_range(-0.3..0.3);
        }
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row vector times matrix.
pub fn vecmat(x: &[f64], m: &Matrix) -> Vec<f64> {
    (0..m.cols()).map(|c| (0..m.rows()).map(|r| x[r] * m.get(r, c)).sum()).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
