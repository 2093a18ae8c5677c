//! Parameter initialization. Every tensor draws from its own ChaCha8 stream
//! keyed by `(seed, path)`, so a tensor with the same path starts from the
//! same values in every model variant that contains it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::numerics::{DenseMatrix, ParamId, ParamKind, ParamStore};
use crate::scalar::{lit, Scalar};

#[derive(Clone, Copy, Debug)]
pub struct Initializer {
    pub seed: u64,
    pub stddev: f64,
}

pub(crate) fn path_stream(path: &str) -> u64 {
    let d = Sha256::digest(path.as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Normal draws rejected and redrawn outside two standard deviations.
pub fn truncated_normal<T: Scalar>(rows: usize, cols: usize, stddev: f64, rng: &mut ChaCha8Rng) -> DenseMatrix<T> {
    let mut data = Vec::with_capacity(rows * cols);
    while data.len() < rows * cols {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            data.push(lit(z * stddev));
        }
    }
    DenseMatrix::from_vec(rows, cols, data).expect("finite draws")
}

impl Initializer {
    pub fn rng_for(&self, path: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(path_stream(path));
        rng
    }

    pub fn value<T: Scalar>(&self, kind: ParamKind, rows: usize, cols: usize, path: &str) -> DenseMatrix<T> {
        match kind {
            ParamKind::Weight | ParamKind::Embedding => {
                truncated_normal(rows, cols, self.stddev, &mut self.rng_for(path))
            }
            ParamKind::Bias => DenseMatrix::zeros(rows, cols),
            ParamKind::Gain => DenseMatrix::filled(rows, cols, T::one()),
        }
    }

    /// Creates and registers a tensor.
    pub fn add<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        path: &str,
        kind: ParamKind,
        rows: usize,
        cols: usize,
    ) -> ParamId {
        store.add(path, kind, self.value(kind, rows, cols, path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_are_bounded_and_path_keyed() {
        let init = Initializer { seed: 1, stddev: 0.02 };
        let a: DenseMatrix<f64> = init.value(ParamKind::Weight, 50, 20, "a");
        assert!(a.data().iter().all(|v| v.abs() <= 0.04));
        let again: DenseMatrix<f64> = init.value(ParamKind::Weight, 50, 20, "a");
        assert_eq!(a, again);
        let b: DenseMatrix<f64> = init.value(ParamKind::Weight, 50, 20, "b");
        assert_ne!(a, b);
        let std = (a.sum_squares() / 1000.0).sqrt();
        assert!((std - 0.0176).abs() < 0.003, "{std}");
    }
}
