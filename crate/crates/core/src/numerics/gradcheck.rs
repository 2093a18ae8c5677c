//! Finite-difference verification of reverse-mode gradients with the
//! fourth-order central stencil.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MianError, Result};
use crate::numerics::{ParamGrads, ParamStore};
use crate::scalar::{lit, Scalar};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Stencil spacing `h`; the objective is sampled at `x +- h` and `x +- 2h`.
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates checked per tensor; smaller tensors are checked exhaustively.
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-4,
            samples_per_tensor: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub path: String,
    pub checked: usize,
    /// Coordinates whose stencil straddled a kink of a piecewise-linear
    /// function; they are excluded from `checked` and the error.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    pub fn checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.tensors.iter().map(|t| t.skipped).sum()
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// `(f(x-2h) - 8 f(x-h) + 8 f(x+h) - f(x+2h)) / 12h`, exact up to `O(h^4)`.
/// The larger spacing it affords keeps round-off well below the resolution
/// needed for gradients of order 1e-8.
fn central_difference<F>(x: f64, h: f64, mut eval: F) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut f = [0.0; 4];
    for (v, offset) in f.iter_mut().zip([-2.0, -1.0, 1.0, 2.0]) {
        *v = eval(x + offset * h)?;
        if !v.is_finite() {
            return Err(MianError::NonFinite("gradient check objective".into()));
        }
    }
    // Differencing first keeps a flat objective at exactly zero.
    Ok((8.0 * (f[2] - f[1]) - (f[3] - f[0])) / (12.0 * h))
}

fn check_step(step: f64) -> Result<()> {
    if !(1e-6..=1e-2).contains(&step) {
        return Err(MianError::Config(format!("finite-difference step {step} outside [1e-6, 1e-2]")));
    }
    Ok(())
}

/// Checks `analytic` against finite differences of `f` at every coordinate of `x`.
pub fn check_vector<F>(x: &[f64], analytic: &[f64], mut f: F, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    check_step(step)?;
    if x.len() != analytic.len() {
        return Err(MianError::ShapeMismatch {
            op: "grad_check",
            left: (1, x.len()),
            right: (1, analytic.len()),
        });
    }
    let mut point = x.to_vec();
    let mut worst = (0.0, 0);
    for i in 0..x.len() {
        let fd = central_difference(point[i], step, |xi| {
            point[i] = xi;
            f(&point)
        })?;
        point[i] = x[i];
        let e = relative_error(analytic[i], fd);
        if e > worst.0 {
            worst = (e, i);
        }
    }
    Ok(GradCheckReport {
        tensors: vec![TensorCheck {
            path: "x".into(),
            checked: x.len(),
            skipped: 0,
            max_rel_error: worst.0,
            worst_index: worst.1,
        }],
        max_rel_error: worst.0,
        tolerance,
    })
}

/// Checks the gradients of a scalar function of the whole parameter store.
///
/// Each tensor contributes up to `samples_per_tensor` coordinates, half taken
/// from coordinates with a nonzero analytic gradient (so sparse embedding
/// tables are not checked only at rows the batch never touched) and the rest
/// uniformly. The selection is seeded.
pub fn check_params<T, F>(
    params: &ParamStore<T>,
    analytic: &ParamGrads<T>,
    mut f: F,
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&ParamStore<T>) -> Result<T>,
{
    check_piecewise(params, analytic, |p| Ok((f(p)?, 0)), config)
}

/// Like [`check_params`] for piecewise-smooth functions. `f` also returns a
/// signature of the smooth piece it was evaluated in; a coordinate whose
/// perturbed evaluations land in different pieces has no meaningful finite
/// difference and is skipped.
pub fn check_piecewise<T, F>(
    params: &ParamStore<T>,
    analytic: &ParamGrads<T>,
    mut f: F,
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&ParamStore<T>) -> Result<(T, u64)>,
{
    check_step(config.step)?;
    let mut work = params.clone();
    let mut tensors = Vec::new();
    for (tensor_no, id) in params.ids().enumerate() {
        let grad = analytic.get(id);
        let coords = select_coordinates(grad.data(), config.samples_per_tensor, config.seed, tensor_no as u64);
        let mut worst = (0.0f64, 0usize);
        let (mut checked, mut skipped) = (0, 0);
        for &i in &coords {
            let orig = work.value(id).data()[i].to_f64_lossy();
            let mut pieces = [0u64; 4];
            let mut k = 0;
            let fd = central_difference(orig, config.step, |xi| {
                work.value_mut(id).data_mut()[i] = lit(xi);
                let (v, piece) = f(&work)?;
                pieces[k] = piece;
                k += 1;
                Ok(v.to_f64_lossy())
            })?;
            work.value_mut(id).data_mut()[i] = params.value(id).data()[i];
            if pieces.iter().any(|&p| p != pieces[0]) {
                skipped += 1;
                continue;
            }
            checked += 1;
            let e = relative_error(grad.data()[i].to_f64_lossy(), fd);
            if e > worst.0 {
                worst = (e, i);
            }
        }
        tensors.push(TensorCheck {
            path: params.get(id).path.clone(),
            checked,
            skipped,
            max_rel_error: worst.0,
            worst_index: worst.1,
        });
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        tensors,
        max_rel_error,
        tolerance: config.tolerance,
    })
}

fn select_coordinates<T: Scalar>(grad: &[T], budget: usize, seed: u64, stream: u64) -> Vec<usize> {
    let n = grad.len();
    if n <= budget {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let nonzero: Vec<usize> = (0..n).filter(|&i| grad[i] != T::zero()).collect();
    let from_nonzero = nonzero.len().min(budget / 2);
    let mut picked: Vec<usize> = sample(&mut rng, nonzero.len(), from_nonzero)
        .into_iter()
        .map(|k| nonzero[k])
        .collect();
    let rest = budget - from_nonzero;
    for i in sample(&mut rng, n, rest).into_iter() {
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked.sort_unstable();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::kernels::softmax;

    #[test]
    fn square_at_three() {
        let r = check_vector(&[3.0], &[6.0], |x| Ok(x[0] * x[0]), 1e-5, 1e-8).unwrap();
        assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
        assert!(r.passed());
    }

    #[test]
    fn softmax_component_gradient() {
        let v = [0.3, -1.2, 2.0, 0.0];
        let p = softmax(&v).unwrap();
        let g: Vec<f64> = (0..4).map(|j| if j == 0 { p[0] * (1.0 - p[0]) } else { -p[0] * p[j] }).collect();
        let r = check_vector(&v, &g, |x| Ok(softmax(x)?[0]), 1e-5, 1e-6).unwrap();
        assert!(r.passed(), "{}", r.max_rel_error);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let r = check_vector(&[3.0], &[5.0], |x| Ok(x[0] * x[0]), 1e-5, 1e-4).unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn non_finite_objective_errors() {
        let r = check_vector(&[0.0], &[0.0], |_| Ok(f64::NAN), 1e-5, 1e-4);
        assert!(matches!(r, Err(MianError::NonFinite(_))));
    }

    #[test]
    fn step_outside_range_rejected() {
        assert!(check_vector(&[1.0], &[2.0], |x| Ok(x[0] * x[0]), 1e-1, 1e-4).is_err());
    }

    #[test]
    fn selection_is_seeded_and_prefers_nonzero() {
        let mut g = vec![0.0f64; 1000];
        for i in (0..1000).step_by(100) {
            g[i] = 1.0;
        }
        let a = select_coordinates(&g, 16, 3, 1);
        assert_eq!(a, select_coordinates(&g, 16, 3, 1));
        assert!(a.iter().filter(|&&i| g[i] != 0.0).count() >= 8);
    }
}
