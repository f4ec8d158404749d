//! Central finite-difference gradient checking, shared by every trainable
//! component.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::Params;
use crate::tensor::Matrix;

/// Step used by the gradient suites.
pub const FD_EPSILON: f64 = 1e-5;
/// Maximum tolerated relative error between analytic and numeric gradients.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Gradient magnitudes below this are compared on an absolute scale.
pub const FD_MAGNITUDE_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_MAGNITUDE_FLOOR)
}

/// Numeric gradient of `f` at `x`, every element.
pub fn central_difference(x: &Matrix, eps: f64, f: impl Fn(&Matrix) -> f64) -> Matrix {
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub worst_index: usize,
    pub coordinates_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Compares `analytic` against central differences of `loss` on up to
/// `per_tensor` randomly chosen coordinates of each tensor (all of them when
/// the tensor is small enough).
pub fn check_params(
    params: &Params,
    analytic: &Params,
    eps: f64,
    per_tensor: usize,
    seed: u64,
    loss: impl Fn(&Params) -> f64,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        worst_index: 0,
        coordinates_checked: 0,
    };
    for name in params.names() {
        let len = params.get(&name).len();
        let mut coords: Vec<usize> = (0..len).collect();
        if len > per_tensor {
            coords.shuffle(&mut rng);
            coords.truncate(per_tensor);
            coords.sort_unstable();
        }
        for i in coords {
            let orig = params.get(&name).data()[i];
            probe.get_mut(&name).data_mut()[i] = orig + eps;
            let plus = loss(&probe);
            probe.get_mut(&name).data_mut()[i] = orig - eps;
            let minus = loss(&probe);
            probe.get_mut(&name).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic.get(&name).data()[i], numeric);
            report.coordinates_checked += 1;
            if err > report.max_relative_error || report.worst_parameter.is_empty() {
                report.max_relative_error = err.max(report.max_relative_error);
                if err >= report.max_relative_error {
                    report.worst_parameter = name.clone();
                    report.worst_index = i;
                }
            }
        }
    }
    report
}
