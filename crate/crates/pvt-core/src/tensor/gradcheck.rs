//! Central-difference gradient oracle.
//!
//! Numerically independent of the tape: it only re-evaluates the given
//! scalar function at perturbed inputs, so it is a valid check for every
//! backward rule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Numeric gradient of `f` at `x` via central differences:
/// `(f(x + eps·e_i) - f(x - eps·e_i)) / (2·eps)` per element.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!(
            "finite_diff_grad eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe);
        probe.data_mut()[i] = orig;
        grad[i] = (hi - lo) / (2.0 * eps);
    }
    Tensor::new(x.shape().to_vec(), grad)
}
