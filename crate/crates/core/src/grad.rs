//! Central finite differences. This is the independent oracle every backward
//! pass in the crate is checked against; it deliberately knows nothing about
//! the analytic gradients.

use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function of a tensor:
/// `(f(x + h e_i) - f(x - h e_i)) / (2 h)` per element.
pub fn finite_difference_grad(f: &mut dyn FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "step size must be positive");
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}
