//! Dense tensors, a reverse-mode tape, parameters and the Adam optimizer.

mod params;
mod tape;
mod tensor;

pub use params::{xavier_init, xavier_with, AdamConfig, ParamId, Parameter, ParameterSet};
pub use tape::{Gradients, Tape, Var, NORM_EPS};
pub use tensor::Tensor;

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference(x: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.rows(), x.cols());
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + step;
        let plus = f(&probe);
        probe.data_mut()[k] = orig - step;
        let minus = f(&probe);
        probe.data_mut()[k] = orig;
        grad.data_mut()[k] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let diff = a.sub(b).expect("relative_error shape mismatch").norm();
    diff / a.norm().max(b.norm()).max(floor)
}
