use super::tensor::Tensor;

/// Central-difference gradient of a scalar-valued function at `x`.
///
/// Each coordinate is perturbed by +/- h (default callers use 1e-6) with
/// all others held fixed. This is the reference oracle the tape's
/// backward pass is validated against; it is exact up to O(h^2)
/// truncation plus rounding noise.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite_diff_grad: step must be positive");
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    Tensor::from_op(x.shape().to_vec(), grad)
}
