//! Central finite differences. Only evaluates `f` forward, so it stays
//! independent of the tape's backward pass and can check it.

use crate::tensor::Tensor;

/// Gradient of a scalar function by central differences:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_difference_gradient<F>(f: F, x: &Tensor, h: f64) -> Tensor
where
    F: Fn(&Tensor) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad).expect("grad shape matches input")
}

/// Largest relative error between two gradient vectors, with the denominator
/// floored so agreement on near-zero entries is not penalized.
pub fn max_rel_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let f = |t: &Tensor| t.data().iter().map(|v| v * v).sum();
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let g = finite_difference_gradient(f, &x, 1e-5);
        // quadratics are exact under central differences up to roundoff
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_difference_gradient(|_| 42.0, &Tensor::from_vec(vec![0.3, -0.7, 1.1]), 1e-5);
        assert_eq!(g.data(), &[0.0, 0.0, 0.0]);
    }
}
