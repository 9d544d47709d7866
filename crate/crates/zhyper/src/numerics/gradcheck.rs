//! Finite-difference oracle for the reverse-mode gradients.
//!
//! Central differences in f64 with a step near 1e-5 put truncation and
//! cancellation error both around 1e-10 for O(1) values, so analytic
//! gradients are held to a much tighter bar than "looks plausible".

use crate::error::Result;
use crate::numerics::tensor::Tensor;

/// Scalar-valued function of one tensor, as seen by the checker.
pub type LossFn<'a> = dyn Fn(&Tensor) -> Result<Tensor> + 'a;

/// Central-difference gradient of `f` at `at`, one coordinate at a time.
pub fn finite_diff_grad(f: &LossFn, at: &Tensor, eps: f64) -> Result<Vec<f64>> {
    let mut grad = Vec::with_capacity(at.numel());
    for i in 0..at.numel() {
        let mut plus = at.data().to_vec();
        let mut minus = plus.clone();
        plus[i] += eps;
        minus[i] -= eps;
        let up = f(&at.with_data(plus)?)?.item()?;
        let down = f(&at.with_data(minus)?)?.item()?;
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// Worst relative disagreement between the reverse-mode gradient of
/// `f` at `at` and the finite-difference estimate, with an absolute
/// floor of 1 in the denominator so near-zero entries compare absolutely.
pub fn max_grad_mismatch(f: &LossFn, at: &Tensor, eps: f64) -> Result<f64> {
    let at = at.to_param();
    let loss = f(&at)?;
    loss.backward()?;
    let analytic = at.grad_or_zeros();
    let numeric = finite_diff_grad(f, &at, eps)?;
    let mut worst = 0.0_f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        let rel = (a - n).abs() / n.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_agrees() {
        let x = Tensor::from_vec(&[3], vec![0.5, -1.25, 2.0]).unwrap();
        let f = |t: &Tensor| t.mul(t)?.sum();
        let mismatch = max_grad_mismatch(&f, &x, 1e-5).unwrap();
        assert!(mismatch < 1e-9, "mismatch {mismatch}");
    }

    #[test]
    fn checker_catches_a_wrong_gradient() {
        // sum(x²) but differentiated as if it were sum(x): the checker
        // must flag it, otherwise it guards nothing.
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().to_param();
        let loss = x.mul(&x).unwrap().sum().unwrap();
        loss.backward().unwrap();
        let fake = vec![1.0, 1.0];
        let numeric = finite_diff_grad(&|t| t.mul(t)?.sum(), &x, 1e-5).unwrap();
        let worst: f64 = fake
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
            .fold(0.0, f64::max);
        assert!(worst > 0.2, "a broken gradient slipped past the oracle");
    }
}
