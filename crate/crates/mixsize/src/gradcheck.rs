//! Finite-difference verification of analytic gradients.
//!
//! Central differences: perturb one element at a time by ±eps, re-evaluate a
//! scalar objective, and form `(f₊ − f₋) / 2eps`. Meant for small problems in
//! f64, where the truncation error is ~eps² and well below the tolerances the
//! tests assert.

use crate::elem::Elem;
use crate::tensor::Tensor;
use crate::Result;

/// Central-difference gradient of `f` with respect to every element of `x`.
///
/// `f` must re-run the forward pass from the tensor's current contents; it is
/// called twice per element with the element displaced in place.
pub fn numeric_grad<T: Elem>(
    x: &Tensor<T>,
    eps: f64,
    mut f: impl FnMut() -> Result<f64>,
) -> Result<Vec<f64>> {
    let n = x.numel();
    let mut g = vec![0.0f64; n];
    for i in 0..n {
        let orig = x.data()[i];
        x.data_mut()[i] = T::from_f64(orig.to_f64() + eps);
        let fp = f()?;
        x.data_mut()[i] = T::from_f64(orig.to_f64() - eps);
        let fm = f()?;
        x.data_mut()[i] = orig;
        g[i] = (fp - fm) / (2.0 * eps);
    }
    Ok(g)
}

/// Relative error between two gradient vectors: `‖a−b‖ / max(‖a‖, ‖b‖)`.
///
/// Zero when both are zero; sizes must match.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    let denom = na.max(nb).sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    diff.sqrt() / denom
}

/// Convenience: compare a tensor's accumulated gradient against [`numeric_grad`].
pub fn check_against_numeric<T: Elem>(
    x: &Tensor<T>,
    eps: f64,
    f: impl FnMut() -> Result<f64>,
) -> Result<f64> {
    let numeric = numeric_grad(x, eps, f)?;
    let analytic: Vec<f64> = x
        .grad()
        .ok_or_else(|| crate::domain_err!("check_against_numeric: tensor has no gradient"))?
        .iter()
        .map(|&g| g.to_f64())
        .collect();
    Ok(rel_error(&analytic, &numeric))
}
