use crate::error::{Error, Result};

/// Central-difference gradient `(f(θ+εe_j) - f(θ-εe_j)) / 2ε` of a scalar
/// function of a flat parameter vector.
///
/// `f` is evaluated twice at `θ` first; differing bit patterns mean the
/// function is not deterministic and the estimate would be meaningless.
pub fn finite_diff_gradient<F>(mut f: F, theta: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {eps}")));
    }
    let first = f(theta)?;
    let second = f(theta)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "f(θ) returned {first:e} then {second:e}"
        )));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for j in 0..theta.len() {
        let orig = probe[j];
        probe[j] = orig + eps;
        let plus = f(&probe)?;
        probe[j] = orig - eps;
        let minus = f(&probe)?;
        probe[j] = orig;
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Largest `|a - b| / max(|a|, |b|, 1e-4)` over paired entries.
///
/// The floor keeps near-zero components, where central differences are
/// dominated by round-off, from reporting spurious relative errors.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-4))
        .fold(0.0, f64::max)
}
