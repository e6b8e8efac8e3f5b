//! Variance and covariance regularizers on a batch of embeddings `n×D`.

use crate::tensor::{Tensor, TensorError, Var};

/// Hinge on per-column standard deviation, averaged over columns:
/// `mean_j max(0, γ − sqrt(Var_j + eps))` with unbiased `Var_j`.
pub fn variance_term<'g>(q: Var<'g>, gamma: f64, eps: f64) -> Result<Var<'g>, TensorError> {
    check_batch("variance_term", &q)?;
    q.variance_axis(0)?.add_scalar(eps)?.sqrt()?.neg()?.add_scalar(gamma)?.relu()?.mean()
}

/// Mean over columns of the squared off-diagonal entries of the unbiased
/// covariance matrix: `(1/D) Σ_{i≠j} Cov_ij²`.
pub fn covariance_term<'g>(q: Var<'g>) -> Result<Var<'g>, TensorError> {
    let (n, d) = check_batch("covariance_term", &q)?;
    let centered = q.sub(q.mean_axis(0)?)?;
    let cov = centered.transpose()?.matmul(centered)?.scale(1.0 / (n - 1) as f64)?;
    let off = q.graph().constant(Tensor::from_fn(&[d, d], |k| if k / d == k % d { 0.0 } else { 1.0 }));
    let masked = cov.mul(off)?;
    masked.mul(masked)?.sum()?.scale(1.0 / d as f64)
}

fn check_batch(op: &'static str, q: &Var<'_>) -> Result<(usize, usize), TensorError> {
    let shape = q.shape();
    if shape.len() != 2 {
        return Err(TensorError::Shape { op, detail: format!("expected n x D embeddings, got {shape:?}") });
    }
    if shape[0] < 2 {
        return Err(TensorError::BatchSize { op, rows: shape[0] });
    }
    Ok((shape[0], shape[1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;
    use rand_xoshiro::Xoshiro256PlusPlus;

    const EPS: f64 = 1e-4;

    fn var_of(rows: &[&[f64]], gamma: f64) -> f64 {
        let g = Graph::new();
        variance_term(g.constant(Tensor::from_rows(rows)), gamma, EPS).unwrap().item()
    }

    fn cov_of(t: Tensor) -> f64 {
        let g = Graph::new();
        covariance_term(g.constant(t)).unwrap().item()
    }

    #[test]
    fn collapsed_batch_hits_the_hinge_ceiling() {
        let v = var_of(&[&[0.3, -1.0, 2.0], &[0.3, -1.0, 2.0], &[0.3, -1.0, 2.0]], 1.0);
        assert!((v - (1.0 - EPS.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn wide_column_has_zero_hinge() {
        assert_eq!(var_of(&[&[0.0], &[2.0]], 1.0), 0.0);
        assert_eq!(var_of(&[&[-3.0, 5.0], &[3.0, -5.0], &[0.0, 1.0]], 1.0), 0.0);
    }

    #[test]
    fn variance_mixes_columns() {
        // Column 0: {0, 1} -> var 0.5; column 1 constant.
        let v = var_of(&[&[0.0, 4.0], &[1.0, 4.0]], 1.0);
        let expected = ((1.0 - (0.5f64 + EPS).sqrt()) + (1.0 - EPS.sqrt())) / 2.0;
        assert!((v - expected).abs() < 1e-15);
    }

    #[test]
    fn covariance_examples() {
        assert_eq!(cov_of(Tensor::from_rows(&[&[1.0], &[3.0], &[-2.0]])), 0.0);
        assert!((cov_of(Tensor::from_rows(&[&[1.0, 1.0], &[-1.0, -1.0]])) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn independent_columns_have_small_covariance() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
        let t = Tensor::from_fn(&[10_000, 4], |_| rng.sample(StandardNormal));
        assert!(cov_of(t) <= 0.01);
    }

    #[test]
    fn covariance_ignores_column_offsets() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let t = Tensor::from_fn(&[6, 3], |_| rng.gen_range(-2.0..2.0));
        let shifted = Tensor::from_fn(&[6, 3], |k| t.data()[k] + [5.0, -7.5, 0.25][k % 3]);
        assert!((cov_of(t) - cov_of(shifted)).abs() <= 1e-10);
    }

    #[test]
    fn single_row_is_a_batch_size_error() {
        let g = Graph::new();
        let q = g.constant(Tensor::ones(&[1, 4]));
        assert!(matches!(variance_term(q, 1.0, EPS), Err(TensorError::BatchSize { .. })));
        assert!(matches!(covariance_term(q), Err(TensorError::BatchSize { .. })));
    }
}
