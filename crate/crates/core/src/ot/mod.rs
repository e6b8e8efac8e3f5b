//! Cosine discrepancy between dense feature maps, the derived transport cost,
//! entropic OT by log-domain Sinkhorn, and an exact transportation-simplex oracle.

mod simplex;
mod sinkhorn;

pub use simplex::{exact_ot_oracle, MAX_ORACLE_DIM};
pub use sinkhorn::{sinkhorn, sinkhorn_graph, GraphPlan, SinkhornMode, SinkhornOptions};

use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum OtError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("degenerate feature: channel {channel} has zero norm")]
    DegenerateFeature { channel: usize },
    #[error("invalid marginal: {0}")]
    InvalidMarginal(String),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("discrepancy entry {value} outside [-1, 1]")]
    DiscrepancyRange { value: f64 },
    #[error("sinkhorn did not converge: marginal error {:.3e} after {} iterations", .plan.marginal_error, .plan.iterations)]
    NotConverged { plan: Box<TransportPlan> },
    #[error("oracle supports at most {max} points per side, got {got}")]
    DimensionGuard { max: usize, got: usize },
    #[error("transportation simplex exceeded {0} pivots")]
    PivotLimit(usize),
}

/// Dense activation block of one image, `channels × spatial`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    values: Tensor,
}

impl FeatureMap {
    pub fn new(values: Tensor) -> Result<Self, OtError> {
        match *values.shape() {
            [d, hw] if d >= 2 && hw >= 1 => Ok(Self { values }),
            _ => Err(OtError::InvalidProblem(format!(
                "feature map must be d x hw with d >= 2, got {:?}",
                values.shape()
            ))),
        }
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn spatial(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

/// Strictly positive probability vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Marginal(Tensor);

impl Marginal {
    pub const SUM_TOL: f64 = 1e-9;

    pub fn new(weights: Vec<f64>) -> Result<Self, OtError> {
        if weights.is_empty() {
            return Err(OtError::InvalidMarginal("empty".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(OtError::InvalidMarginal(format!("entry {w} is not strictly positive")));
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > Self::SUM_TOL {
            return Err(OtError::InvalidMarginal(format!("sums to {s}")));
        }
        let n = weights.len();
        Ok(Self(Tensor::from_vec(vec![n], weights)?))
    }

    pub fn uniform(n: usize) -> Self {
        Self(Tensor::full(&[n], 1.0 / n as f64))
    }

    pub fn weights(&self) -> &[f64] {
        self.0.data()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.0.numel() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportProblem {
    pub cost: Tensor,
    pub mu: Marginal,
    pub nu: Marginal,
    pub epsilon: f64,
}

impl TransportProblem {
    pub fn new(cost: Tensor, mu: Marginal, nu: Marginal, epsilon: f64) -> Result<Self, OtError> {
        check_cost(&cost, &mu, &nu)?;
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(OtError::InvalidProblem(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self { cost, mu, nu, epsilon })
    }
}

pub(crate) fn check_cost(cost: &Tensor, mu: &Marginal, nu: &Marginal) -> Result<(), OtError> {
    if cost.shape() != [mu.len(), nu.len()] {
        return Err(OtError::InvalidProblem(format!(
            "cost shape {:?} does not match marginals ({}, {})",
            cost.shape(),
            mu.len(),
            nu.len()
        )));
    }
    if !cost.is_finite() {
        return Err(OtError::InvalidProblem("cost has non-finite entries".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub plan: Tensor,
    /// ⟨plan, cost⟩
    pub cost: f64,
    pub iterations: usize,
    /// ‖T·1 − μ‖₁ + ‖Tᵀ·1 − ν‖₁
    pub marginal_error: f64,
}

/// L1 violation of both marginal constraints of `plan` (rows `m`, cols `n`).
pub fn marginal_error(plan: &[f64], rows: usize, cols: usize, mu: &[f64], nu: &[f64]) -> f64 {
    let mut err = 0.0;
    for i in 0..rows {
        err += (plan[i * cols..(i + 1) * cols].iter().sum::<f64>() - mu[i]).abs();
    }
    for j in 0..cols {
        err += ((0..rows).map(|i| plan[i * cols + j]).sum::<f64>() - nu[j]).abs();
    }
    err
}

/// Cosine similarity between every channel row of `zs` and every channel row of `zt`.
///
/// Accepts `d×hw` maps or batches `n×d×hw`; the result is `d×d` (or `n×d×d`).
pub fn discrepancy<'g>(zs: Var<'g>, zt: Var<'g>) -> Result<Var<'g>, OtError> {
    let (ss, st) = (zs.shape(), zt.shape());
    if ss != st || ss.len() < 2 {
        return Err(OtError::InvalidProblem(format!("feature maps differ: {ss:?} vs {st:?}")));
    }
    let last = ss.len() - 1;
    let ns = zs.l2_norm_axis(last)?;
    let nt = zt.l2_norm_axis(last)?;
    let d = ss[last - 1];
    for norms in [&ns, &nt] {
        if let Some(k) = norms.value().data().iter().position(|&v| v == 0.0) {
            return Err(OtError::DegenerateFeature { channel: k % d });
        }
    }
    let zs_n = zs.div(ns)?;
    let zt_n = zt.div(nt)?;
    Ok(zs_n.matmul(zt_n.transpose()?)?)
}

/// `M = 1 − C`, floored at zero so rounding in `C` can never produce a negative cost.
pub fn cost_from_discrepancy<'g>(c: Var<'g>) -> Result<Var<'g>, OtError> {
    const SLACK: f64 = 1e-9;
    if let Some(&v) = c.value().data().iter().find(|v| v.abs() > 1.0 + SLACK) {
        return Err(OtError::DiscrepancyRange { value: v });
    }
    Ok(c.neg()?.add_scalar(1.0)?.max_with_scalar(0.0)?)
}

/// Frobenius inner product `⟨T, M⟩`, averaged over a leading batch axis if present.
pub fn ot_loss<'g>(plan: Var<'g>, cost: Var<'g>) -> Result<Var<'g>, OtError> {
    let s = plan.shape();
    if s != cost.shape() || s.len() < 2 {
        return Err(OtError::InvalidProblem(format!("plan {s:?} vs cost {:?}", cost.shape())));
    }
    let batch: usize = s[..s.len() - 2].iter().product();
    let total = plan.mul(cost)?.sum()?;
    Ok(if batch > 1 { total.scale(1.0 / batch as f64)? } else { total })
}

/// Non-differentiable convenience: discrepancy matrix of two feature maps.
pub fn build_discrepancy(zs: &FeatureMap, zt: &FeatureMap) -> Result<Tensor, OtError> {
    let g = Graph::new();
    let c = discrepancy(g.constant(zs.values.clone()), g.constant(zt.values.clone()))?;
    let t = c.value().clone();
    Ok(t)
}

/// Non-differentiable convenience: cost matrix from a discrepancy matrix.
pub fn build_cost(c: &Tensor) -> Result<Tensor, OtError> {
    let g = Graph::new();
    let m = cost_from_discrepancy(g.constant(c.clone()))?;
    let t = m.value().clone();
    Ok(t)
}
