//! Log-domain Sinkhorn on scaled dual potentials.
//!
//! With `K = −M/ε`, the scaled potentials `a = f/ε`, `b = g/ε` are updated as
//!
//! ```text
//! a_i ← log μ_i − LSE_j(b_j + K_ij)
//! b_j ← log ν_j − LSE_i(a_i + K_ij)
//! T_ij = exp(a_i + b_j + K_ij)
//! ```
//!
//! starting from `b = 0`. Every LSE subtracts its maximum first, so no
//! exp-domain scaling vectors are ever formed.

use super::{marginal_error, OtError, TransportPlan, TransportProblem};
use crate::tensor::{CustomOp, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SinkhornMode {
    /// Fixed iteration count, recorded on the graph so gradients reach M, μ and ν.
    Unrolled,
    /// Plan is a constant; only ⟨T, M⟩ carries gradient (to M). Stops early at `tol`.
    Detached,
}

impl std::str::FromStr for SinkhornMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "unrolled" => Ok(Self::Unrolled),
            "detached" => Ok(Self::Detached),
            _ => Err(format!("unknown sinkhorn mode `{s}` (expected unrolled|detached)")),
        }
    }
}

impl std::fmt::Display for SinkhornMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Unrolled => "unrolled",
            Self::Detached => "detached",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornOptions {
    pub max_iters: usize,
    /// L1 marginal tolerance.
    pub tol: f64,
    pub mode: SinkhornMode,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self { max_iters: 50, tol: 1e-6, mode: SinkhornMode::Unrolled }
    }
}

impl SinkhornOptions {
    /// Early-stopping solve with a generous iteration budget.
    pub fn converged(tol: f64) -> Self {
        Self { max_iters: 1_000_000, tol, mode: SinkhornMode::Detached }
    }
}

struct Kernel<'a> {
    k: Vec<f64>,
    rows: usize,
    cols: usize,
    log_mu: &'a [f64],
    log_nu: &'a [f64],
}

#[derive(Default)]
struct Trace {
    /// Row-softmax matrices from each `a` update.
    q: Vec<f64>,
    /// Column-softmax matrices from each `b` update.
    p: Vec<f64>,
}

struct Potentials {
    a: Vec<f64>,
    b: Vec<f64>,
    iterations: usize,
}

impl<'a> Kernel<'a> {
    fn new(cost: &[f64], rows: usize, cols: usize, eps: f64, log_mu: &'a [f64], log_nu: &'a [f64]) -> Self {
        Self { k: cost.iter().map(|m| -m / eps).collect(), rows, cols, log_mu, log_nu }
    }

    /// Row half-step: `lse_i = LSE_j(b_j + K_ij)`, with the row softmax written
    /// to `q` (an `r×c` block).
    fn row_pass(&self, b: &[f64], lse: &mut [f64], q: &mut [f64]) {
        let c = self.cols;
        for (i, o) in lse.iter_mut().enumerate() {
            let row = &self.k[i * c..(i + 1) * c];
            let e = &mut q[i * c..(i + 1) * c];
            let max = row.iter().zip(b).map(|(k, b)| k + b).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for ((e, k), b) in e.iter_mut().zip(row).zip(b) {
                *e = (k + b - max).exp();
                s += *e;
            }
            let inv = 1.0 / s;
            e.iter_mut().for_each(|v| *v *= inv);
            *o = max + s.ln();
        }
    }

    /// Column half-step: updates `b` and writes the column softmax to `p`.
    fn col_pass(&self, a: &[f64], b: &mut [f64], max: &mut [f64], sum: &mut [f64], p: &mut [f64]) {
        let c = self.cols;
        max.fill(f64::NEG_INFINITY);
        for (i, ai) in a.iter().enumerate() {
            for (m, k) in max.iter_mut().zip(&self.k[i * c..(i + 1) * c]) {
                *m = m.max(ai + k);
            }
        }
        sum.fill(0.0);
        for (i, ai) in a.iter().enumerate() {
            let e = &mut p[i * c..(i + 1) * c];
            for (((e, k), m), s) in e.iter_mut().zip(&self.k[i * c..(i + 1) * c]).zip(&*max).zip(sum.iter_mut()) {
                *e = (ai + k - m).exp();
                *s += *e;
            }
        }
        for j in 0..c {
            b[j] = self.log_nu[j] - (max[j] + sum[j].ln());
            sum[j] = 1.0 / sum[j];
        }
        for i in 0..a.len() {
            for (e, inv) in p[i * c..(i + 1) * c].iter_mut().zip(&*sum) {
                *e *= inv;
            }
        }
    }

    /// Run at most `max_iters` full (a, b) updates. With `tol`, stop as soon as the
    /// row-marginal error of the current plan is below `tol / 2` (the column
    /// marginal is exact after each `b` update up to rounding).
    fn run(&self, max_iters: usize, tol: Option<f64>, mut trace: Option<&mut Trace>) -> Potentials {
        let (r, c) = (self.rows, self.cols);
        let rc = r * c;
        let mut a = vec![0.0; r];
        let mut b = vec![0.0; c];
        let mut lse = vec![0.0; r];
        let (mut max, mut sum) = (vec![0.0; c], vec![0.0; c]);
        let mut scratch = if trace.is_some() { Vec::new() } else { vec![0.0; 2 * rc] };
        if let Some(t) = trace.as_deref_mut() {
            t.q = vec![0.0; max_iters * rc];
            t.p = vec![0.0; max_iters * rc];
        }
        let mut iterations = 0;
        while iterations < max_iters {
            let (q, p) = match trace.as_deref_mut() {
                Some(t) => (
                    &mut t.q[iterations * rc..(iterations + 1) * rc],
                    &mut t.p[iterations * rc..(iterations + 1) * rc],
                ),
                None => scratch.split_at_mut(rc),
            };
            self.row_pass(&b, &mut lse, q);
            if let Some(tol) = tol {
                if iterations > 0 {
                    let err: f64 = (0..r).map(|i| ((a[i] + lse[i]).exp() - self.log_mu[i].exp()).abs()).sum();
                    if err <= 0.5 * tol {
                        break;
                    }
                }
            }
            for i in 0..r {
                a[i] = self.log_mu[i] - lse[i];
            }
            self.col_pass(&a, &mut b, &mut max, &mut sum, p);
            iterations += 1;
        }
        if let Some(t) = trace {
            t.q.truncate(iterations * rc);
            t.p.truncate(iterations * rc);
        }
        Potentials { a, b, iterations }
    }

    fn plan(&self, pot: &Potentials) -> Vec<f64> {
        let c = self.cols;
        let mut t = Vec::with_capacity(self.rows * c);
        for i in 0..self.rows {
            for j in 0..c {
                t.push((pot.a[i] + pot.b[j] + self.k[i * c + j]).exp());
            }
        }
        t
    }
}

/// Solve an entropic transport problem numerically.
///
/// In [`SinkhornMode::Detached`] the iteration stops at `tol`; in
/// [`SinkhornMode::Unrolled`] exactly `max_iters` iterations run. Either way a
/// final marginal error above `100·tol` is reported as [`OtError::NotConverged`]
/// carrying the plan.
pub fn sinkhorn(problem: &TransportProblem, opts: &SinkhornOptions) -> Result<TransportPlan, OtError> {
    let (rows, cols) = (problem.mu.len(), problem.nu.len());
    let log_mu: Vec<f64> = problem.mu.weights().iter().map(|w| w.ln()).collect();
    let log_nu: Vec<f64> = problem.nu.weights().iter().map(|w| w.ln()).collect();
    let kernel = Kernel::new(problem.cost.data(), rows, cols, problem.epsilon, &log_mu, &log_nu);
    let tol = (opts.mode == SinkhornMode::Detached).then_some(opts.tol);
    let pot = kernel.run(opts.max_iters, tol, None);
    let t = kernel.plan(&pot);
    if t.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op: "sinkhorn" }.into());
    }
    let err = marginal_error(&t, rows, cols, problem.mu.weights(), problem.nu.weights());
    let cost = t.iter().zip(problem.cost.data()).map(|(a, b)| a * b).sum();
    let plan = TransportPlan {
        plan: Tensor::from_vec(vec![rows, cols], t)?,
        cost,
        iterations: pot.iterations,
        marginal_error: err,
    };
    if err > 100.0 * opts.tol {
        return Err(OtError::NotConverged { plan: Box::new(plan) });
    }
    Ok(plan)
}

/// Transport plan recorded on a graph.
#[derive(Debug)]
pub struct GraphPlan<'g> {
    pub plan: Var<'g>,
    pub iterations: usize,
    /// Largest L1 marginal error over the batch.
    pub marginal_error: f64,
}

struct UnrolledSinkhorn {
    epsilon: f64,
    rows: usize,
    cols: usize,
    iters: usize,
    traces: Vec<Trace>,
}

impl CustomOp for UnrolledSinkhorn {
    fn name(&self) -> &'static str {
        "sinkhorn"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (r, c) = (self.rows, self.cols);
        let rc = r * c;
        let (mu, nu) = (inputs[1].data(), inputs[2].data());
        let batch = self.traces.len();
        let mut g_m = vec![0.0; batch * rc];
        let mut g_mu = vec![0.0; batch * r];
        let mut g_nu = vec![0.0; batch * c];
        for (s, trace) in self.traces.iter().enumerate() {
            let t = &output.data()[s * rc..(s + 1) * rc];
            let gt = &grad[s * rc..(s + 1) * rc];
            let g_k = &mut g_m[s * rc..(s + 1) * rc];
            let mut g_a = vec![0.0; r];
            let mut g_b = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    let v = gt[i * c + j] * t[i * c + j];
                    g_k[i * c + j] += v;
                    g_a[i] += v;
                    g_b[j] += v;
                }
            }
            let g_log_mu = &mut g_mu[s * r..(s + 1) * r];
            let g_log_nu = &mut g_nu[s * c..(s + 1) * c];
            for k in (0..self.iters).rev() {
                // b_j = log ν_j − LSE_i(a_i + K_ij)
                let p = &trace.p[k * rc..(k + 1) * rc];
                for j in 0..c {
                    g_log_nu[j] += g_b[j];
                }
                for i in 0..r {
                    let mut acc = 0.0;
                    for j in 0..c {
                        let w = g_b[j] * p[i * c + j];
                        acc += w;
                        g_k[i * c + j] -= w;
                    }
                    g_a[i] -= acc;
                }
                // a_i = log μ_i − LSE_j(b_j + K_ij), with b from the previous iteration
                let q = &trace.q[k * rc..(k + 1) * rc];
                for i in 0..r {
                    g_log_mu[i] += g_a[i];
                }
                g_b.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..r {
                    for j in 0..c {
                        let w = g_a[i] * q[i * c + j];
                        g_b[j] -= w;
                        g_k[i * c + j] -= w;
                    }
                }
                g_a.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        g_m.iter_mut().for_each(|v| *v /= -self.epsilon);
        g_mu.iter_mut().zip(mu).for_each(|(g, m)| *g /= m);
        g_nu.iter_mut().zip(nu).for_each(|(g, n)| *g /= n);
        vec![Some(g_m), Some(g_mu), Some(g_nu)]
    }
}

/// Entropic plan for cost `m` (`r×c` or `n×r×c`) and marginals `mu`, `nu`
/// (`r`/`c` or `n×r`/`n×c`), recorded on the graph of `m`.
///
/// Unrolled mode never stops early and never reports non-convergence as an
/// error; the achieved marginal error is returned for diagnostics.
pub fn sinkhorn_graph<'g>(
    m: Var<'g>,
    mu: Var<'g>,
    nu: Var<'g>,
    epsilon: f64,
    opts: &SinkhornOptions,
) -> Result<GraphPlan<'g>, OtError> {
    if !(epsilon > 0.0) {
        return Err(OtError::InvalidProblem(format!("epsilon must be positive, got {epsilon}")));
    }
    let (ms, mus, nus) = (m.shape(), mu.shape(), nu.shape());
    let (batch, rows, cols) = match (ms.as_slice(), mus.as_slice(), nus.as_slice()) {
        ([r, c], [r2], [c2]) if r == r2 && c == c2 => (1, *r, *c),
        ([n, r, c], [n2, r2], [n3, c2]) if n == n2 && n == n3 && r == r2 && c == c2 => (*n, *r, *c),
        _ => {
            return Err(OtError::InvalidProblem(format!(
                "cost {ms:?} incompatible with marginals {mus:?}, {nus:?}"
            )))
        }
    };
    let (out, traces, iterations, worst) = {
        let (mv, muv, nuv) = (m.value(), mu.value(), nu.value());
        if muv.data().iter().chain(nuv.data()).any(|&w| !(w > 0.0)) {
            return Err(TensorError::Domain { op: "sinkhorn", detail: "marginal entry <= 0".into() }.into());
        }
        let unrolled = opts.mode == SinkhornMode::Unrolled;
        let tol = (!unrolled).then_some(opts.tol);
        let mut out = Vec::with_capacity(batch * rows * cols);
        let mut traces = Vec::new();
        let mut iterations = 0;
        let mut worst: f64 = 0.0;
        for s in 0..batch {
            let cost = &mv.data()[s * rows * cols..(s + 1) * rows * cols];
            let mu_s = &muv.data()[s * rows..(s + 1) * rows];
            let nu_s = &nuv.data()[s * cols..(s + 1) * cols];
            let log_mu: Vec<f64> = mu_s.iter().map(|w| w.ln()).collect();
            let log_nu: Vec<f64> = nu_s.iter().map(|w| w.ln()).collect();
            let kernel = Kernel::new(cost, rows, cols, epsilon, &log_mu, &log_nu);
            let mut trace = Trace::default();
            let pot = kernel.run(opts.max_iters, tol, unrolled.then_some(&mut trace));
            let t = kernel.plan(&pot);
            worst = worst.max(marginal_error(&t, rows, cols, mu_s, nu_s));
            iterations = iterations.max(pot.iterations);
            out.extend(t);
            if unrolled {
                traces.push(trace);
            }
        }
        (Tensor::from_vec(ms.clone(), out)?, traces, iterations, worst)
    };
    let plan = match opts.mode {
        SinkhornMode::Unrolled => {
            let op = UnrolledSinkhorn { epsilon, rows, cols, iters: iterations, traces };
            m.graph().custom(&[m, mu, nu], out, Box::new(op))?
        }
        SinkhornMode::Detached => {
            if !out.is_finite() {
                return Err(TensorError::NonFinite { op: "sinkhorn" }.into());
            }
            m.graph().constant(out)
        }
    };
    Ok(GraphPlan { plan, iterations, marginal_error: worst })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::Marginal;
    use crate::tensor::Graph;

    fn problem(m: &[&[f64]], mu: &[f64], nu: &[f64], eps: f64) -> TransportProblem {
        TransportProblem::new(
            Tensor::from_rows(m),
            Marginal::new(mu.to_vec()).unwrap(),
            Marginal::new(nu.to_vec()).unwrap(),
            eps,
        )
        .unwrap()
    }

    #[test]
    fn zero_cost_gives_product_coupling() {
        let p = problem(&[&[0.0, 0.0], &[0.0, 0.0]], &[0.5, 0.5], &[0.5, 0.5], 0.1);
        let plan = sinkhorn(&p, &SinkhornOptions::converged(1e-9)).unwrap();
        for v in plan.plan.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        assert_eq!(plan.cost, 0.0);
    }

    #[test]
    fn antidiagonal_cost_concentrates_on_diagonal() {
        let p = problem(&[&[0.0, 1.0], &[1.0, 0.0]], &[0.5, 0.5], &[0.5, 0.5], 0.01);
        let plan = sinkhorn(&p, &SinkhornOptions::converged(1e-9)).unwrap();
        assert!(plan.cost <= 0.01);
        assert!((plan.plan.at(&[0, 0]) - 0.5).abs() < 1e-3);
        assert!((plan.plan.at(&[1, 1]) - 0.5).abs() < 1e-3);
    }

    #[test]
    fn asymmetric_instance_approaches_lp_optimum() {
        // LP oracle: T11 = t, cost 1.8 − 3t on t ∈ [0.1, 0.4], so t = 0.4, cost 0.6.
        let p = problem(&[&[0.0, 2.0], &[1.0, 0.0]], &[0.7, 0.3], &[0.4, 0.6], 1e-3);
        let plan = sinkhorn(&p, &SinkhornOptions::converged(1e-9)).unwrap();
        assert!((plan.cost - 0.6).abs() < 1e-2, "cost {}", plan.cost);
        let expected = [0.4, 0.3, 0.0, 0.3];
        for (got, e) in plan.plan.data().iter().zip(expected) {
            assert!((got - e).abs() < 1e-2);
        }
        assert!(plan.marginal_error <= 1e-9);
    }

    #[test]
    fn too_few_iterations_is_reported() {
        let p = problem(&[&[0.0, 2.0], &[1.0, 0.0]], &[0.7, 0.3], &[0.4, 0.6], 1e-3);
        let opts = SinkhornOptions { max_iters: 1, tol: 1e-9, mode: SinkhornMode::Detached };
        match sinkhorn(&p, &opts) {
            Err(OtError::NotConverged { plan }) => assert_eq!(plan.iterations, 1),
            other => panic!("expected NotConverged, got {other:?}"),
        }
    }

    #[test]
    fn graph_modes_agree_on_the_plan() {
        let m = Tensor::from_rows(&[&[0.3, 1.2, 0.5], &[0.9, 0.1, 1.7], &[1.1, 0.4, 0.2]]);
        let mu = Tensor::from_vec(vec![3], vec![0.2, 0.5, 0.3]).unwrap();
        let nu = Tensor::from_vec(vec![3], vec![0.4, 0.4, 0.2]).unwrap();
        let g = Graph::new();
        let (mv, muv, nuv) = (g.param(m.clone()), g.param(mu.clone()), g.param(nu.clone()));
        let opts = SinkhornOptions { max_iters: 400, tol: 1e-12, mode: SinkhornMode::Unrolled };
        let u = sinkhorn_graph(mv, muv, nuv, 0.1, &opts).unwrap();
        let opts = SinkhornOptions { mode: SinkhornMode::Detached, ..opts };
        let d = sinkhorn_graph(mv, muv, nuv, 0.1, &opts).unwrap();
        assert!(u.plan.value().max_abs_diff(&d.plan.value()) < 1e-10);
        assert!(d.iterations < 400);
        assert_eq!(u.iterations, 400);
    }

    #[test]
    fn batched_graph_matches_per_sample() {
        let g = Graph::new();
        let m1 = Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 0.3]]);
        let m2 = Tensor::from_rows(&[&[0.5, 0.2], &[0.1, 0.9]]);
        let mu = Tensor::from_rows(&[&[0.3, 0.7], &[0.6, 0.4]]);
        let nu = Tensor::from_rows(&[&[0.5, 0.5], &[0.2, 0.8]]);
        let opts = SinkhornOptions::default();
        let batched = sinkhorn_graph(
            g.constant(Tensor::stack(&[m1.clone(), m2.clone()]).unwrap()),
            g.constant(mu.clone()),
            g.constant(nu.clone()),
            0.05,
            &opts,
        )
        .unwrap();
        for (s, m) in [m1, m2].into_iter().enumerate() {
            let single = sinkhorn_graph(
                g.constant(m),
                g.constant(mu.index_first(s)),
                g.constant(nu.index_first(s)),
                0.05,
                &opts,
            )
            .unwrap();
            assert_eq!(*single.plan.value(), batched.plan.value().index_first(s));
        }
    }
}
