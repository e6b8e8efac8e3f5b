//! Central-difference verification of every differentiable operation.
//!
//! Each check builds a small graph from random inputs, reduces the output to a
//! scalar through a fixed random projection, and compares the reverse-mode
//! gradient of every input element with `(f(x+h) − f(x−h)) / 2h`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;

use crate::cvsim::{cross_attend, AttentionLayout, CvSimWeights};
use crate::model::{forward_loss, Bound, LossWeights, ModelConfig, ModelError, OtConfig, ParamStore};
use crate::ot::{cost_from_discrepancy, discrepancy, sinkhorn_graph, SinkhornMode, SinkhornOptions};
use crate::pipeline::sample_rng;
use crate::tensor::{CustomOp, Graph, Tensor, Var, OP_NAMES};
use crate::vicreg::{covariance_term, variance_term};

/// Tolerance for single operations.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the end-to-end objective.
pub const LOSS_TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-6;
/// Denominator floor so that near-zero gradients are compared absolutely.
const FLOOR: f64 = 1e-4;

/// Composite checks run after the per-op registry.
pub const COMPOSITE_NAMES: &[&str] =
    &["sinkhorn", "cosine_discrepancy", "cross_attend", "variance_term", "covariance_term", "total_loss"];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Number of input elements compared.
    pub elements: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            let status = if r.passed() { "ok" } else { "FAIL" };
            let _ = writeln!(out, "{:<20} {:>10.3e}  (tol {:.0e}, {} elems)  {status}", r.name, r.max_rel_error, r.tolerance, r.elements);
        }
        out
    }
}

/// Reduces any output to `Σ w ⊙ y` with its own adjoint, so a fault injected
/// into a library op never leaks into the projection.
struct Projection(Vec<f64>);

impl CustomOp for Projection {
    fn name(&self) -> &'static str {
        "projection"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(self.0.iter().map(|w| w * grad[0]).collect())]
    }
}

fn project<'g>(y: Var<'g>, w: &[f64]) -> Result<Var<'g>, ModelError> {
    let value: f64 = y.value().data().iter().zip(w).map(|(a, b)| a * b).sum();
    Ok(y.graph().custom(&[y], Tensor::scalar(value), Box::new(Projection(w.to_vec())))?)
}

struct Harness {
    seed: u64,
    fault: Option<&'static str>,
    results: Vec<CheckResult>,
}

impl Harness {
    fn rng(&self, name: &str) -> impl Rng {
        let key = name.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
        sample_rng(self.seed, &[key])
    }

    fn uniform(&self, name: &str, shapes: &[&[usize]], lo: f64, hi: f64) -> Vec<Tensor> {
        let mut rng = self.rng(name);
        shapes.iter().map(|s| Tensor::from_fn(s, |_| rng.gen_range(lo..hi))).collect()
    }

    fn check<F>(&mut self, name: &'static str, tolerance: f64, inputs: Vec<Tensor>, f: F) -> Result<(), ModelError>
    where
        F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>, ModelError>,
    {
        let graph = Graph::new();
        graph.inject_adjoint_fault(self.fault);
        let vars: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
        let y = f(&graph, &vars)?;
        let mut rng = self.rng(&format!("{name}/projection"));
        let w: Vec<f64> = (0..y.value().numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        graph.backward(project(y, &w)?)?;
        let analytic: Vec<Tensor> =
            vars.iter().zip(&inputs).map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape()))).collect();

        let eval = |xs: &[Tensor]| -> Result<f64, ModelError> {
            let g = Graph::new();
            let vs: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
            let y = f(&g, &vs)?;
            let v = y.value();
            Ok(v.data().iter().zip(&w).map(|(a, b)| a * b).sum())
        };
        let mut xs = inputs.clone();
        let mut worst: f64 = 0.0;
        let mut elements = 0;
        for (i, grad) in analytic.iter().enumerate() {
            for k in 0..xs[i].numel() {
                let x0 = xs[i].data()[k];
                xs[i].data_mut()[k] = x0 + STEP;
                let up = eval(&xs)?;
                xs[i].data_mut()[k] = x0 - STEP;
                let down = eval(&xs)?;
                xs[i].data_mut()[k] = x0;
                let numeric = (up - down) / (2.0 * STEP);
                let a = grad.data()[k];
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR));
                elements += 1;
            }
        }
        self.results.push(CheckResult { name, max_rel_error: worst, tolerance, elements });
        Ok(())
    }
}

/// Push values of `t` at least `gap` away from `kink`, keeping their side.
fn avoid(t: Tensor, kink: f64, gap: f64) -> Tensor {
    t.map(|v| {
        let d = v - kink;
        if d.abs() < gap {
            kink + gap.copysign(d)
        } else {
            v
        }
    })
}

fn unary(name: &'static str) -> for<'g> fn(Var<'g>) -> Result<Var<'g>, ModelError> {
    match name {
        "scale" => |x| Ok(x.scale(-1.7)?),
        "add_scalar" => |x| Ok(x.add_scalar(0.3)?),
        "exp" => |x| Ok(x.exp()?),
        "log" => |x| Ok(x.log()?),
        "sqrt" => |x| Ok(x.sqrt()?),
        "relu" => |x| Ok(x.relu()?),
        "max_with_scalar" => |x| Ok(x.max_with_scalar(0.3)?),
        "sum" => |x| Ok(x.sum()?),
        "mean" => |x| Ok(x.mean()?),
        "sum_axis" => |x| Ok(x.sum_axis(1)?),
        "mean_axis" => |x| Ok(x.mean_axis(0)?),
        "variance_axis" => |x| Ok(x.variance_axis(1)?),
        "l2_norm_axis" => |x| Ok(x.l2_norm_axis(1)?),
        "reshape" => |x| Ok(x.reshape(&[3, 2])?),
        "slice" => |x| Ok(x.slice(1, 1, 2)?),
        "softmax" => |x| Ok(x.softmax(1)?),
        "log_softmax" => |x| Ok(x.log_softmax(1)?),
        _ => unreachable!("not a unary check: {name}"),
    }
}

fn binary(name: &'static str) -> for<'g> fn(Var<'g>, Var<'g>) -> Result<Var<'g>, ModelError> {
    match name {
        "add" => |a, b| Ok(a.add(b)?),
        "sub" => |a, b| Ok(a.sub(b)?),
        "mul" => |a, b| Ok(a.mul(b)?),
        _ => unreachable!("not a binary check: {name}"),
    }
}

fn op_checks(h: &mut Harness) -> Result<(), ModelError> {
    for &name in OP_NAMES {
        let shape: &[usize] = &[2, 3];
        match name {
            "add" | "sub" | "mul" => {
                // The second operand broadcasts along the rows.
                let x = h.uniform(name, &[shape, &[1, 3]], -2.0, 2.0);
                let op = binary(name);
                h.check(name, OP_TOLERANCE, x, move |_, v| op(v[0], v[1]))?;
            }
            "div" => {
                let mut x = h.uniform(name, &[shape, shape], -2.0, 2.0);
                x[1] = avoid(x[1].clone(), 0.0, 0.5);
                h.check(name, OP_TOLERANCE, x, |_, v| Ok(v[0].div(v[1])?))?;
            }
            "log" | "sqrt" => {
                let x = h.uniform(name, &[shape], 0.5, 2.0);
                let op = unary(name);
                h.check(name, OP_TOLERANCE, x, move |_, v| op(v[0]))?;
            }
            "relu" | "max_with_scalar" => {
                let kink = if name == "relu" { 0.0 } else { 0.3 };
                let x = vec![avoid(h.uniform(name, &[shape], -2.0, 2.0).remove(0), kink, 0.05)];
                let op = unary(name);
                h.check(name, OP_TOLERANCE, x, move |_, v| op(v[0]))?;
            }
            "permute" => {
                let x = h.uniform(name, &[&[2, 3, 2]], -2.0, 2.0);
                h.check(name, OP_TOLERANCE, x, |_, v| Ok(v[0].permute(&[2, 0, 1])?))?;
            }
            "concat" => {
                let x = h.uniform(name, &[shape, &[2, 2]], -2.0, 2.0);
                h.check(name, OP_TOLERANCE, x, |_, v| Ok(Var::concat(&[v[0], v[1]], 1)?))?;
            }
            "matmul" => {
                let x = h.uniform(name, &[&[3, 4], &[4, 2]], -2.0, 2.0);
                h.check(name, OP_TOLERANCE, x, |_, v| Ok(v[0].matmul(v[1])?))?;
            }
            "conv2d" => {
                let x = h.uniform(name, &[&[2, 5, 5], &[3, 2, 3, 3]], -2.0, 2.0);
                h.check(name, OP_TOLERANCE, x, |_, v| {
                    let a = v[0].conv2d(v[1], 1, 0)?.reshape(&[27])?;
                    let b = v[0].conv2d(v[1], 2, 1)?.reshape(&[27])?;
                    Ok(Var::concat(&[a, b], 0)?)
                })?;
            }
            "batchnorm1d" => {
                let x = h.uniform(name, &[&[4, 3], &[3], &[3]], -2.0, 2.0);
                h.check(name, OP_TOLERANCE, x, |_, v| Ok(v[0].batchnorm1d(v[1], v[2], 1e-5)?.0))?;
            }
            _ => {
                let x = h.uniform(name, &[shape], -2.0, 2.0);
                let op = unary(name);
                h.check(name, OP_TOLERANCE, x, move |_, v| op(v[0]))?;
            }
        }
    }
    Ok(())
}

fn composite_checks(h: &mut Harness) -> Result<(), ModelError> {
    // Batched unrolled solve; marginals enter through softmaxed logits.
    let mut x = h.uniform("sinkhorn", &[&[2, 3, 4], &[2, 3], &[2, 4]], -1.0, 1.0);
    x[0] = x[0].map(|v| v + 1.0);
    h.check("sinkhorn", OP_TOLERANCE, x, |_, v| {
        let opts = SinkhornOptions { max_iters: 20, tol: 1e-6, mode: SinkhornMode::Unrolled };
        Ok(sinkhorn_graph(v[0], v[1].softmax(1)?, v[2].softmax(1)?, 0.2, &opts)?.plan)
    })?;

    let x = h.uniform("cosine_discrepancy", &[&[3, 4], &[3, 4]], -2.0, 2.0);
    h.check("cosine_discrepancy", OP_TOLERANCE, x, |_, v| Ok(cost_from_discrepancy(discrepancy(v[0], v[1])?)?))?;

    let x = h.uniform("cross_attend", &[&[2, 8], &[2, 8], &[8, 8], &[8, 8], &[8, 8]], -1.0, 1.0);
    h.check("cross_attend", OP_TOLERANCE, x, |_, v| {
        let w = CvSimWeights { q: v[2], k: v[3], v: v[4] };
        Ok(cross_attend(v[0], v[1], &w, AttentionLayout { tokens: 2, heads: 2 })?.output)
    })?;

    // Standardized columns rescaled so their spreads straddle γ = 1 but stay clear of the hinge.
    let spreads = [0.3, 0.6, 1.8];
    let raw = h.uniform("variance_term", &[&[6, 3]], -1.0, 1.0).remove(0);
    let mut q = raw.clone();
    for (j, s) in spreads.iter().enumerate() {
        let col: Vec<f64> = (0..6).map(|r| raw.at(&[r, j])).collect();
        let m = col.iter().sum::<f64>() / 6.0;
        let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 5.0).sqrt();
        for (r, v) in col.iter().enumerate() {
            q.set(&[r, j], (v - m) / sd * s);
        }
    }
    h.check("variance_term", OP_TOLERANCE, vec![q], |_, v| Ok(variance_term(v[0], 1.0, 1e-4)?))?;

    let x = h.uniform("covariance_term", &[&[5, 3]], -2.0, 2.0);
    h.check("covariance_term", OP_TOLERANCE, x, |_, v| Ok(covariance_term(v[0])?))?;

    total_loss_check(h)
}

/// `L_MT` on the tiny configuration, differentiated w.r.t. every parameter.
fn total_loss_check(h: &mut Harness) -> Result<(), ModelError> {
    let cfg = ModelConfig::tiny();
    let store = ParamStore::init(&cfg, h.seed)?;
    let names: Vec<String> = store.params.keys().cloned().collect();
    let inputs: Vec<Tensor> = store.params.values().cloned().collect();
    let side = cfg.encoder.image_size;
    let views = h.uniform("total_loss/views", &[&[2, 1, side, side], &[2, 1, side, side]], 0.0, 1.0);
    let ot = OtConfig::default();
    let weights = LossWeights::default();
    h.check("total_loss", LOSS_TOLERANCE, inputs, move |g, v| {
        let bound = Bound { vars: names.iter().cloned().zip(v.iter().copied()).collect::<BTreeMap<_, _>>() };
        Ok(forward_loss(g, &bound, &store, &cfg, &ot, &weights, &views[0], &views[1])?.total)
    })
}

/// Run every registered check. `fault` corrupts the adjoint of the named op
/// (negative control).
pub fn run_gradcheck(seed: u64, fault: Option<&'static str>) -> Result<GradcheckReport, ModelError> {
    let mut h = Harness { seed, fault, results: Vec::new() };
    op_checks(&mut h)?;
    composite_checks(&mut h)?;
    Ok(GradcheckReport { results: h.results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_lists_every_op_once() {
        let report = run_gradcheck(0, None).unwrap();
        let names: Vec<&str> = report.results.iter().map(|r| r.name).collect();
        let expected: Vec<&str> = OP_NAMES.iter().chain(COMPOSITE_NAMES).copied().collect();
        assert_eq!(names, expected);
        assert!(report.passed(), "{}", report.render());
    }

    #[test]
    fn corrupted_adjoint_is_caught() {
        for op in ["matmul", "softmax", "sinkhorn"] {
            let report = run_gradcheck(1, Some(op)).unwrap();
            assert!(!report.passed(), "{op}");
            let failing = report.results.iter().find(|r| r.name == op).unwrap();
            assert!(!failing.passed());
        }
    }

    #[test]
    fn hinge_avoidance_keeps_side() {
        let t = avoid(Tensor::from_vec(vec![3], vec![0.01, -0.02, 1.0]).unwrap(), 0.0, 0.05);
        assert_eq!(t.data(), &[0.05, -0.05, 1.0]);
    }
}
