//! Plain-text transport problems: `d`, then `d` cost rows, then μ, then ν, then ε.

use anyhow::{bail, Context, Result};
use otml_core::{Marginal, Tensor, TransportPlan, TransportProblem};

pub fn parse_problem(text: &str) -> Result<TransportProblem> {
    let mut tokens = text.split_whitespace();
    let mut next = |what: &str| -> Result<f64> {
        let tok = tokens.next().with_context(|| format!("unexpected end of file while reading {what}"))?;
        tok.parse::<f64>().with_context(|| format!("bad number `{tok}` in {what}"))
    };
    let d = next("dimension")?;
    if !(d >= 1.0 && d.fract() == 0.0 && d <= 1e4) {
        bail!("dimension must be a positive integer, got {d}");
    }
    let d = d as usize;
    let cost = (0..d * d).map(|_| next("cost matrix")).collect::<Result<Vec<_>>>()?;
    let mu = (0..d).map(|_| next("mu")).collect::<Result<Vec<_>>>()?;
    let nu = (0..d).map(|_| next("nu")).collect::<Result<Vec<_>>>()?;
    let epsilon = next("epsilon")?;
    if tokens.next().is_some() {
        bail!("trailing data after epsilon");
    }
    let problem = TransportProblem::new(Tensor::from_vec(vec![d, d], cost)?, marginal(mu, "mu")?, marginal(nu, "nu")?, epsilon)?;
    Ok(problem)
}

/// Printed marginals carry few digits, so sums within 1e-6 of one are renormalised.
fn marginal(mut w: Vec<f64>, what: &str) -> Result<Marginal> {
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() <= 1e-6 {
        w.iter_mut().for_each(|v| *v /= s);
    }
    Marginal::new(w).with_context(|| format!("invalid {what}"))
}

/// Shortest round-trip form, in exponent notation far from unit scale.
fn number(v: f64) -> String {
    if v != 0.0 && !(1e-4..1e15).contains(&v.abs()) {
        format!("{v:e}")
    } else {
        v.to_string()
    }
}

pub fn render_solution(plan: &TransportPlan) -> String {
    let d = plan.plan.shape()[0];
    let mut out = format!("{d}\n");
    for row in plan.plan.data().chunks(plan.plan.shape()[1].max(1)) {
        let cells: Vec<String> = row.iter().map(|&v| number(v)).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out.push_str(&format!("{}\n{}\n", number(plan.cost), plan.iterations));
    out
}
