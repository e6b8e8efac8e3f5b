//! Cross-view multi-head attention between pooled view descriptors.
//!
//! A pooled vector of width `d` is viewed as `tokens` tokens of width
//! `d / tokens`; each token is split into `heads` heads. Queries come from the
//! source view, keys and values from the target view, and attention runs over
//! the target's tokens. Softmaxed outputs become the transport marginals.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::tensor::{Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum CvSimError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
}

/// Token/head layout of a width-`d` vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub tokens: usize,
    pub heads: usize,
}

impl AttentionLayout {
    pub fn validate(&self, d: usize) -> Result<(), CvSimError> {
        if self.tokens == 0 || self.heads == 0 || !d.is_multiple_of(self.tokens) || !(d / self.tokens).is_multiple_of(self.heads) {
            return Err(CvSimError::Config(format!(
                "width {d} not divisible into {} tokens x {} heads",
                self.tokens, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_width(&self, d: usize) -> usize {
        d / self.tokens / self.heads
    }
}

/// Projection weights of one attention module.
#[derive(Clone, Debug, PartialEq)]
pub struct CvSimParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

impl CvSimParams {
    /// Orthogonal matrices scaled by `1/√d`.
    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (d as f64).sqrt();
        let mut next = || orthogonal(d, rng).map(|v| v * scale);
        Self { w_q: next(), w_k: next(), w_v: next() }
    }
}

/// Random orthogonal `d×d` matrix (Gram–Schmidt on Gaussian rows).
pub fn orthogonal(d: usize, rng: &mut impl Rng) -> Tensor {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    while rows.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Tensor::from_vec(vec![d, d], rows.concat()).expect("d*d values")
}

/// Projection weights bound to a graph.
#[derive(Clone, Copy, Debug)]
pub struct CvSimWeights<'g> {
    pub q: Var<'g>,
    pub k: Var<'g>,
    pub v: Var<'g>,
}

#[derive(Debug)]
pub struct Attended<'g> {
    /// Refined vector, same shape as the source input.
    pub output: Var<'g>,
    /// Attention weights, `(n·heads) × tokens × tokens`, rows sum to one.
    pub attention: Var<'g>,
}

/// Attend from `src` (queries) to `tgt` (keys and values). Inputs are `d` or `n×d`.
pub fn cross_attend<'g>(
    src: Var<'g>,
    tgt: Var<'g>,
    w: &CvSimWeights<'g>,
    layout: AttentionLayout,
) -> Result<Attended<'g>, CvSimError> {
    let shape = src.shape();
    if shape != tgt.shape() || shape.is_empty() || shape.len() > 2 {
        return Err(CvSimError::Config(format!("inputs must be d or n x d, got {shape:?} and {:?}", tgt.shape())));
    }
    let d = *shape.last().expect("nonempty");
    for (name, m) in [("W_q", w.q), ("W_k", w.k), ("W_v", w.v)] {
        if m.shape() != [d, d] {
            return Err(CvSimError::Config(format!("{name} must be {d}x{d}, got {:?}", m.shape())));
        }
    }
    layout.validate(d)?;
    let n = if shape.len() == 2 { shape[0] } else { 1 };
    let (t, h) = (layout.tokens, layout.heads);
    let hw = layout.head_width(d);
    let src = src.reshape(&[n, d])?;
    let tgt = tgt.reshape(&[n, d])?;
    let split = |x: Var<'g>| -> Result<Var<'g>, TensorError> {
        x.reshape(&[n, t, h, hw])?.permute(&[0, 2, 1, 3])?.reshape(&[n * h, t, hw])
    };
    let q = split(src.matmul(w.q.transpose()?)?)?;
    let k = split(tgt.matmul(w.k.transpose()?)?)?;
    let v = split(tgt.matmul(w.v.transpose()?)?)?;
    let scores = q.matmul(k.transpose()?)?.scale(1.0 / (hw as f64).sqrt())?;
    let attention = scores.softmax(2)?;
    let out = attention
        .matmul(v)?
        .reshape(&[n, h, t, hw])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[n, d])?;
    let output = if shape.len() == 1 { out.reshape(&[d])? } else { out };
    Ok(Attended { output, attention })
}

/// Refined representations of both views and the marginals derived from them.
#[derive(Debug)]
pub struct MarginalPair<'g> {
    pub mu: Var<'g>,
    pub nu: Var<'g>,
    pub r_s: Var<'g>,
    pub r_t: Var<'g>,
}

/// `μ = softmax(R_s(g_s ← g_t) / τ)`, `ν = softmax(R_t(g_t ← g_s) / τ)`.
pub fn make_marginals<'g>(
    g_s: Var<'g>,
    g_t: Var<'g>,
    r_s: &CvSimWeights<'g>,
    r_t: &CvSimWeights<'g>,
    layout: AttentionLayout,
    temperature: f64,
) -> Result<MarginalPair<'g>, CvSimError> {
    if !(temperature > 0.0) {
        return Err(CvSimError::Config(format!("temperature must be positive, got {temperature}")));
    }
    let rs = cross_attend(g_s, g_t, r_s, layout)?.output;
    let rt = cross_attend(g_t, g_s, r_t, layout)?.output;
    let axis = rs.shape().len() - 1;
    let mu = rs.scale(1.0 / temperature)?.softmax(axis)?;
    let nu = rt.scale(1.0 / temperature)?.softmax(axis)?;
    Ok(MarginalPair { mu, nu, r_s: rs, r_t: rt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn rng() -> Xoshiro256PlusPlus {
        Xoshiro256PlusPlus::seed_from_u64(7)
    }

    fn bind<'g>(g: &'g Graph, p: &CvSimParams) -> CvSimWeights<'g> {
        CvSimWeights { q: g.param(p.w_q.clone()), k: g.param(p.w_k.clone()), v: g.param(p.w_v.clone()) }
    }

    fn random_vec(d: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::from_fn(&[d], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_value_projection_gives_zero_output_and_uniform_marginal() {
        let mut r = rng();
        let d = 8;
        let mut p = CvSimParams::init(d, &mut r);
        p.w_v = Tensor::zeros(&[d, d]);
        let g = Graph::new();
        let w = bind(&g, &p);
        let (gs, gt) = (g.constant(random_vec(d, &mut r)), g.constant(random_vec(d, &mut r)));
        let layout = AttentionLayout { tokens: 4, heads: 2 };
        let out = cross_attend(gs, gt, &w, layout).unwrap().output;
        assert!(out.value().data().iter().all(|&v| v == 0.0));
        let pair = make_marginals(gs, gt, &w, &w, layout, 1.0).unwrap();
        assert!(pair.mu.value().data().iter().all(|&v| (v - 1.0 / d as f64).abs() < 1e-15));
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let mut r = rng();
        let d = 6;
        let p = CvSimParams::init(d, &mut r);
        let g = Graph::new();
        let w = bind(&g, &p);
        let (gs, gt) = (random_vec(d, &mut r), random_vec(d, &mut r));
        let out = cross_attend(g.constant(gs), g.constant(gt.clone()), &w, AttentionLayout { tokens: 1, heads: 1 })
            .unwrap()
            .output;
        for i in 0..d {
            let expected: f64 = (0..d).map(|j| p.w_v.at(&[i, j]) * gt.data()[j]).sum();
            assert!((out.value().data()[i] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_evaluated_two_token_forward() {
        // d = 4, two tokens of width 2, one head. Identity-like projections keep the
        // arithmetic checkable by hand.
        let d = 4;
        let eye = Tensor::eye(d);
        let p = CvSimParams { w_q: eye.clone(), w_k: eye.clone(), w_v: eye.map(|v| 2.0 * v) };
        let g = Graph::new();
        let w = bind(&g, &p);
        let gs = Tensor::from_vec(vec![4], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let gt = Tensor::from_vec(vec![4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let out = cross_attend(g.constant(gs.clone()), g.constant(gt.clone()), &w, AttentionLayout { tokens: 2, heads: 1 })
            .unwrap()
            .output;
        // Scalar oracle.
        let q = [[1.0, 0.0], [0.0, 1.0]];
        let k = [[0.5, -1.0], [2.0, 0.25]];
        let v = [[1.0, -2.0], [4.0, 0.5]];
        let mut expected = [0.0; 4];
        for i in 0..2 {
            let s: Vec<f64> = (0..2).map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / 2f64.sqrt()).collect();
            let z = s[0].exp() + s[1].exp();
            let a = [s[0].exp() / z, s[1].exp() / z];
            for c in 0..2 {
                expected[i * 2 + c] = a[0] * v[0][c] + a[1] * v[1][c];
            }
        }
        for (got, e) in out.value().data().iter().zip(expected) {
            assert!((got - e).abs() < 1e-14, "{got} vs {e}");
        }
    }

    #[test]
    fn attention_rows_and_marginals_are_distributions() {
        let mut r = rng();
        for (d, t, h) in [(8, 4, 2), (12, 3, 2), (16, 8, 1), (32, 8, 2)] {
            let p = CvSimParams::init(d, &mut r);
            let g = Graph::new();
            let w = bind(&g, &p);
            let gs = g.constant(Tensor::from_fn(&[3, d], |_| r.gen_range(-2.0..2.0)));
            let gt = g.constant(Tensor::from_fn(&[3, d], |_| r.gen_range(-2.0..2.0)));
            let layout = AttentionLayout { tokens: t, heads: h };
            let att = cross_attend(gs, gt, &w, layout).unwrap();
            assert_eq!(att.output.shape(), vec![3, d]);
            for row in att.attention.value().data().chunks(t) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            let pair = make_marginals(gs, gt, &w, &w, layout, 1.0).unwrap();
            for m in [pair.mu, pair.nu] {
                for row in m.value().data().chunks(d) {
                    assert!(row.iter().all(|&v| v > 0.0));
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn huge_temperature_flattens_marginals() {
        let mut r = rng();
        let d = 8;
        let p = CvSimParams::init(d, &mut r);
        let g = Graph::new();
        let w = bind(&g, &p);
        let gs = g.constant(random_vec(d, &mut r).map(|v| v * 50.0));
        let gt = g.constant(random_vec(d, &mut r).map(|v| v * 50.0));
        let pair = make_marginals(gs, gt, &w, &w, AttentionLayout { tokens: 4, heads: 1 }, 1e6).unwrap();
        assert!(pair.mu.value().data().iter().all(|&v| (v - 0.125).abs() <= 1e-3));
    }

    #[test]
    fn swapping_views_and_modules_swaps_marginals() {
        let mut r = rng();
        let d = 8;
        let (ps, pt) = (CvSimParams::init(d, &mut r), CvSimParams::init(d, &mut r));
        let g = Graph::new();
        let (ws, wt) = (bind(&g, &ps), bind(&g, &pt));
        let gs = g.constant(random_vec(d, &mut r));
        let gt = g.constant(random_vec(d, &mut r));
        let layout = AttentionLayout { tokens: 4, heads: 2 };
        let a = make_marginals(gs, gt, &ws, &wt, layout, 0.5).unwrap();
        let b = make_marginals(gt, gs, &wt, &ws, layout, 0.5).unwrap();
        assert_eq!(*a.mu.value(), *b.nu.value());
        assert_eq!(*a.nu.value(), *b.mu.value());
    }

    #[test]
    fn bad_layouts_are_configuration_errors() {
        let mut r = rng();
        let p = CvSimParams::init(8, &mut r);
        let g = Graph::new();
        let w = bind(&g, &p);
        let x = g.constant(Tensor::ones(&[8]));
        for (t, h) in [(3, 1), (4, 3), (0, 1)] {
            let res = cross_attend(x, x, &w, AttentionLayout { tokens: t, heads: h });
            assert!(matches!(res, Err(CvSimError::Config(_))));
        }
        let res = make_marginals(x, x, &w, &w, AttentionLayout { tokens: 2, heads: 1 }, 0.0);
        assert!(matches!(res, Err(CvSimError::Config(_))));
    }

    #[test]
    fn orthogonal_init_is_orthogonal() {
        let q = orthogonal(6, &mut rng());
        let qqt = crate::tensor::Graph::new();
        let a = qqt.constant(q.clone());
        let prod = a.matmul(a.transpose().unwrap()).unwrap();
        assert!(prod.value().max_abs_diff(&Tensor::eye(6)) < 1e-12);
    }
}
