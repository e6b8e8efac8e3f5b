use otml_core::ot::{
    build_cost, build_discrepancy, exact_ot_oracle, sinkhorn, sinkhorn_graph, FeatureMap, Marginal, SinkhornMode,
    SinkhornOptions, TransportPlan, TransportProblem,
};
use otml_core::tensor::{Graph, Tensor};
use proptest::prelude::*;

fn config() -> ProptestConfig {
    ProptestConfig { cases: 256, ..ProptestConfig::default() }
}

fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..1.0, n).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.iter().map(|v| v / s).collect()
    })
}

#[derive(Debug, Clone)]
struct Instance {
    rows: usize,
    cols: usize,
    cost: Vec<f64>,
    mu: Vec<f64>,
    nu: Vec<f64>,
}

impl Instance {
    fn problem(&self, eps: f64) -> TransportProblem {
        TransportProblem::new(
            Tensor::from_vec(vec![self.rows, self.cols], self.cost.clone()).unwrap(),
            Marginal::new(self.mu.clone()).unwrap(),
            Marginal::new(self.nu.clone()).unwrap(),
            eps,
        )
        .unwrap()
    }
}

fn instance(max: usize) -> impl Strategy<Value = Instance> {
    (2..=max, 2..=max).prop_flat_map(|(rows, cols)| {
        (prop::collection::vec(0.0f64..2.0, rows * cols), simplex(rows), simplex(cols))
            .prop_map(move |(cost, mu, nu)| Instance { rows, cols, cost, mu, nu })
    })
}

fn solve(p: &TransportProblem, tol: f64) -> TransportPlan {
    sinkhorn(p, &SinkhornOptions::converged(tol)).unwrap()
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn plans_are_nonnegative_and_feasible(inst in instance(8), eps in 0.01f64..1.0) {
        let plan = solve(&inst.problem(eps), 1e-6);
        prop_assert!(plan.plan.data().iter().all(|&t| t >= 0.0));
        prop_assert!(plan.marginal_error <= 1e-6);
        let t = plan.plan.data();
        let row_err: f64 = (0..inst.rows)
            .map(|i| (t[i * inst.cols..(i + 1) * inst.cols].iter().sum::<f64>() - inst.mu[i]).abs())
            .sum();
        let col_err: f64 = (0..inst.cols)
            .map(|j| ((0..inst.rows).map(|i| t[i * inst.cols + j]).sum::<f64>() - inst.nu[j]).abs())
            .sum();
        prop_assert!(row_err <= 1e-6 && col_err <= 1e-6, "rows {row_err} cols {col_err}");
    }

    #[test]
    fn entropic_cost_never_beats_the_exact_optimum(inst in instance(6), eps in 0.005f64..0.5) {
        let p = inst.problem(eps);
        let plan = solve(&p, 1e-9);
        let oracle = exact_ot_oracle(&p.cost, &p.mu, &p.nu).unwrap();
        // A plan that misses the marginals by δ (L1) can undercut the polytope by at most max|M|·δ.
        let slack = 2.0 * plan.marginal_error + 1e-12;
        prop_assert!(plan.cost >= oracle.cost - slack, "sinkhorn {} oracle {}", plan.cost, oracle.cost);
    }

    #[test]
    fn constant_cost_shift_moves_only_the_cost(inst in instance(6), eps in 0.05f64..1.0, c in -1.0f64..3.0) {
        let base = solve(&inst.problem(eps), 1e-11);
        let mut shifted_inst = inst.clone();
        shifted_inst.cost.iter_mut().for_each(|m| *m += c);
        let shifted = solve(&shifted_inst.problem(eps), 1e-11);
        prop_assert!(base.plan.max_abs_diff(&shifted.plan) <= 1e-8);
        let mass: f64 = shifted.plan.data().iter().sum();
        let expected = base.cost + c * mass;
        prop_assert!((shifted.cost - expected).abs() <= 1e-8, "{} vs {}", shifted.cost, expected);
        prop_assert!((mass - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn transposed_problem_gives_transposed_plan(inst in instance(6), eps in 0.05f64..1.0) {
        let forward = solve(&inst.problem(eps), 1e-11);
        let m = Tensor::from_vec(vec![inst.rows, inst.cols], inst.cost.clone()).unwrap().transpose().unwrap();
        let swapped = Instance { rows: inst.cols, cols: inst.rows, cost: m.into_data(), mu: inst.nu.clone(), nu: inst.mu.clone() };
        let backward = solve(&swapped.problem(eps), 1e-11);
        prop_assert!(forward.plan.transpose().unwrap().max_abs_diff(&backward.plan) <= 1e-8);
    }
}

#[derive(Debug, Clone)]
struct Maps {
    d: usize,
    hw: usize,
    zs: Vec<f64>,
    zt: Vec<f64>,
}

fn maps() -> impl Strategy<Value = Maps> {
    (2usize..=10, 1usize..=12).prop_flat_map(|(d, hw)| {
        let row = move || prop::collection::vec(-2.0f64..2.0, hw).prop_filter("nonzero row", |r| r.iter().any(|v| v.abs() > 1e-3));
        (prop::collection::vec(row(), d), prop::collection::vec(row(), d)).prop_map(move |(zs, zt)| Maps {
            d,
            hw,
            zs: zs.concat(),
            zt: zt.concat(),
        })
    })
}

fn feature(d: usize, hw: usize, v: Vec<f64>) -> FeatureMap {
    FeatureMap::new(Tensor::from_vec(vec![d, hw], v).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn cosine_and_cost_stay_in_range(m in maps()) {
        let c = build_discrepancy(&feature(m.d, m.hw, m.zs), &feature(m.d, m.hw, m.zt)).unwrap();
        prop_assert!(c.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let cost = build_cost(&c).unwrap();
        prop_assert!(cost.data().iter().all(|v| (0.0..=2.0).contains(v)));
    }

    #[test]
    fn permuting_source_channels_permutes_rows(m in maps(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut perm: Vec<usize> = (0..m.d).collect();
        perm.shuffle(&mut rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(seed));
        let permuted: Vec<f64> = perm.iter().flat_map(|&p| m.zs[p * m.hw..(p + 1) * m.hw].to_vec()).collect();
        let c = build_discrepancy(&feature(m.d, m.hw, m.zs.clone()), &feature(m.d, m.hw, m.zt.clone())).unwrap();
        let cp = build_discrepancy(&feature(m.d, m.hw, permuted), &feature(m.d, m.hw, m.zt)).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..m.d {
                prop_assert_eq!(cp.at(&[i, j]), c.at(&[p, j]));
            }
        }
    }

    #[test]
    fn positive_row_scaling_leaves_cosine_unchanged(m in maps(), scales in prop::collection::vec(1e-3f64..1e3, 10)) {
        let scaled: Vec<f64> = m.zs.iter().enumerate().map(|(k, v)| v * scales[k / m.hw]).collect();
        let c = build_discrepancy(&feature(m.d, m.hw, m.zs.clone()), &feature(m.d, m.hw, m.zt.clone())).unwrap();
        let cs = build_discrepancy(&feature(m.d, m.hw, scaled), &feature(m.d, m.hw, m.zt)).unwrap();
        prop_assert!(c.max_abs_diff(&cs) <= 1e-12);
    }
}

/// ⟨T, M⟩ with μ = softmax(logits) through the unrolled solver.
fn unrolled_objective(cost: &Tensor, logits: &[f64], nu: &Tensor, eps: f64) -> (f64, Vec<f64>) {
    let g = Graph::new();
    let m = g.constant(cost.clone());
    let l = g.param(Tensor::from_vec(vec![logits.len()], logits.to_vec()).unwrap());
    let mu = l.softmax(0).unwrap();
    let opts = SinkhornOptions { max_iters: 30, tol: 1e-6, mode: SinkhornMode::Unrolled };
    let plan = sinkhorn_graph(m, mu, g.constant(nu.clone()), eps, &opts).unwrap();
    let loss = plan.plan.mul(m).unwrap().sum().unwrap();
    g.backward(loss).unwrap();
    (loss.item(), g.grad(l).unwrap().into_data())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn unrolled_gradient_wrt_marginal_logits(inst in instance(5), logits in prop::collection::vec(-1.5f64..1.5, 5), eps in 0.05f64..0.5) {
        let cost = Tensor::from_vec(vec![inst.rows, inst.cols], inst.cost.clone()).unwrap();
        let nu = Tensor::from_vec(vec![inst.cols], inst.nu.clone()).unwrap();
        let logits = &logits[..inst.rows];
        let (_, grad) = unrolled_objective(&cost, logits, &nu, eps);
        let h = 1e-6;
        for k in 0..inst.rows {
            let mut up = logits.to_vec();
            up[k] += h;
            let mut down = logits.to_vec();
            down[k] -= h;
            let fd = (unrolled_objective(&cost, &up, &nu, eps).0 - unrolled_objective(&cost, &down, &nu, eps).0) / (2.0 * h);
            let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-6);
            prop_assert!(rel <= 1e-3, "logit {k}: analytic {} numeric {fd}", grad[k]);
        }
    }
}
