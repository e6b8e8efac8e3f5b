use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

use super::TrainError;
use crate::model::{encode_batch, pool, pooled_features, ModelConfig, ModelError, ParamStore};
use crate::pipeline::sample_rng;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeProtocol {
    Frozen,
    Finetune,
}

impl fmt::Display for ProbeProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeProtocol::Frozen => "frozen",
            ProbeProtocol::Finetune => "finetune",
        })
    }
}

impl FromStr for ProbeProtocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "frozen" => Ok(ProbeProtocol::Frozen),
            "finetune" => Ok(ProbeProtocol::Finetune),
            _ => Err(format!("unknown protocol `{s}` (expected frozen or finetune)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub protocol: ProbeProtocol,
    pub fraction: f64,
    /// Newton iterations cap for the linear head.
    pub iterations: usize,
    /// L2 penalty on the head (weights and bias).
    pub l2: f64,
    /// Head learning rate during the finetune steps.
    pub lr: f64,
    /// Joint minibatch steps after the head is fitted (finetune only).
    pub finetune_steps: usize,
    pub finetune_batch: usize,
    pub finetune_lr: f64,
    /// Held-out share per class when no separate test set is given.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            protocol: ProbeProtocol::Frozen,
            fraction: 1.0,
            iterations: 50,
            l2: 1e-4,
            lr: 0.1,
            finetune_steps: 200,
            finetune_batch: 64,
            finetune_lr: 0.01,
            holdout: 0.2,
            seed: 0,
        }
    }
}

/// Images `N×1×h×w` with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledSet {
    pub fn select(&self, idx: &[usize]) -> Result<LabeledSet, TrainError> {
        let items: Vec<Tensor> = idx.iter().map(|&i| self.images.index_first(i)).collect();
        Ok(LabeledSet {
            images: Tensor::stack(&items)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        })
    }

    /// Stratified split into (train, held-out) with `holdout` share of each class held out.
    pub fn split(&self, holdout: f64, seed: u64) -> Result<(LabeledSet, LabeledSet), TrainError> {
        if !(holdout > 0.0 && holdout < 1.0) {
            return Err(TrainError::Config(format!("holdout share {holdout} outside (0, 1)")));
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for c in 0..self.num_classes {
            let mut members: Vec<usize> = (0..self.labels.len()).filter(|&i| self.labels[i] == c).collect();
            members.shuffle(&mut sample_rng(seed, &[0x5eed, c as u64]));
            let k = (holdout * members.len() as f64).round() as usize;
            test.extend_from_slice(&members[..k]);
            train.extend_from_slice(&members[k..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.select(&train)?, self.select(&test)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub protocol: ProbeProtocol,
    pub fraction: f64,
    pub accuracy: f64,
    /// Mean one-vs-rest AUC.
    pub auc: f64,
    pub per_class_auc: Vec<f64>,
}

impl ProbeResult {
    pub const CSV_HEADER: &'static str = "protocol,fraction,accuracy,auc,per_class_auc";

    pub fn csv(&self) -> String {
        let per: Vec<String> = self.per_class_auc.iter().map(|a| a.to_string()).collect();
        format!("{},{},{},{},{}", self.protocol, self.fraction, self.accuracy, self.auc, per.join(";"))
    }
}

/// Indices of a class-stratified subset holding `round(fraction·N)` samples,
/// split as evenly as possible across classes.
pub fn stratified_subset(labels: &[usize], num_classes: usize, fraction: f64, seed: u64) -> Result<Vec<usize>, TrainError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(TrainError::Subset(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        let slot = by_class.get_mut(l).ok_or_else(|| TrainError::Subset(format!("label {l} >= {num_classes} classes")))?;
        slot.push(i);
    }
    if fraction == 1.0 {
        if let Some(c) = by_class.iter().position(Vec::is_empty) {
            return Err(TrainError::Subset(format!("class {c} has no samples")));
        }
        return Ok((0..labels.len()).collect());
    }
    let m = (fraction * labels.len() as f64).round() as usize;
    let (base, rem) = (m / num_classes, m % num_classes);
    let mut out = Vec::with_capacity(m);
    for (c, members) in by_class.iter_mut().enumerate() {
        let want = base + usize::from(c < rem);
        if want == 0 {
            return Err(TrainError::Subset(format!(
                "fraction {fraction} of {} samples leaves class {c} empty",
                labels.len()
            )));
        }
        if want > members.len() {
            return Err(TrainError::Subset(format!("class {c} has {} samples, {want} requested", members.len())));
        }
        members.shuffle(&mut sample_rng(seed, &[c as u64]));
        out.extend_from_slice(&members[..want]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Area under the ROC curve via the Mann–Whitney statistic, ties at midranks.
pub fn compute_auc(scores: &[f64], labels: &[bool]) -> Result<f64, TrainError> {
    if scores.len() != labels.len() {
        return Err(TrainError::Degenerate(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(TrainError::Degenerate("non-finite score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(TrainError::Degenerate("both classes must be present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Ranks are doubled so midranks stay integral.
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        rank_sum2 += mid2 * order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        i = j + 1;
    }
    let p = pos as u64;
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / 2.0 / (pos * neg) as f64)
}

struct Standardizer {
    mean: Tensor,
    inv_std: Tensor,
}

impl Standardizer {
    fn fit(f: &Tensor) -> Self {
        let [n, d] = *f.shape() else { unreachable!("features are n x d") };
        let x = f.data();
        let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|r| x[r * d + j]).sum::<f64>() / n as f64).collect();
        let inv: Vec<f64> = (0..d)
            .map(|j| {
                let v = (0..n).map(|r| (x[r * d + j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
                if v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 }
            })
            .collect();
        Self { mean: Tensor::from_vec(vec![1, d], mean).expect("d"), inv_std: Tensor::from_vec(vec![1, d], inv).expect("d") }
    }

    fn apply<'g>(&self, f: Var<'g>) -> Result<Var<'g>, TrainError> {
        let g = f.graph();
        Ok(f.sub(g.constant(self.mean.clone()))?.mul(g.constant(self.inv_std.clone()))?)
    }
}

struct Head {
    w: Tensor,
    b: Tensor,
}

fn cross_entropy<'g>(logits: Var<'g>, labels: &[usize], k: usize) -> Result<Var<'g>, TrainError> {
    let n = labels.len();
    let onehot = Tensor::from_fn(&[n, k], |idx| if labels[idx / k] == idx % k { 1.0 } else { 0.0 });
    let lp = logits.log_softmax(1)?;
    Ok(lp.mul(logits.graph().constant(onehot))?.sum()?.scale(-1.0 / n as f64)?)
}

/// Penalized mean cross-entropy of the head `theta` (`(d+1)×k`, bias row last)
/// and the class probabilities it produces.
fn head_objective(x: &DMatrix<f64>, labels: &[usize], theta: &DMatrix<f64>, l2: f64) -> (f64, DMatrix<f64>) {
    let mut p = x * theta;
    let n = labels.len();
    let mut nll = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let mut row = p.row_mut(i);
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let s = row.sum();
        row /= s;
        nll -= row[y].ln();
    }
    (nll / n as f64 + 0.5 * l2 * theta.norm_squared(), p)
}

/// Multinomial logistic regression fitted by damped Newton steps. The penalty
/// makes the objective strictly convex, so the fit is unique and deterministic.
fn fit_head(features: &Tensor, labels: &[usize], k: usize, std: &Standardizer, cfg: &ProbeConfig) -> Result<Head, TrainError> {
    let [n, d] = *features.shape() else { unreachable!("features are n x d") };
    if !(cfg.l2 > 0.0) {
        return Err(TrainError::Config(format!("probe l2 penalty must be positive, got {}", cfg.l2)));
    }
    let m = d + 1;
    let (mean, inv) = (std.mean.data(), std.inv_std.data());
    let x = DMatrix::from_fn(n, m, |i, j| if j == d { 1.0 } else { (features.data()[i * d + j] - mean[j]) * inv[j] });
    let onehot = DMatrix::from_fn(n, k, |i, c| if labels[i] == c { 1.0 } else { 0.0 });
    let mut theta = DMatrix::zeros(m, k);
    let (mut obj, mut p) = head_objective(&x, labels, &theta, cfg.l2);
    for _ in 0..cfg.iterations {
        let grad = x.transpose() * (&p - &onehot) / n as f64 + &theta * cfg.l2;
        let mut hess = DMatrix::zeros(m * k, m * k);
        for c in 0..k {
            for c2 in c..k {
                let mut weighted = x.clone();
                for (i, mut row) in weighted.row_iter_mut().enumerate() {
                    row *= p[(i, c)] * (f64::from(c == c2) - p[(i, c2)]) / n as f64;
                }
                let block = x.transpose() * weighted;
                hess.view_mut((c * m, c2 * m), (m, m)).copy_from(&block);
                if c2 != c {
                    hess.view_mut((c2 * m, c * m), (m, m)).copy_from(&block.transpose());
                }
            }
        }
        for i in 0..m * k {
            hess[(i, i)] += cfg.l2;
        }
        let g = DVector::from_column_slice(grad.as_slice());
        let Some(chol) = hess.cholesky() else { break };
        let step = chol.solve(&g);
        let decrement = g.dot(&step);
        if !(decrement > 1e-14) {
            break;
        }
        let step = DMatrix::from_column_slice(m, k, step.as_slice());
        let mut t = 1.0;
        loop {
            let candidate = &theta - &step * t;
            let (o, q) = head_objective(&x, labels, &candidate, cfg.l2);
            if o <= obj - 0.25 * t * decrement || t < 1e-8 {
                theta = candidate;
                (obj, p) = (o, q);
                break;
            }
            t *= 0.5;
        }
    }
    if !obj.is_finite() {
        return Err(TrainError::Degenerate("probe objective is not finite".into()));
    }
    Ok(Head {
        w: Tensor::from_fn(&[d, k], |idx| theta[(idx / k, idx % k)]),
        b: Tensor::from_fn(&[1, k], |c| theta[(d, c)]),
    })
}

fn sgd(w: &mut Tensor, g: &Tensor, lr: f64) {
    w.data_mut().iter_mut().zip(g.data()).for_each(|(w, g)| *w -= lr * g);
}

/// Train a linear classifier on encoder features of (a stratified subset of) `train`
/// and evaluate it on `test`.
pub fn linear_probe(
    store: &ParamStore,
    model: &ModelConfig,
    train: &LabeledSet,
    test: &LabeledSet,
    cfg: &ProbeConfig,
) -> Result<ProbeResult, TrainError> {
    let k = train.num_classes;
    if test.num_classes != k {
        return Err(TrainError::Config("train and test sets disagree on the class count".into()));
    }
    let subset = train.select(&stratified_subset(&train.labels, k, cfg.fraction, cfg.seed)?)?;
    let feats = pooled_features(store, model, &subset.images)?;
    let std = Standardizer::fit(&feats);
    let mut head = fit_head(&feats, &subset.labels, k, &std, cfg)?;
    let mut encoder = store.clone();
    if cfg.protocol == ProbeProtocol::Finetune {
        encoder.params.retain(|name, _| name.starts_with("enc"));
        let n = subset.labels.len();
        let batch = cfg.finetune_batch.min(n).max(1);
        for step in 0..cfg.finetune_steps {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut sample_rng(cfg.seed, &[0xf1, step as u64]));
            idx.truncate(batch);
            let mb = subset.select(&idx)?;
            let g = Graph::new();
            let bound = encoder.bind(&g);
            let (w, b) = (g.param(head.w.clone()), g.param(head.b.clone()));
            let f = pool(encode_batch(&bound, model, g.constant(mb.images.clone()))?)?;
            let loss = cross_entropy(std.apply(f)?.matmul(w)?.add(b)?, &mb.labels, k)?;
            g.backward(loss).map_err(ModelError::from)?;
            let grads = encoder.grads(&bound);
            for (name, p) in encoder.params.iter_mut() {
                sgd(p, &grads[name], cfg.finetune_lr);
            }
            sgd(&mut head.w, &w.grad().expect("param"), cfg.lr);
            sgd(&mut head.b, &b.grad().expect("param"), cfg.lr);
        }
    }
    let test_feats = pooled_features(&encoder, model, &test.images)?;
    let g = Graph::new();
    let logp = std
        .apply(g.constant(test_feats))?
        .matmul(g.constant(head.w))?
        .add(g.constant(head.b))?
        .log_softmax(1)?;
    let lp = logp.value();
    let rows: Vec<&[f64]> = lp.data().chunks(k).collect();
    let correct = rows
        .iter()
        .zip(&test.labels)
        .filter(|(r, &y)| (0..k).max_by(|&a, &b| r[a].total_cmp(&r[b])).expect("k >= 1") == y)
        .count();
    let mut per_class_auc = Vec::with_capacity(k);
    for c in 0..k {
        let scores: Vec<f64> = rows.iter().map(|r| r[c]).collect();
        let labels: Vec<bool> = test.labels.iter().map(|&y| y == c).collect();
        per_class_auc.push(compute_auc(&scores, &labels)?);
    }
    Ok(ProbeResult {
        protocol: cfg.protocol,
        fraction: cfg.fraction,
        accuracy: correct as f64 / test.labels.len() as f64,
        auc: per_class_auc.iter().sum::<f64>() / k as f64,
        per_class_auc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        let t = [false, false, true, true];
        assert_eq!(compute_auc(&[0.1, 0.2, 0.8, 0.9], &t).unwrap(), 1.0);
        assert_eq!(compute_auc(&[0.9, 0.8, 0.2, 0.1], &t).unwrap(), 0.0);
        assert_eq!(compute_auc(&[1.0, 2.0, 3.0, 4.0], &[false, true, false, true]).unwrap(), 0.75);
        assert_eq!(compute_auc(&[1.0, 1.0, 1.0], &[false, true, true]).unwrap(), 0.5);
        assert!(matches!(compute_auc(&[1.0, 2.0], &[true, true]), Err(TrainError::Degenerate(_))));
    }

    #[test]
    fn subset_is_stratified() {
        let labels: Vec<usize> = (0..103).map(|i| i % 4).collect();
        let s = stratified_subset(&labels, 4, 0.1, 3).unwrap();
        assert_eq!(s.len(), 10);
        let counts: Vec<usize> = (0..4).map(|c| s.iter().filter(|&&i| labels[i] == c).count()).collect();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        assert_eq!(s, stratified_subset(&labels, 4, 0.1, 3).unwrap());
        assert!(matches!(stratified_subset(&labels[..100], 4, 0.0001, 0), Err(TrainError::Subset(_))));
        assert!(matches!(stratified_subset(&labels, 4, 0.01, 0), Err(TrainError::Subset(_))));
        assert_eq!(stratified_subset(&labels, 4, 1.0, 0).unwrap().len(), 103);
    }

    #[test]
    fn newton_head_reaches_a_stationary_point() {
        let (n, d, k) = (120, 5, 3);
        let mut rng = sample_rng(9, &[]);
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let feats = Tensor::from_fn(&[n, d], |idx| {
            let (i, j) = (idx / d, idx % d);
            rand::Rng::gen_range(&mut rng, -1.0..1.0) + if j == labels[i] { 1.0 } else { 0.0 }
        });
        let std = Standardizer::fit(&feats);
        let cfg = ProbeConfig::default();
        let head = fit_head(&feats, &labels, k, &std, &cfg).unwrap();
        let g = Graph::new();
        let (w, b) = (g.param(head.w.clone()), g.param(head.b.clone()));
        let ce = cross_entropy(std.apply(g.constant(feats.clone())).unwrap().matmul(w).unwrap().add(b).unwrap(), &labels, k).unwrap();
        g.backward(ce).unwrap();
        // Stationarity of the penalized objective: ∇CE + l2·θ = 0.
        let gw = w.grad().unwrap().data().iter().zip(head.w.data()).map(|(g, w)| (g + cfg.l2 * w).abs()).fold(0.0, f64::max);
        let gb = b.grad().unwrap().data().iter().zip(head.b.data()).map(|(g, b)| (g + cfg.l2 * b).abs()).fold(0.0, f64::max);
        assert!(gw.max(gb) < 1e-9, "{gw} {gb}");
        assert_eq!(fit_head(&feats, &labels, k, &std, &cfg).unwrap().w, head.w);
    }

    #[test]
    fn protocol_names() {
        for p in [ProbeProtocol::Frozen, ProbeProtocol::Finetune] {
            assert_eq!(p.to_string().parse::<ProbeProtocol>().unwrap(), p);
        }
    }
}
