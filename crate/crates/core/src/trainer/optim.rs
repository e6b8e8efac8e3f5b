use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::model::ParamKind;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Lars,
    Adam,
}

impl OptimizerKind {
    pub fn default_lr(self) -> f64 {
        match self {
            OptimizerKind::Lars => 3e-4,
            OptimizerKind::Adam => 1e-3,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Lars => "lars",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lars" => Ok(OptimizerKind::Lars),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(format!("unknown optimizer `{s}` (expected lars or adam)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub trust_coeff: f64,
}

/// One LARS step on a single parameter group.
///
/// Weight groups use the layer-wise rate `trust·‖w‖ / (‖g‖ + wd·‖w‖ + 1e-12)`
/// (1 when either norm is zero) and weight decay; bias and normalization groups
/// use rate 1 and no decay.
#[allow(clippy::too_many_arguments)]
pub fn lars_update(
    w: &mut [f64],
    g: &[f64],
    buf: &mut [f64],
    kind: ParamKind,
    lr: f64,
    weight_decay: f64,
    momentum: f64,
    trust_coeff: f64,
) {
    let adapt = kind == ParamKind::Weight;
    let wd = if adapt { weight_decay } else { 0.0 };
    let local = if adapt {
        let wn = norm(w);
        let gn = norm(g);
        if wn > 0.0 && gn > 0.0 {
            trust_coeff * wn / (gn + wd * wn + 1e-12)
        } else {
            1.0
        }
    } else {
        1.0
    };
    for ((wi, gi), bi) in w.iter_mut().zip(g).zip(buf.iter_mut()) {
        *bi = momentum * *bi + local * (gi + wd * *wi);
        *wi -= lr * *bi;
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimConfig,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
    steps: BTreeMap<String, i32>,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(config: OptimConfig) -> Self {
        Self { config, first: BTreeMap::new(), second: BTreeMap::new(), steps: BTreeMap::new() }
    }

    /// Update every parameter that has a gradient. Groups whose gradient is
    /// identically zero are left untouched, state included.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>, lr: f64) {
        let c = self.config;
        for (name, w) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.data().iter().all(|&v| v == 0.0) {
                continue;
            }
            let kind = ParamKind::of(name);
            let n = w.numel();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            match c.kind {
                OptimizerKind::Lars => {
                    lars_update(w.data_mut(), g.data(), m, kind, lr, c.weight_decay, c.momentum, c.trust_coeff)
                }
                OptimizerKind::Adam => {
                    let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    let t = self.steps.entry(name.clone()).or_insert(0);
                    *t += 1;
                    let (bc1, bc2) = (1.0 - ADAM_B1.powi(*t), 1.0 - ADAM_B2.powi(*t));
                    let wd = if kind == ParamKind::Weight { c.weight_decay } else { 0.0 };
                    for (k, wi) in w.data_mut().iter_mut().enumerate() {
                        let gi = g.data()[k];
                        m[k] = ADAM_B1 * m[k] + (1.0 - ADAM_B1) * gi;
                        v[k] = ADAM_B2 * v[k] + (1.0 - ADAM_B2) * gi * gi;
                        let mh = m[k] / bc1;
                        let vh = v[k] / bc2;
                        *wi -= lr * (mh / (vh.sqrt() + ADAM_EPS) + wd * *wi);
                    }
                }
            }
        }
    }
}
