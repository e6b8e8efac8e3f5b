use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use otml_core::gradcheck::{run_gradcheck, COMPOSITE_NAMES};
use otml_core::ot::{exact_ot_oracle, sinkhorn, OtError, SinkhornOptions};
use otml_core::pipeline::{config_digest, gen_phantom_dataset, load_checkpoint};
use otml_core::tensor::OP_NAMES;
use otml_core::trainer::{linear_probe, run_pretraining, store_from_checkpoint};
use otml_core::{Config, ProbeResult, TrainError};

use crate::data::{labeled_set, load_images, load_labeled, write_dataset};
use crate::problem::{parse_problem, render_solution};
use crate::{ConfigArgs, Failure, GenData, Gradcheck, OtSolve, Pretrain, Probe};

type CmdResult = Result<(), Failure>;

fn train_failure(e: TrainError) -> Failure {
    if e.is_numerical() {
        Failure::numerical(e)
    } else {
        Failure::runtime(e)
    }
}

fn apply_args(mut config: Config, args: &ConfigArgs) -> Result<Config, Failure> {
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(Failure::usage)?;
        config.apply_text(&text).map_err(|e| Failure::usage(anyhow!("{}: {e}", path.display())))?;
    }
    for s in &args.set {
        config.apply_override(s).map_err(|e| Failure::usage(anyhow!("--set {s}: {e}")))?;
    }
    Ok(config)
}

fn validated(config: Config) -> Result<Config, Failure> {
    config.validate().map_err(|e| Failure::usage(anyhow!("invalid configuration: {e}")))?;
    Ok(config)
}

pub fn gen_data(a: &GenData) -> CmdResult {
    if a.bits != 8 && a.bits != 16 {
        return Err(Failure::usage(anyhow!("--bits must be 8 or 16, got {}", a.bits)));
    }
    let samples = gen_phantom_dataset(a.n, a.classes, a.size, a.size, a.seed).map_err(Failure::usage)?;
    write_dataset(&a.out, &samples, a.bits).map_err(Failure::runtime)?;
    log::info!("wrote {} images to {}", samples.len(), a.out.display());
    Ok(())
}

fn default_metrics_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.as_os_str().to_owned();
    name.push(".metrics.csv");
    PathBuf::from(name)
}

pub fn pretrain(a: &Pretrain) -> CmdResult {
    let config = validated(apply_args(Config::default(), &a.cfg)?)?;
    let metrics = match &a.metrics {
        Some(p) => p.clone(),
        None if !config.train.metrics.is_empty() => PathBuf::from(&config.train.metrics),
        None => default_metrics_path(&a.out),
    };
    let images = load_images(&a.data).map_err(Failure::runtime)?;
    log::info!("pretraining on {} images for {} steps", images.len(), config.train.steps);
    let (_, summary) = run_pretraining(config, &images, &a.out, &metrics).map_err(train_failure)?;
    if let Some(last) = summary.last {
        log::info!("finished step {}: total loss {:.6}", summary.steps, last.loss.total);
    }
    log::info!("checkpoint {} metrics {}", a.out.display(), metrics.display());
    Ok(())
}

pub fn probe(a: &Probe) -> CmdResult {
    let expected = match &a.cfg.config {
        Some(_) => Some(config_digest(&apply_args(Config::default(), &ConfigArgs { config: a.cfg.config.clone(), set: vec![] })?.render())),
        None => None,
    };
    let loaded = load_checkpoint(&a.ckpt, expected).map_err(Failure::runtime)?;
    let stored = Config::parse(&loaded.checkpoint.config)
        .map_err(|e| Failure::runtime(anyhow!("{}: stored configuration: {e}", a.ckpt.display())))?;
    // The encoder is fixed by the checkpoint; only the probe settings come from the caller.
    let mut config = stored.clone();
    if a.cfg.config.is_some() || !a.cfg.set.is_empty() {
        config.probe = apply_args(Config::default(), &a.cfg)?.probe;
    }
    if let Some(p) = &a.protocol {
        config.probe.protocol = p.parse().map_err(|e: String| Failure::usage(anyhow!(e)))?;
    }
    if let Some(f) = a.fraction {
        config.probe.fraction = f;
    }
    let config = validated(config)?;
    let store = store_from_checkpoint(&loaded.checkpoint).map_err(train_failure)?;

    let (train_images, train_labels) = load_labeled(&a.data).map_err(Failure::runtime)?;
    let test = match &a.test {
        Some(dir) => Some(load_labeled(dir).map_err(Failure::runtime)?),
        None => None,
    };
    let k = train_labels.iter().chain(test.iter().flat_map(|t| t.1.iter())).max().map_or(0, |m| m + 1);
    if k < 2 {
        return Err(Failure::runtime(anyhow!("probe needs at least two classes")));
    }
    let train = labeled_set(&train_images, train_labels, k).map_err(Failure::runtime)?;
    let (train, test) = match test {
        Some((images, labels)) => (train, labeled_set(&images, labels, k).map_err(Failure::runtime)?),
        None => train.split(config.probe.holdout, config.probe.seed).map_err(train_failure)?,
    };
    let result = linear_probe(&store, &config.model, &train, &test, &config.probe).map_err(train_failure)?;
    if a.header {
        println!("{}", ProbeResult::CSV_HEADER);
    }
    println!("{}", result.csv());
    Ok(())
}

pub fn ot_solve(a: &OtSolve) -> CmdResult {
    let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display())).map_err(Failure::runtime)?;
    let mut problem = parse_problem(&text).with_context(|| format!("{}", a.input.display())).map_err(Failure::runtime)?;
    if let Some(eps) = a.epsilon {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Failure::usage(anyhow!("--epsilon must be positive, got {eps}")));
        }
        problem.epsilon = eps;
    }
    let plan = if a.oracle {
        exact_ot_oracle(&problem.cost, &problem.mu, &problem.nu)
    } else {
        let opts = SinkhornOptions { max_iters: a.max_iters, ..SinkhornOptions::converged(a.tol) };
        sinkhorn(&problem, &opts)
    };
    let plan = plan.map_err(|e| match e {
        OtError::NotConverged { .. } => Failure::numerical(e),
        e => Failure::runtime(e),
    })?;
    print!("{}", render_solution(&plan));
    Ok(())
}

pub fn gradcheck(a: &Gradcheck) -> CmdResult {
    let fault = match &a.fault {
        Some(name) => Some(
            OP_NAMES
                .iter()
                .chain(COMPOSITE_NAMES)
                .copied()
                .find(|n| n == name)
                .ok_or_else(|| Failure::usage(anyhow!("unknown op `{name}`")))?,
        ),
        None => None,
    };
    let report = run_gradcheck(a.seed, fault).map_err(|e| if e.is_numerical() { Failure::numerical(e) } else { Failure::runtime(e) })?;
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::numerical(anyhow!("gradient check failed")))
    }
}
