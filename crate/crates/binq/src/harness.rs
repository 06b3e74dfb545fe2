//! Experiment harness: configuration, the training loop behind `train`, and
//! the `analyze`/`report-mem`/`sweep`/`gap-audit` entry points.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_cifar_bin, load_idx, synthetic_blobs, BatchIterator, Dataset};
use crate::decomposition::{analyze_pair, DecompositionVerdict};
use crate::error::{Error, Result};
use crate::nn::{
    export_model, load_checkpoint, report_memory, save_checkpoint, LayerKind, MemoryReport, Model,
    PackedModel, TaskMode,
};
use crate::optim::{
    gap_audit, pcpp_step, quadratic_problem, run_quadratic_sgd, EtaRule, GapReport, MuRule,
    RegKind, Schedule, TrainerState,
};
use crate::quantizers::{sign_q, ProximalQuantizer, QuantizerPair};
use crate::tensor::Tensor;

/// All algorithm names the harness accepts.
pub const ALGORITHMS: &[&str] = &[
    "fp", "bc", "pc", "bnn", "bnn+", "bnn++", "pq", "rpc", "bireal", "rbnn", "poly+", "ede",
    "ede+", "react",
];

/// Algorithms whose forward quantizer is exactly ±1-valued; only these keep
/// accumulators integral, so only they may run BWAA.
const SIGN_FORWARD: &[&str] = &["bc", "bnn", "bnn+", "bireal", "rbnn", "ede", "react"];

impl FromStr for TaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bw" => Ok(TaskMode::Bw),
            "bwa" => Ok(TaskMode::Bwa),
            "bwaa" => Ok(TaskMode::Bwaa),
            other => Err(Error::Config(format!("unknown task mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Seeded Gaussian blobs; train uses `seed`, test `seed + 1`.
    Blobs {
        n: usize,
        classes: usize,
        dim: usize,
        #[serde(default = "default_test_n")]
        test_n: usize,
    },
    /// IDX-format MNIST directory; `limit` (0 = all) truncates both splits.
    Mnist {
        dir: PathBuf,
        #[serde(default)]
        limit: usize,
    },
    Cifar {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        coarse: bool,
    },
}

fn default_test_n() -> usize {
    500
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelSpec {
    Mlp {
        input: usize,
        hidden: Vec<usize>,
        classes: usize,
        #[serde(default = "default_true")]
        fp_edges: bool,
    },
    Cnn {
        #[serde(default = "default_one")]
        in_ch: usize,
        #[serde(default = "default_c")]
        c1: usize,
        #[serde(default = "default_c")]
        c2: usize,
        #[serde(default = "default_hidden")]
        hidden: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_true")]
        fp_edges: bool,
        /// `[mean, std]` standardization folded into the first layer.
        #[serde(default)]
        norm: Option<[f64; 2]>,
        /// Flattened size after the conv stack; depends on the input
        /// resolution, so it is spelled out rather than inferred.
        #[serde(default = "default_flat")]
        flat: usize,
    },
}

fn default_true() -> bool {
    true
}
fn default_one() -> usize {
    1
}
fn default_c() -> usize {
    8
}
fn default_hidden() -> usize {
    64
}
fn default_classes() -> usize {
    10
}
fn default_flat() -> usize {
    72
}

impl ModelSpec {
    pub fn layers(&self) -> Vec<LayerKind> {
        match self {
            ModelSpec::Mlp { input, hidden, classes, .. } => {
                let mut specs = vec![LayerKind::Flatten];
                let mut prev = *input;
                for &h in hidden {
                    specs.push(LayerKind::Linear { inp: prev, out: h });
                    specs.push(LayerKind::Relu);
                    prev = h;
                }
                specs.push(LayerKind::Linear { inp: prev, out: *classes });
                specs
            }
            ModelSpec::Cnn { in_ch, c1, c2, hidden, classes, norm, flat, .. } => {
                let mut specs = Vec::new();
                if let Some([mean, std]) = norm {
                    specs.push(LayerKind::Norm { mean: *mean, std: *std });
                }
                specs.extend([
                    LayerKind::Conv2d { cin: *in_ch, cout: *c1, k: 3, stride: 2, padding: 1 },
                    LayerKind::Relu,
                    LayerKind::Conv2d { cin: *c1, cout: *c2, k: 3, stride: 2, padding: 1 },
                    LayerKind::Relu,
                    LayerKind::Pool,
                    LayerKind::Flatten,
                    LayerKind::Linear { inp: *flat, out: *hidden },
                    LayerKind::Relu,
                    LayerKind::Linear { inp: *hidden, out: *classes },
                ]);
                specs
            }
        }
    }

    pub fn fp_edges(&self) -> bool {
        match self {
            ModelSpec::Mlp { fp_edges, .. } | ModelSpec::Cnn { fp_edges, .. } => *fp_edges,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub eta0: f64,
    /// `constant | cosine | step`.
    pub eta_rule: String,
    pub drop_every: usize,
    pub factor: f64,
    /// `auto | pair | constant | linear | accumulate`.
    pub mu_rule: String,
    pub mu0: f64,
    pub mu_end: f64,
    pub rho0: f64,
    pub rho_end: f64,
    pub momentum: f64,
    /// Per-layer ℓ₂ clip on the update direction; 0 disables. BWAA runs
    /// default to 10 when left at 0.
    pub grad_clip: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            eta0: 0.1,
            eta_rule: "constant".into(),
            drop_every: 0,
            factor: 0.1,
            mu_rule: "auto".into(),
            mu0: 5.0,
            mu_end: 30.0,
            rho0: 0.01,
            rho_end: 10.0,
            momentum: 0.0,
            grad_clip: 0.0,
        }
    }
}

impl ScheduleSpec {
    pub fn to_schedule(&self, algorithm: &str, total_steps: usize) -> Result<Schedule> {
        let eta = match self.eta_rule.as_str() {
            "constant" => EtaRule::Constant(self.eta0),
            "cosine" => EtaRule::Cosine { eta0: self.eta0 },
            "step" => EtaRule::StepDecay {
                eta0: self.eta0,
                drop_every: self.drop_every.max(1),
                factor: self.factor,
            },
            other => return Err(Error::Config(format!("unknown eta rule '{other}'"))),
        };
        let mu = match self.mu_rule.as_str() {
            // sharpness ramps for the smooth pairs, otherwise leave the
            // pair's μ alone
            "auto" => match algorithm {
                "bnn+" | "bnn++" | "poly+" => MuRule::Linear { mu0: self.mu0, mu_end: self.mu_end },
                _ => MuRule::PairDefault,
            },
            "pair" => MuRule::PairDefault,
            "constant" => MuRule::Constant(self.mu0),
            "linear" => MuRule::Linear { mu0: self.mu0, mu_end: self.mu_end },
            "accumulate" => MuRule::Accumulate,
            other => return Err(Error::Config(format!("unknown mu rule '{other}'"))),
        };
        // ρ ramp hardens the piecewise-linear quantizer for PC and the
        // proximal baselines alike
        let rho =
            matches!(algorithm, "pc" | "pq" | "rpc").then_some((self.rho0, self.rho_end));
        Ok(Schedule { eta, mu, rho, total_steps })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PipelineSpec {
    EndToEnd,
    FineTune { checkpoint: PathBuf },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub algorithm: String,
    /// Swap in a different quantizer pair while keeping the algorithm's
    /// update rule; mainly for equivalence checks.
    pub pair_override: Option<String>,
    pub task_mode: TaskMode,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch: usize,
    pub out: PathBuf,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub schedule: ScheduleSpec,
    pub pipeline: PipelineSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            algorithm: "bc".into(),
            pair_override: None,
            task_mode: TaskMode::Bw,
            seed: 0,
            epochs: 5,
            batch_size: 64,
            eval_batch: 500,
            out: PathBuf::from("runs/experiment"),
            dataset: DatasetSpec::Blobs { n: 2000, classes: 4, dim: 16, test_n: 500 },
            model: ModelSpec::Mlp { input: 16, hidden: vec![32, 32], classes: 4, fp_edges: true },
            schedule: ScheduleSpec::default(),
            pipeline: PipelineSpec::EndToEnd,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Validate algorithm/mode/pipeline combinations before any compute.
    pub fn validate(&self) -> Result<()> {
        if !ALGORITHMS.contains(&self.algorithm.as_str()) {
            return Err(Error::Config(format!(
                "unknown algorithm '{}'; expected one of {}",
                self.algorithm,
                ALGORITHMS.join(", ")
            )));
        }
        if self.task_mode == TaskMode::Bwaa && !SIGN_FORWARD.contains(&self.algorithm.as_str()) {
            return Err(Error::Config(format!(
                "BWAA needs a ±1-valued forward quantizer; '{}' is not sign-valued",
                self.algorithm
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.schedule.eta0 <= 0.0 {
            return Err(Error::Config("eta0 must be positive".into()));
        }
        if let PipelineSpec::FineTune { checkpoint } = &self.pipeline {
            if !checkpoint.exists() {
                return Err(Error::Config(format!(
                    "fine-tune checkpoint {} does not exist",
                    checkpoint.display()
                )));
            }
        }
        Ok(())
    }

    fn echo(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

fn truncate(mut ds: Dataset, limit: usize) -> Dataset {
    if limit == 0 || limit >= ds.len() {
        return ds;
    }
    let idx: Vec<usize> = (0..limit).collect();
    let (images, labels) = ds.gather(&idx);
    ds.images = images;
    ds.labels = labels;
    ds
}

pub fn load_datasets(spec: &DatasetSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    match spec {
        DatasetSpec::Blobs { n, classes, dim, test_n } => Ok((
            synthetic_blobs(*n, *classes, *dim, seed),
            synthetic_blobs(*test_n, *classes, *dim, seed + 1),
        )),
        DatasetSpec::Mnist { dir, limit } => {
            let train = load_idx(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
            )?;
            let test = load_idx(
                &dir.join("t10k-images-idx3-ubyte"),
                &dir.join("t10k-labels-idx1-ubyte"),
            )?;
            Ok((truncate(train, *limit), truncate(test, *limit)))
        }
        DatasetSpec::Cifar { train, test, coarse } => {
            Ok((load_cifar_bin(train, *coarse)?, load_cifar_bin(test, *coarse)?))
        }
    }
}

/// One metrics.csv row; emitted per epoch plus a final post-export row.
#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub mean_abs_w: f64,
    pub frac_binary: f64,
    pub overflow_rate: f64,
    pub mu: f64,
    pub rho: f64,
    pub wall_ms: u128,
}

pub const METRICS_HEADER: &str =
    "epoch,step,train_loss,train_acc,test_acc,mean_abs_w,frac_binary,overflow_rate,mu,rho,wall_ms";

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut text = String::from("# schema=1\n");
    text.push_str(METRICS_HEADER);
    text.push('\n');
    for r in rows {
        writeln!(
            text,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.step,
            r.train_loss,
            r.train_acc,
            r.test_acc,
            r.mean_abs_w,
            r.frac_binary,
            r.overflow_rate,
            r.mu,
            r.rho,
            r.wall_ms
        )
        .unwrap();
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub struct RunSummary {
    pub final_test_acc: f64,
    pub epochs_run: usize,
    pub max_overflow: f64,
    pub out: PathBuf,
}

enum Family {
    /// PC++-style: quantization lives inside the network graph, the
    /// optimizer applies plain (momentum/clipped) SGD to `w*`.
    ForwardBackward,
    Pq,
    Rpc,
}

fn family(algorithm: &str) -> Family {
    match algorithm {
        "pq" => Family::Pq,
        "rpc" => Family::Rpc,
        _ => Family::ForwardBackward,
    }
}

/// The quantizer pair in effect at optimizer step `t`.
fn pair_at(base: &QuantizerPair, algorithm: &str, state: &TrainerState) -> QuantizerPair {
    let mut pair = base.clone();
    if algorithm == "pc" {
        if let Some(rho) = state.schedule.rho_at(state.t) {
            // the PC pair's scalar parameter is ρ
            pair.set_mu(rho);
        }
    } else if let Some(mu) = state.current_mu() {
        pair.set_mu(mu);
    }
    pair
}

fn weight_param_indices(model: &Model) -> Vec<usize> {
    model
        .param_names()
        .iter()
        .enumerate()
        .filter(|(_, n)| n.ends_with(".weight"))
        .map(|(i, _)| i)
        .collect()
}

fn mean_abs_weights(model: &Model, params: &[Tensor]) -> f64 {
    let idx = weight_param_indices(model);
    let (mut sum, mut n) = (0.0, 0usize);
    for i in idx {
        sum += params[i].data().iter().map(|v| v.abs()).sum::<f64>();
        n += params[i].numel();
    }
    if n == 0 { 0.0 } else { sum / n as f64 }
}

/// Fraction of binarized-layer weight entries mapped exactly onto ±1 by `q`.
fn fraction_binary(model: &Model, params: &[Tensor], q: impl Fn(f64) -> f64) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for (i, p) in params.iter().enumerate() {
        if model.param_is_binarized(i) {
            hit += p.data().iter().filter(|&&v| q(v).abs() == 1.0).count();
            n += p.numel();
        }
    }
    if n == 0 { 0.0 } else { hit as f64 / n as f64 }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("config.toml"), cfg.echo()?)?;

    let (train, test) = load_datasets(&cfg.dataset, cfg.seed)?;
    let model = Model::build(&cfg.model.layers(), cfg.task_mode, cfg.model.fp_edges())?;
    let mut params = model.init_params(cfg.seed);
    if let PipelineSpec::FineTune { checkpoint } = &cfg.pipeline {
        let loaded = load_checkpoint(checkpoint)?;
        let names = model.param_names();
        for (name, tensor) in loaded {
            let Some(i) = names.iter().position(|n| *n == name) else {
                return Err(Error::Config(format!("checkpoint layer '{name}' not in model")));
            };
            if tensor.shape() != params[i].shape() {
                return Err(Error::Config(format!(
                    "checkpoint layer '{name}' shape {:?} != model shape {:?}",
                    tensor.shape(),
                    params[i].shape()
                )));
            }
            params[i] = tensor;
        }
    }

    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let schedule = cfg.schedule.to_schedule(&cfg.algorithm, total_steps)?;
    let mut state = TrainerState::new(params, schedule);
    if cfg.schedule.momentum > 0.0 {
        state.momentum = Some(cfg.schedule.momentum);
    }
    state.grad_clip = if cfg.schedule.grad_clip > 0.0 {
        Some(cfg.schedule.grad_clip)
    } else if cfg.task_mode == TaskMode::Bwaa {
        Some(10.0)
    } else {
        None
    };

    let pair_name = cfg.pair_override.as_deref().unwrap_or(&cfg.algorithm);
    let base_pair = QuantizerPair::by_name(pair_name).ok();
    let fam = family(&cfg.algorithm);
    let fp_pair = QuantizerPair::full_precision();
    // STE sign quantizer on activations for BWA/BWAA
    let act_pair = match cfg.task_mode {
        TaskMode::Bw => QuantizerPair::full_precision(),
        TaskMode::Bwa | TaskMode::Bwaa => QuantizerPair::bnn(),
    };
    // proximal baselines and the FP reference see no in-graph weight
    // quantization (the in-graph path would still apply the s_n scaling)
    let plain_model = {
        let mut m = model.clone();
        for l in &mut m.layers {
            l.quantize_weights = false;
        }
        m
    };
    let net: &Model = if matches!(fam, Family::Pq | Family::Rpc) || cfg.algorithm == "fp" {
        &plain_model
    } else {
        &model
    };
    // the proximal quantizer driving pq/rpc, hardening with the ρ ramp
    let prox_at = |state: &TrainerState| ProximalQuantizer::Linear {
        rho: state.schedule.rho_at(state.t).unwrap_or(1.0),
        vrho: 0.0,
    };
    // prox applies to the binarizable tensors only; edge layers and biases
    // stay continuous
    let prox_params = |state: &TrainerState, prox: &ProximalQuantizer| -> Vec<Tensor> {
        state
            .w_star
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if model.param_is_binarized(i) {
                    t.map(|v| prox.evaluate(v))
                } else {
                    t.clone()
                }
            })
            .collect()
    };

    let metrics_path = cfg.out.join("metrics.csv");
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut iter = BatchIterator::new(&train, cfg.batch_size, cfg.seed);
    let mut max_overflow = 0.0f64;

    let mut run_epochs = |state: &mut TrainerState,
                          rows: &mut Vec<MetricsRow>|
     -> Result<f64> {
        let mut final_acc = 0.0;
        for epoch in 0..cfg.epochs {
            let start = Instant::now();
            let (mut loss_sum, mut acc_sum, mut overflow_epoch, mut nb) = (0.0, 0.0, 0.0f64, 0);
            for batch in iter.next_epoch() {
                let (x, labels) = train.gather(&batch);
                let result = match fam {
                    Family::ForwardBackward => {
                        let pair = pair_at(base_pair.as_ref().unwrap(), &cfg.algorithm, state);
                        let res =
                            net.loss_and_grads(x, &labels, &state.w_star, &pair, &act_pair)?;
                        if !res.loss.is_finite() {
                            return Err(Error::Divergence { step: state.t });
                        }
                        let mut g = Some(res.grads.clone());
                        pcpp_step(state, &fp_pair, |_| g.take().unwrap())?;
                        res
                    }
                    Family::Pq | Family::Rpc => {
                        let prox = prox_at(state);
                        let quant = prox_params(state, &prox);
                        let eval_at: Vec<Tensor> = match fam {
                            Family::Pq => quant.clone(),
                            _ => state.w_star.clone(),
                        };
                        let res =
                            net.loss_and_grads(x, &labels, &eval_at, &fp_pair, &act_pair)?;
                        if !res.loss.is_finite() {
                            return Err(Error::Divergence { step: state.t });
                        }
                        state.check_finite(&res.grads)?;
                        let eta = state.schedule.eta_at(state.t);
                        state.w = quant.clone();
                        state.w_star = quant;
                        state.apply(eta, res.grads.clone());
                        state.advance(eta);
                        res
                    }
                };
                loss_sum += result.loss;
                acc_sum += result.accuracy;
                let batch_overflow = result
                    .stats
                    .overflow
                    .iter()
                    .map(|(_, r)| *r)
                    .fold(0.0f64, f64::max);
                overflow_epoch = overflow_epoch.max(batch_overflow);
                nb += 1;
            }
            max_overflow = max_overflow.max(overflow_epoch);

            let (test_acc, frac) = match fam {
                Family::ForwardBackward => {
                    let pair = pair_at(base_pair.as_ref().unwrap(), &cfg.algorithm, state);
                    let acc =
                        net.evaluate(&test, &state.w_star, &pair, &act_pair, cfg.eval_batch)?;
                    let f = fraction_binary(&model, &state.w_star, |v| pair.forward(v));
                    (acc, f)
                }
                Family::Pq | Family::Rpc => {
                    let prox = prox_at(state);
                    let quant = prox_params(state, &prox);
                    let acc = net.evaluate(&test, &quant, &fp_pair, &act_pair, cfg.eval_batch)?;
                    let f = fraction_binary(&model, &state.w_star, |v| prox.evaluate(v));
                    (acc, f)
                }
            };
            final_acc = test_acc;
            rows.push(MetricsRow {
                epoch,
                step: state.t,
                train_loss: loss_sum / nb.max(1) as f64,
                train_acc: acc_sum / nb.max(1) as f64,
                test_acc,
                mean_abs_w: mean_abs_weights(&model, &state.w_star),
                frac_binary: frac,
                overflow_rate: overflow_epoch,
                mu: state.current_mu().unwrap_or(base_pair.as_ref().map_or(1.0, |p| p.mu)),
                rho: state.schedule.rho_at(state.t).unwrap_or(0.0),
                wall_ms: start.elapsed().as_millis(),
            });
        }
        Ok(final_acc)
    };

    let outcome = run_epochs(&mut state, &mut rows);
    // always flush what we have: on divergence the last good epoch stays
    // recorded
    write_metrics(&metrics_path, &rows)?;
    let final_test_acc = outcome?;

    // export: binarized layers hard-signed and packed, full w* as FP
    // checkpoint for later fine-tunes
    let (packed, _fp_rest) = export_model(&model, &state.w_star);
    packed.save(&cfg.out.join("model.bqw"))?;
    let named: Vec<(String, Tensor)> = model
        .param_names()
        .into_iter()
        .zip(state.w_star.iter().cloned())
        .collect();
    save_checkpoint(&cfg.out.join("model.ckpt"), &named)?;

    let last = rows.last().cloned();
    if let Some(last) = last {
        rows.push(MetricsRow {
            epoch: cfg.epochs,
            step: state.t,
            frac_binary: fraction_binary(&model, &state.w_star, sign_q),
            wall_ms: 0,
            ..last
        });
        write_metrics(&metrics_path, &rows)?;
    }

    Ok(RunSummary {
        final_test_acc,
        epochs_run: cfg.epochs,
        max_overflow,
        out: cfg.out.clone(),
    })
}

/// Resolve a pair name, run the decomposition analyzer, and optionally dump
/// the P curve as `w,P,F,B` CSV.
pub fn analyze_named_pair(
    name: &str,
    grid: usize,
    tol: f64,
    out: Option<&Path>,
) -> Result<DecompositionVerdict> {
    let pair = QuantizerPair::by_name(name)?;
    let verdict = analyze_pair(&pair, grid.max(1001), tol);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let mut text = String::from("w,P,F,B\n");
        let c = &verdict.curve;
        for i in 0..c.grid.len() {
            writeln!(text, "{},{},{},{}", c.grid[i], c.p[i], c.f[i], c.b[i]).unwrap();
        }
        std::fs::write(dir.join(format!("{}_p_curve.csv", name.replace('+', "plus"))), text)?;
    }
    Ok(verdict)
}

/// Memory table for a packed model, plus FP layers read from a checkpoint
/// manifest when given.
pub fn report_memory_files(bqw: &Path, ckpt: Option<&Path>) -> Result<MemoryReport> {
    let packed = PackedModel::load(bqw)?;
    let fp_layers = match ckpt {
        Some(path) => {
            #[derive(Deserialize)]
            struct Entry {
                name: String,
                shape: Vec<usize>,
            }
            let entries: Vec<Entry> =
                serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)
                    .map_err(|e| Error::Format(e.to_string()))?;
            entries
                .into_iter()
                .filter(|e| !packed.layers.iter().any(|(n, _)| *n == e.name))
                .map(|e| (e.name, e.shape))
                .collect()
        }
        None => Vec::new(),
    };
    report_memory(&packed, &fp_layers)
}

/// Run each config through [`run_experiment`] on a small worker pool.
pub fn sweep(configs: &[PathBuf], jobs: usize) -> Vec<(PathBuf, Result<RunSummary>)> {
    let queue: Mutex<Vec<PathBuf>> = Mutex::new(configs.to_vec());
    let results: Mutex<Vec<(PathBuf, Result<RunSummary>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1) {
            scope.spawn(|| loop {
                let Some(path) = queue.lock().unwrap().pop() else { break };
                let outcome = ExperimentConfig::from_toml_path(&path)
                    .and_then(|cfg| run_experiment(&cfg));
                results.lock().unwrap().push((path, outcome));
            });
        }
    });
    let mut out = results.into_inner().unwrap();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

pub struct WindowSlack {
    pub s: usize,
    pub t: usize,
    pub slack: f64,
    pub pcc3_slack: f64,
}

pub struct GapAuditOutcome {
    pub windows: Vec<WindowSlack>,
    pub min_slack: f64,
    pub min_pcc3: f64,
}

/// Synthesize an SGD trajectory on a seeded convex quadratic and audit the
/// telescoped regret bound over random windows.
pub fn gap_audit_quadratic(
    dim: usize,
    steps: usize,
    eta: f64,
    seed: u64,
    windows: usize,
) -> GapAuditOutcome {
    let schedule = Schedule::constant(eta, steps);
    let traj = run_quadratic_sgd(dim, steps, schedule, seed);
    let (a, b) = quadratic_problem(dim, seed);
    let (la, lb) = (a.clone(), b.clone());
    let loss = move |w: &[f64]| -> f64 {
        w.iter().zip(&la).zip(&lb).map(|((w, a), b)| 0.5 * a * (w - b) * (w - b)).sum()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut out =
        GapAuditOutcome { windows: Vec::new(), min_slack: f64::INFINITY, min_pcc3: f64::INFINITY };
    for _ in 0..windows {
        let s = rng.gen_range(0..steps - 1);
        let t = rng.gen_range(s..steps - 1);
        let report: GapReport = gap_audit(&traj, s, t, &b, RegKind::Zero, Some(&loss));
        let pcc3 = report.pcc3_slack.unwrap_or(f64::INFINITY);
        out.min_slack = out.min_slack.min(report.slack);
        out.min_pcc3 = out.min_pcc3.min(pcc3);
        out.windows.push(WindowSlack { s, t, slack: report.slack, pcc3_slack: pcc3 });
    }
    out
}

/// Stream a report to any writer; kept separate from computation for tests.
pub fn print_memory_report(report: &MemoryReport, mut w: impl std::io::Write) -> Result<()> {
    writeln!(w, "{:<24} {:>12} {:>12}", "layer", "fp_bytes", "stored")?;
    for row in &report.rows {
        writeln!(w, "{:<24} {:>12} {:>12}", row.name, row.fp_bytes, row.stored_bytes)?;
    }
    writeln!(w, "compression ratio: {:.2}x", report.ratio)?;
    Ok(())
}
