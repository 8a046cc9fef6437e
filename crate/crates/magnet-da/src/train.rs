//! Deterministic training loop, evaluation, and experiment runner.
//!
//! Each iteration draws one labeled source batch and one unlabeled target
//! batch, forwards their concatenation through the network in train mode
//! (shared parameters, shared batch-norm statistics), computes the combined
//! objective over every tap, backpropagates, and applies a Nesterov-momentum
//! step under an annealed learning rate. Everything is a pure function of the
//! seed: batch order, initialization and arithmetic order are all fixed.
//!
//! A single run is single-threaded; [`run_experiment`] farms independent
//! (task, method, seed) runs out to worker threads, which cannot change any
//! reported number.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Instant;

use crate::autodiff::{Mode, ParamSet, Tape, Var};
use crate::data::{Dataset, DomainPair};
use crate::error::{MagnetError, Result};
use crate::losses::{total_loss, KernelSpec, LossReport};
use crate::network::{ForwardOutput, MagnetModel, NetworkConfig};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

const SOURCE_SAMPLER_SALT: u64 = 0x5243;
const TARGET_SAMPLER_SALT: u64 = 0x5447;
const EVAL_CHUNK: usize = 64;

/// Which MMD taps participate in the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TapMode {
    All,
    FinalOnly,
}

/// Training hyperparameters.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub anneal_alpha: f64,
    pub anneal_beta: f64,
    pub iterations: usize,
    /// Per-domain batch size; the combined train-mode batch is twice this.
    pub batch_size: usize,
    pub lambda_mmd: f64,
    pub gamma_entropy: f64,
    pub seed: u64,
    pub repetitions: usize,
    pub kernel: KernelSpec,
    pub weight_decay: f64,
    pub tap_mode: TapMode,
    /// Record a loss report every this many iterations (first and last are
    /// always recorded).
    pub log_stride: usize,
    /// Evaluate target accuracy every this many iterations; 0 picks
    /// `max(1, iterations / 5)`.
    pub eval_stride: usize,
    /// Forward-only batches run before each evaluation to settle the
    /// batch-norm running statistics under the current weights.
    pub stat_refresh_batches: usize,
    /// Scale the MMD and entropy weights by `2 / (1 + exp(-10 p)) - 1` over
    /// training progress `p`, so early iterations are dominated by the
    /// supervised source loss. Off by default.
    pub adaptation_ramp: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.003,
            momentum: 0.9,
            anneal_alpha: 10.0,
            anneal_beta: 0.75,
            iterations: 2000,
            batch_size: 32,
            lambda_mmd: 1.0,
            gamma_entropy: 1.0,
            seed: 0,
            repetitions: 5,
            kernel: KernelSpec::MedianHeuristic,
            weight_decay: 5e-4,
            tap_mode: TapMode::All,
            log_stride: 1,
            eval_stride: 0,
            stat_refresh_batches: 64,
            adaptation_ramp: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(MagnetError::Config(format!(
                "base_lr must be > 0, got {}",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(MagnetError::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.iterations < 1 || self.batch_size < 1 || self.repetitions < 1 {
            return Err(MagnetError::Config(
                "iterations, batch_size and repetitions must be >= 1".into(),
            ));
        }
        if self.lambda_mmd < 0.0 || self.gamma_entropy < 0.0 || self.weight_decay < 0.0 {
            return Err(MagnetError::Config(
                "lambda_mmd, gamma_entropy and weight_decay must be >= 0".into(),
            ));
        }
        if self.log_stride < 1 {
            return Err(MagnetError::Config("log_stride must be >= 1".into()));
        }
        Ok(())
    }

    fn effective_eval_stride(&self) -> usize {
        if self.eval_stride > 0 {
            self.eval_stride
        } else {
            (self.iterations / 5).max(1)
        }
    }
}

/// Method variants for experiments and ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Full objective over all taps.
    Magnet,
    /// Supervised source training only (`lambda = gamma = 0`); target data
    /// is never touched.
    SourceOnly,
    /// MMD without the entropy term.
    NoEntropy,
    /// Entropy without the MMD term.
    NoMmd,
    /// Full objective, but only the final (classifier) tap.
    SingleTap,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Magnet,
        Method::SourceOnly,
        Method::NoEntropy,
        Method::NoMmd,
        Method::SingleTap,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Method::Magnet => "magnet",
            Method::SourceOnly => "source-only",
            Method::NoEntropy => "no-entropy",
            Method::NoMmd => "no-mmd",
            Method::SingleTap => "single-tap",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "magnet" => Ok(Method::Magnet),
            "source-only" => Ok(Method::SourceOnly),
            "no-entropy" => Ok(Method::NoEntropy),
            "no-mmd" => Ok(Method::NoMmd),
            "single-tap" => Ok(Method::SingleTap),
            other => Err(MagnetError::Parameter(format!(
                "unknown method {other:?} (expected one of magnet, source-only, \
                 no-entropy, no-mmd, single-tap)"
            ))),
        }
    }

    /// Specialize a base config to this variant.
    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        let mut out = cfg.clone();
        match self {
            Method::Magnet => {}
            Method::SourceOnly => {
                out.lambda_mmd = 0.0;
                out.gamma_entropy = 0.0;
            }
            Method::NoEntropy => out.gamma_entropy = 0.0,
            Method::NoMmd => out.lambda_mmd = 0.0,
            Method::SingleTap => out.tap_mode = TapMode::FinalOnly,
        }
        out
    }
}

/// Annealed learning rate: `base / (1 + alpha * p)^beta` for progress
/// `p = iter / iterations` in `[0, 1]`.
pub fn lr_schedule(base_lr: f64, progress: f64, alpha: f64, beta: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&progress));
    base_lr / (1.0 + alpha * progress).powf(beta)
}

/// Adaptation-weight ramp, 0 at the start of training and saturating at 1.
pub fn adaptation_ramp(progress: f64) -> f64 {
    2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0
}

/// Per-parameter velocity state for Nesterov momentum.
pub struct Velocity {
    v: Vec<Vec<f64>>,
}

impl Velocity {
    pub fn new(params: &ParamSet) -> Self {
        Velocity {
            v: params
                .iter()
                .map(|(_, p)| vec![0.0; p.value.numel()])
                .collect(),
        }
    }
}

/// One Nesterov-momentum update:
///
/// ```text
/// g' = grad + weight_decay * p
/// v  = momentum * v - lr * g'
/// p  = p + momentum * v - lr * g'
/// ```
///
/// with `lr` scaled by each parameter's `lr_multiplier`.
pub fn nesterov_step(
    params: &mut ParamSet,
    velocity: &mut Velocity,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if velocity.v.len() != params.len() {
        return Err(MagnetError::Contract(format!(
            "velocity tracks {} parameters, set has {}",
            velocity.v.len(),
            params.len()
        )));
    }
    for ((_, p), v) in params.iter_mut().zip(velocity.v.iter_mut()) {
        let lr_eff = lr * p.lr_multiplier;
        let grad = p.grad.data();
        debug_assert_eq!(grad.len(), v.len());
        // Split borrows: read grad, write value.
        let n = v.len();
        for i in 0..n {
            let g = p.grad.data()[i] + weight_decay * p.value.data()[i];
            v[i] = momentum * v[i] - lr_eff * g;
            let step = momentum * v[i] - lr_eff * g;
            p.value.data_mut()[i] += step;
        }
    }
    Ok(())
}

/// Split every MMD site into its (source, target) feature pair.
///
/// Transition taps compare the two halves of the shared trunk feature; the
/// end-of-network site compares the globally pooled features right before
/// the classifiers. `TapMode::FinalOnly` keeps only the end site.
pub fn assemble_tap_pairs(
    tape: &mut Tape,
    out: &ForwardOutput,
    n_source: usize,
    n_target: usize,
    tap_mode: TapMode,
) -> Result<Vec<(Var, Var)>> {
    let mut pairs = Vec::with_capacity(out.transition_taps.len() + 1);
    if tap_mode == TapMode::All {
        for &tap in &out.transition_taps {
            let zs = tape.slice_rows(tap, 0, n_source)?;
            let zt = tape.slice_rows(tap, n_source, n_target)?;
            pairs.push((zs, zt));
        }
    }
    let zs = tape.slice_rows(out.pooled, 0, n_source)?;
    let zt = tape.slice_rows(out.pooled, n_source, n_target)?;
    pairs.push((zs, zt));
    Ok(pairs)
}

/// Loss trace entry.
#[derive(Clone, Debug)]
pub struct IterationLog {
    pub iteration: usize,
    pub lr: f64,
    pub report: LossReport,
}

/// Outcome of one training run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub logs: Vec<IterationLog>,
    pub final_target_acc: f64,
    pub best_target_acc: f64,
    pub source_acc: f64,
    pub seed: u64,
    pub wall_s: f64,
    pub config: TrainConfig,
}

struct EpochSampler {
    indices: Vec<usize>,
    cursor: usize,
    rng: SplitMix64,
}

impl EpochSampler {
    fn new(n: usize, seed: u64, salt: u64) -> Self {
        let mut rng = SplitMix64::stream(seed, salt);
        let mut indices: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut indices);
        EpochSampler {
            indices,
            cursor: 0,
            rng,
        }
    }

    fn next_batch(&mut self, batch: usize) -> &[usize] {
        if self.cursor + batch > self.indices.len() {
            self.rng.shuffle(&mut self.indices);
            self.cursor = 0;
        }
        let out = &self.indices[self.cursor..self.cursor + batch];
        self.cursor += batch;
        out
    }
}

fn gather_batch(ds: &Dataset, indices: &[usize]) -> Tensor {
    let shape = ds.images.shape();
    let stride: usize = shape[1..].iter().product();
    let mut out = Vec::with_capacity(indices.len() * stride);
    for &i in indices {
        out.extend_from_slice(ds.image(i));
    }
    let mut s = shape.to_vec();
    s[0] = indices.len();
    Tensor::from_vec(s, out).expect("consistent shape")
}

fn concat_batches(a: &Tensor, b: &Tensor) -> Tensor {
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(shape, data).expect("consistent shape")
}

fn check_model_matches(model: &MagnetModel, ds: &Dataset) -> Result<()> {
    let shape = ds.images.shape();
    let cfg = model.config();
    if shape[1] != cfg.input_channels || shape[2] != cfg.input_size || shape[3] != cfg.input_size {
        return Err(MagnetError::Dimension(format!(
            "dataset images {shape:?} do not match configured input {}x{}x{}",
            cfg.input_channels, cfg.input_size, cfg.input_size
        )));
    }
    if ds.num_classes() != cfg.num_classes {
        return Err(MagnetError::VocabularyMismatch(format!(
            "dataset has {} classes, model expects {}",
            ds.num_classes(),
            cfg.num_classes
        )));
    }
    Ok(())
}

/// Train a model on a source/target pair.
///
/// With both `lambda_mmd` and `gamma_entropy` zero this degenerates to
/// supervised source training and never reads the target data, which is the
/// source-only baseline.
pub fn train(model: &mut MagnetModel, pair: &DomainPair, cfg: &TrainConfig) -> Result<RunResult> {
    cfg.validate()?;
    check_model_matches(model, pair.source())?;
    check_model_matches(model, pair.target())?;
    let source = pair.source();
    let target = pair.target();
    let labels = source
        .labels
        .as_ref()
        .expect("DomainPair guarantees source labels");
    let bs = cfg.batch_size;
    if bs > source.len() || bs > target.len() {
        return Err(MagnetError::Config(format!(
            "batch_size {bs} exceeds dataset sizes {}/{}",
            source.len(),
            target.len()
        )));
    }
    let source_only = cfg.lambda_mmd == 0.0 && cfg.gamma_entropy == 0.0;
    let eval_stride = cfg.effective_eval_stride();

    let start = Instant::now();
    let mut src_sampler = EpochSampler::new(source.len(), cfg.seed, SOURCE_SAMPLER_SALT);
    let mut tgt_sampler = EpochSampler::new(target.len(), cfg.seed, TARGET_SAMPLER_SALT);
    let mut velocity = Velocity::new(model.params());
    let mut logs = Vec::new();
    let mut best_target_acc = 0.0f64;

    for it in 0..cfg.iterations {
        let progress = it as f64 / cfg.iterations as f64;
        let lr = lr_schedule(cfg.base_lr, progress, cfg.anneal_alpha, cfg.anneal_beta);
        let ramp = if cfg.adaptation_ramp {
            adaptation_ramp(progress)
        } else {
            1.0
        };

        let src_idx: Vec<usize> = src_sampler.next_batch(bs).to_vec();
        let src_images = gather_batch(source, &src_idx);
        let src_labels: Vec<usize> = src_idx.iter().map(|&i| labels[i] as usize).collect();

        let mut tape = Tape::new();
        let report = if source_only {
            let out = model.forward(&mut tape, &src_images, Mode::Train)?;
            let nll = tape.nll_loss(out.fs_logits, &src_labels)?;
            model.params_mut().zero_grads();
            tape.backward(nll, model.params_mut())?;
            LossReport {
                source_nll: tape.value(nll).item()?,
                target_entropy: 0.0,
                mmd_per_tap: vec![0.0; model.config().tap_count()],
                total: tape.value(nll).item()?,
                lambda_mmd: 0.0,
                gamma_entropy: 0.0,
            }
        } else {
            let tgt_idx: Vec<usize> = tgt_sampler.next_batch(bs).to_vec();
            let tgt_images = gather_batch(target, &tgt_idx);
            let combined = concat_batches(&src_images, &tgt_images);
            let out = model.forward(&mut tape, &combined, Mode::Train)?;

            let fs_src = tape.slice_rows(out.fs_logits, 0, bs)?;
            let ft_tgt = tape.slice_rows(out.ft_probs, bs, bs)?;
            let tap_pairs = assemble_tap_pairs(&mut tape, &out, bs, bs, cfg.tap_mode)?;
            let (loss, report) = total_loss(
                &mut tape,
                fs_src,
                &src_labels,
                ft_tgt,
                &tap_pairs,
                &cfg.kernel,
                cfg.lambda_mmd * ramp,
                cfg.gamma_entropy * ramp,
            )?;
            model.params_mut().zero_grads();
            tape.backward(loss, model.params_mut())?;
            report
        };

        nesterov_step(
            model.params_mut(),
            &mut velocity,
            lr,
            cfg.momentum,
            cfg.weight_decay,
        )?;

        if it % cfg.log_stride == 0 || it + 1 == cfg.iterations {
            logs.push(IterationLog {
                iteration: it,
                lr,
                report,
            });
        }
        if (it + 1) % eval_stride == 0 && it + 1 < cfg.iterations {
            refresh_bn_stats(model, cfg, source, target, &mut src_sampler, &mut tgt_sampler)?;
            best_target_acc = best_target_acc.max(evaluate_target(model, pair)?);
        }
    }

    refresh_bn_stats(model, cfg, source, target, &mut src_sampler, &mut tgt_sampler)?;
    let final_target_acc = evaluate_target(model, pair)?;
    best_target_acc = best_target_acc.max(final_target_acc);
    let source_acc = evaluate(model, source)?;

    Ok(RunResult {
        logs,
        final_target_acc,
        best_target_acc,
        source_acc,
        seed: cfg.seed,
        wall_s: start.elapsed().as_secs_f64(),
        config: cfg.clone(),
    })
}

/// Settle batch-norm running statistics under the current (frozen) weights
/// by running forward-only batches from the training samplers. Running
/// averages during training trail the moving weights; this re-estimates them
/// at the endpoint so eval-mode normalization matches what the final weights
/// actually produce. Deterministic: batches come from the same seeded
/// samplers as training.
fn refresh_bn_stats(
    model: &mut MagnetModel,
    cfg: &TrainConfig,
    source: &Dataset,
    target: &Dataset,
    src_sampler: &mut EpochSampler,
    tgt_sampler: &mut EpochSampler,
) -> Result<()> {
    let source_only = cfg.lambda_mmd == 0.0 && cfg.gamma_entropy == 0.0;
    for _ in 0..cfg.stat_refresh_batches {
        let src_idx: Vec<usize> = src_sampler.next_batch(cfg.batch_size).to_vec();
        let src_images = gather_batch(source, &src_idx);
        let batch = if source_only {
            src_images
        } else {
            let tgt_idx: Vec<usize> = tgt_sampler.next_batch(cfg.batch_size).to_vec();
            concat_batches(&src_images, &gather_batch(target, &tgt_idx))
        };
        let mut tape = Tape::new();
        model.forward(&mut tape, &batch, Mode::Train)?;
    }
    Ok(())
}

fn accuracy_over(model: &mut MagnetModel, images: &Dataset, labels: &[u16]) -> Result<f64> {
    let n = images.len();
    let c = images.num_classes();
    let mut correct = 0usize;
    let mut start = 0;
    while start < n {
        let len = EVAL_CHUNK.min(n - start);
        let indices: Vec<usize> = (start..start + len).collect();
        let batch = gather_batch(images, &indices);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch, Mode::Eval)?;
        let probs = tape.value(out.ft_probs);
        for i in 0..len {
            let row = &probs.data()[i * c..(i + 1) * c];
            // Strict comparison keeps the lowest index on ties.
            let mut arg = 0;
            let mut best = row[0];
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    arg = j;
                }
            }
            if arg == labels[start + i] as usize {
                correct += 1;
            }
        }
        start += len;
    }
    Ok(correct as f64 / n as f64)
}

/// Fraction of samples whose predicted class (argmax of `f_t`, ties broken by
/// lowest class index) matches the label. Eval-mode forward; idempotent.
pub fn evaluate(model: &mut MagnetModel, ds: &Dataset) -> Result<f64> {
    check_model_matches(model, ds)?;
    let labels = ds.labels.as_ref().ok_or_else(|| {
        MagnetError::Contract("evaluate needs a labeled dataset".into())
    })?;
    accuracy_over(model, ds, &labels.clone())
}

/// Target-domain accuracy through the evaluation-only label accessor.
pub fn evaluate_target(model: &mut MagnetModel, pair: &DomainPair) -> Result<f64> {
    let labels = pair.target_eval_labels()?.to_vec();
    check_model_matches(model, pair.target())?;
    accuracy_over(model, pair.target(), &labels)
}

/// Mean prediction entropy of `f_t` over a labeled or unlabeled dataset.
pub fn mean_prediction_entropy(model: &mut MagnetModel, ds: &Dataset) -> Result<f64> {
    check_model_matches(model, ds)?;
    let n = ds.len();
    let mut acc = 0.0;
    let mut start = 0;
    while start < n {
        let len = EVAL_CHUNK.min(n - start);
        let indices: Vec<usize> = (start..start + len).collect();
        let batch = gather_batch(ds, &indices);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch, Mode::Eval)?;
        let h = tape.entropy(out.ft_probs)?;
        acc += tape.value(h).item()? * len as f64;
        start += len;
    }
    Ok(acc / n as f64)
}

// ---- experiments -------------------------------------------------------------

/// A named adaptation task.
pub struct TaskSpec {
    pub name: String,
    pub pair: DomainPair,
}

/// One row of an experiment: a (task, method, seed) run.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub task: String,
    pub method: Method,
    pub seed: u64,
    pub source_acc: f64,
    pub target_acc: f64,
    pub best_target_acc: f64,
    pub wall_s: f64,
    pub logs: Vec<IterationLog>,
}

/// All runs of an experiment plus per-(task, method) aggregates.
#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub records: Vec<RunRecord>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl ExperimentResult {
    pub fn runs(&self, task: &str, method: Method) -> Vec<&RunRecord> {
        self.records
            .iter()
            .filter(|r| r.task == task && r.method == method)
            .collect()
    }

    pub fn mean_target_acc(&self, task: &str, method: Method) -> Option<(f64, f64)> {
        let accs: Vec<f64> = self
            .runs(task, method)
            .iter()
            .map(|r| r.target_acc)
            .collect();
        if accs.is_empty() {
            None
        } else {
            Some(mean_std(&accs))
        }
    }
}

/// Run `methods x seeds` training runs for every task.
///
/// Seeds are `cfg.seed .. cfg.seed + cfg.repetitions`. Independent runs are
/// distributed over `workers` threads (0 picks the available parallelism);
/// every reported number is identical to a serial execution.
pub fn run_experiment(
    tasks: &[TaskSpec],
    network: &NetworkConfig,
    cfg: &TrainConfig,
    methods: &[Method],
    workers: usize,
) -> Result<ExperimentResult> {
    cfg.validate()?;
    if methods.is_empty() {
        return Err(MagnetError::Config("no methods configured".into()));
    }
    struct Job {
        slot: usize,
        task_idx: usize,
        method: Method,
        seed: u64,
    }
    let mut jobs = VecDeque::new();
    let mut slot = 0;
    for (task_idx, _) in tasks.iter().enumerate() {
        for &method in methods {
            for rep in 0..cfg.repetitions {
                jobs.push_back(Job {
                    slot,
                    task_idx,
                    method,
                    seed: cfg.seed + rep as u64,
                });
                slot += 1;
            }
        }
    }
    let total = slot;
    let queue = Mutex::new(jobs);
    let results: Mutex<Vec<Option<Result<RunRecord>>>> = Mutex::new((0..total).map(|_| None).collect());

    let workers = if workers > 0 {
        workers
    } else {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    }
    .min(total.max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let job = {
                    let mut q = queue.lock().expect("queue lock");
                    match q.pop_front() {
                        Some(j) => j,
                        None => break,
                    }
                };
                let task = &tasks[job.task_idx];
                let run_cfg = TrainConfig {
                    seed: job.seed,
                    ..job.method.apply(cfg)
                };
                let outcome = (|| -> Result<RunRecord> {
                    let mut model = MagnetModel::new(network.clone(), job.seed)?;
                    let result = train(&mut model, &task.pair, &run_cfg)?;
                    Ok(RunRecord {
                        task: task.name.clone(),
                        method: job.method,
                        seed: job.seed,
                        source_acc: result.source_acc,
                        target_acc: result.final_target_acc,
                        best_target_acc: result.best_target_acc,
                        wall_s: result.wall_s,
                        logs: result.logs,
                    })
                })();
                results.lock().expect("results lock")[job.slot] = Some(outcome);
            });
        }
    });

    let mut records = Vec::with_capacity(total);
    for entry in results.into_inner().expect("results lock") {
        records.push(entry.expect("every job ran")?);
    }
    Ok(ExperimentResult { records })
}

// ---- CSV emission --------------------------------------------------------------

/// Per-run rows plus `mean`/`std` aggregate rows per (task, method).
///
/// Columns: `task, method, seed, source_acc, target_acc, wall_s`.
pub fn results_csv(result: &ExperimentResult) -> String {
    let mut out = String::from("task,method,seed,source_acc,target_acc,wall_s\n");
    let mut groups: Vec<(String, Method)> = Vec::new();
    for r in &result.records {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.3}\n",
            r.task,
            r.method.label(),
            r.seed,
            r.source_acc,
            r.target_acc,
            r.wall_s
        ));
        if !groups.iter().any(|(t, m)| t == &r.task && *m == r.method) {
            groups.push((r.task.clone(), r.method));
        }
    }
    for (task, method) in groups {
        let runs = result.runs(&task, method);
        let (src_mean, src_std) = mean_std(&runs.iter().map(|r| r.source_acc).collect::<Vec<_>>());
        let (tgt_mean, tgt_std) = mean_std(&runs.iter().map(|r| r.target_acc).collect::<Vec<_>>());
        let (wall_mean, _) = mean_std(&runs.iter().map(|r| r.wall_s).collect::<Vec<_>>());
        out.push_str(&format!(
            "{},{},mean,{:.6},{:.6},{:.3}\n",
            task,
            method.label(),
            src_mean,
            tgt_mean,
            wall_mean
        ));
        out.push_str(&format!(
            "{},{},std,{:.6},{:.6},0.000\n",
            task,
            method.label(),
            src_std,
            tgt_std
        ));
    }
    out
}

/// Loss trace: `iter, nll, entropy, mmd_0..mmd_{n-1}, total, lr`.
pub fn loss_trace_csv(result: &RunResult) -> String {
    let n_taps = result
        .logs
        .first()
        .map(|l| l.report.mmd_per_tap.len())
        .unwrap_or(0);
    let mut header = String::from("iter,nll,entropy");
    for i in 0..n_taps {
        header.push_str(&format!(",mmd_{i}"));
    }
    header.push_str(",total,lr\n");
    let mut out = header;
    for log in &result.logs {
        out.push_str(&format!(
            "{},{:.9},{:.9}",
            log.iteration, log.report.source_nll, log.report.target_entropy
        ));
        for m in &log.report.mmd_per_tap {
            out.push_str(&format!(",{:.9}", m));
        }
        out.push_str(&format!(",{:.9},{:.9}\n", log.report.total, log.lr));
    }
    out
}
