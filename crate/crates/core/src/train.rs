//! Training regimes: moving-target gradient epochs, hill-climbing,
//! regeneration, and auxiliary (MNIST) training.
//!
//! Every epoch draws its randomness from streams derived from the master seed
//! and the epoch index, so a run is a pure function of its [`TrainConfig`].

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{QuineError, Result};
use crate::grad::{loss_and_grad, squared_error, LossBreakdown, Objective, TargetSnapshot, TaskBatch};
use crate::metrics::{full_loss_with, margin, predict_all, srq, task_metrics, AuxInput, MetricsRecord, ProjectedImages};
use crate::net::{forward_batch, AuxBatch, FixedProjections, Init, NetworkSpec, ParamVector, Workspace};
use crate::numeric::{Rng, Stream};
use crate::optim::{Algorithm, Hyperparams, OptimizerState};

/// Default auxiliary softmax temperature.
pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_LAMBDA: f64 = 0.01;
pub const DEFAULT_SIGMA: f64 = 0.01;
pub const DEFAULT_BATCH_SIZE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Gradient,
    HillClimb,
    Regenerate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub spec: NetworkSpec,
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: Algorithm,
    pub hyperparams: Hyperparams,
    pub lambda: f64,
    pub temperature: f64,
    pub regime: Regime,
    pub sigma: f64,
    pub generations: usize,
    pub inner_epochs: usize,
    /// Write regenerated weights back one coordinate at a time.
    pub sequential_regeneration: bool,
    /// Drop the replication term from the auxiliary objective.
    pub classifier_only: bool,
    pub init: Init,
    /// Record wall-clock seconds in reports. Off by default so that reports
    /// are reproducible byte for byte.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::new(NetworkSpec::vanilla())
    }
}

impl TrainConfig {
    pub fn new(spec: NetworkSpec) -> Self {
        Self {
            spec,
            seed: 0,
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: 30,
            optimizer: Algorithm::Adamax,
            hyperparams: Algorithm::Adamax.defaults(),
            lambda: DEFAULT_LAMBDA,
            temperature: DEFAULT_TEMPERATURE,
            regime: Regime::Gradient,
            sigma: DEFAULT_SIGMA,
            generations: 10,
            inner_epochs: 1,
            sequential_regeneration: false,
            classifier_only: false,
            init: Init::default(),
            record_time: false,
        }
    }

    /// Switches optimizer and resets its hyperparameters to that optimizer's defaults.
    pub fn with_optimizer(mut self, algorithm: Algorithm) -> Self {
        self.optimizer = algorithm;
        self.hyperparams = algorithm.defaults();
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.batch_size == 0 {
            return Err(QuineError::InvalidArgument("batch_size must be at least 1".into()));
        }
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            return Err(QuineError::InvalidArgument("sigma must be positive".into()));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(QuineError::InvalidArgument("temperature must be positive".into()));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(QuineError::InvalidArgument("lambda must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        Objective {
            lambda: self.lambda,
            temperature: self.temperature,
            replication: !self.classifier_only,
        }
    }

    pub fn optimizer_state(&self) -> OptimizerState {
        OptimizerState::with_hyperparams(self.optimizer, self.hyperparams, self.spec.n_params())
    }

    /// Initial parameters drawn from the init stream.
    pub fn init_params(&self) -> ParamVector {
        crate::net::init_params(&self.spec, self.init, &mut Rng::derive(self.seed, Stream::Init, 0))
    }

    pub fn projections(&self) -> FixedProjections {
        crate::net::build_projections(&self.spec, self.seed)
    }

    /// Coordinate shuffling stream for `epoch`.
    pub fn shuffle_rng(&self, epoch: u64) -> Rng {
        Rng::derive(self.seed, Stream::Shuffle, epoch)
    }

    /// Perturbation stream for hill-climbing epoch `epoch`.
    pub fn noise_rng(&self, epoch: u64) -> Rng {
        Rng::derive(self.seed, Stream::Noise, epoch)
    }
}

/// Loss of one hill-climbing batch before and after the accept/reject decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStep {
    pub incumbent: f64,
    pub proposal: f64,
    pub accepted: bool,
}

impl BatchStep {
    /// Batch loss of the parameters kept after this step.
    pub fn kept(&self) -> f64 {
        if self.accepted {
            self.proposal
        } else {
            self.incumbent
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpochReport {
    pub epoch: u64,
    pub l_sr: f64,
    pub margin: f64,
    pub srq: f64,
    pub l_task: Option<f64>,
    pub accuracy: Option<f64>,
    pub seconds: Option<f64>,
    pub accepted: Option<u64>,
    /// A non-finite value stopped the epoch early.
    pub diverged: bool,
    /// Per-batch trace of hill-climbing epochs.
    pub steps: Vec<BatchStep>,
}

impl EpochReport {
    pub fn record(&self) -> MetricsRecord {
        MetricsRecord {
            epoch: self.epoch,
            l_sr: self.l_sr,
            margin: self.margin,
            srq: self.srq,
            l_task: self.l_task,
            accuracy: self.accuracy,
            seconds: self.seconds,
            accepted: self.accepted,
        }
    }

    /// `l_sr + lambda * l_task` (just `l_sr` for vanilla quines).
    pub fn l_total(&self, lambda: f64) -> f64 {
        self.l_sr + lambda * self.l_task.unwrap_or(0.0)
    }
}

/// MNIST images projected once for training and evaluation.
#[derive(Debug, Clone)]
pub struct AuxData {
    pub train: ProjectedImages,
    pub test: ProjectedImages,
}

/// Measures the parameters against themselves, as done at the end of every epoch.
pub fn evaluate(
    params: &ParamVector,
    proj: &FixedProjections,
    cfg: &TrainConfig,
    epoch: u64,
    data: Option<&AuxData>,
) -> Result<EpochReport> {
    let spec = &cfg.spec;
    let n = spec.n_params();
    let aux = AuxInput::for_spec(spec, data.map(|d| &d.test));
    let (l_sr, diverged) = match full_loss_with(params, proj, spec, aux) {
        Ok(l) => (l, !l.is_finite()),
        Err(QuineError::NumericOverflow { .. }) => (f64::INFINITY, true),
        Err(e) => return Err(e),
    };
    let mut report = EpochReport {
        epoch,
        l_sr,
        margin: margin(l_sr, n),
        srq: srq(l_sr, n),
        diverged,
        ..EpochReport::default()
    };
    if let (true, Some(d)) = (spec.is_auxiliary(), data) {
        match task_metrics(params, proj, spec, &d.test, cfg.temperature) {
            Ok(t) => {
                report.l_task = Some(t.l_task);
                report.accuracy = Some(t.accuracy);
            }
            Err(QuineError::NumericOverflow { .. }) => report.diverged = true,
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}

fn is_divergence(e: &QuineError) -> bool {
    matches!(e, QuineError::NumericOverflow { .. } | QuineError::NonFiniteGradient(_))
}

/// Shuffled coordinate order for one epoch.
pub fn epoch_order(n_params: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_params).collect();
    rng.shuffle(&mut order);
    order
}

fn finish(
    params: &ParamVector,
    proj: &FixedProjections,
    cfg: &TrainConfig,
    epoch: u64,
    data: Option<&AuxData>,
    diverged: bool,
    started: Instant,
) -> Result<EpochReport> {
    let mut report = evaluate(params, proj, cfg, epoch, data)?;
    report.diverged |= diverged;
    if cfg.record_time {
        report.seconds = Some(started.elapsed().as_secs_f64());
    }
    Ok(report)
}

/// One moving-target epoch of a vanilla quine: snapshot the parameters, then
/// take one optimizer step per shuffled mini-batch against that snapshot.
///
/// A non-finite value aborts the epoch; `params` then holds the last finite
/// iterate and the report is flagged as diverged.
pub fn train_epoch_gradient(
    params: &mut ParamVector,
    proj: &FixedProjections,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    rng: &mut Rng,
    epoch: u64,
) -> Result<EpochReport> {
    if cfg.spec.is_auxiliary() {
        return Err(QuineError::UnsupportedRegime(
            "auxiliary quines train with train_epoch_aux".into(),
        ));
    }
    run_gradient_epoch(params, proj, opt, cfg, rng, epoch, None, |_, _| Ok(()))
}

/// Like [`train_epoch_gradient`], calling `inspect(snapshot, params)` before
/// every batch.
pub fn train_epoch_gradient_inspect(
    params: &mut ParamVector,
    proj: &FixedProjections,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    rng: &mut Rng,
    epoch: u64,
    inspect: impl FnMut(&TargetSnapshot, &ParamVector) -> Result<()>,
) -> Result<EpochReport> {
    run_gradient_epoch(params, proj, opt, cfg, rng, epoch, None, inspect)
}

/// Position of the training-image stream: pass `p` visits every training
/// image once, in the order of a permutation drawn from pass `p`'s own stream.
#[derive(Debug, Clone)]
pub struct ImageStream {
    seed: u64,
    len: usize,
    pass: u64,
    order: Vec<usize>,
}

impl ImageStream {
    pub fn new(seed: u64, len: usize) -> Self {
        let mut s = Self {
            seed,
            len,
            pass: 0,
            order: Vec::new(),
        };
        s.load(0);
        s
    }

    fn load(&mut self, pass: u64) {
        self.pass = pass;
        self.order = (0..self.len).collect();
        Rng::derive(self.seed, Stream::ImagePairing, pass).shuffle(&mut self.order);
    }

    /// Training image paired with global sample `index`.
    pub fn image(&mut self, index: u64) -> usize {
        let len = self.len as u64;
        let pass = index / len;
        if pass != self.pass {
            self.load(pass);
        }
        self.order[(index % len) as usize]
    }
}

/// One auxiliary epoch: every coordinate once in shuffled batches, each batch
/// paired with the next images of the training stream; report on the test set.
///
/// The stream position is `epoch * n_params`, so epoch `e` (starting from 0)
/// continues where epoch `e - 1` stopped.
pub fn train_epoch_aux(
    params: &mut ParamVector,
    proj: &FixedProjections,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    data: &AuxData,
    rng: &mut Rng,
    epoch: u64,
) -> Result<EpochReport> {
    if !cfg.spec.is_auxiliary() {
        return Err(QuineError::InvalidArgument("train_epoch_aux needs an auxiliary spec".into()));
    }
    if data.train.is_empty() || data.test.is_empty() {
        return Err(QuineError::InvalidArgument("empty MNIST split".into()));
    }
    run_gradient_epoch(params, proj, opt, cfg, rng, epoch, Some(data), |_, _| Ok(()))
}

#[allow(clippy::too_many_arguments)]
fn run_gradient_epoch(
    params: &mut ParamVector,
    proj: &FixedProjections,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    rng: &mut Rng,
    epoch: u64,
    data: Option<&AuxData>,
    mut inspect: impl FnMut(&TargetSnapshot, &ParamVector) -> Result<()>,
) -> Result<EpochReport> {
    cfg.validate()?;
    let started = Instant::now();
    let spec = &cfg.spec;
    let n = spec.n_params();
    let snapshot = TargetSnapshot::of(params);
    let order = epoch_order(n, rng);
    let objective = if data.is_some() {
        cfg.objective()
    } else {
        Objective::replication_only()
    };
    let mut stream = data.map(|d| ImageStream::new(cfg.seed, d.train.len()));
    let mut ws = Workspace::new();
    let mut grad = vec![0.0; n];
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut diverged = false;

    for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
        inspect(&snapshot, params)?;
        let task = match (data, stream.as_mut()) {
            (Some(d), Some(s)) => {
                images.clear();
                labels.clear();
                let base = epoch * n as u64 + (b * cfg.batch_size) as u64;
                for j in 0..batch.len() {
                    let i = s.image(base + j as u64);
                    images.extend_from_slice(d.train.row(i));
                    labels.push(d.train.label(i));
                }
                Some(TaskBatch {
                    projected_images: &images,
                    labels: &labels,
                })
            }
            _ => None,
        };
        let outcome = loss_and_grad(params, proj, spec, snapshot.values(), batch, task, objective, &mut ws, &mut grad)
            .and_then(|_| opt.step(params.as_mut_slice(), &grad));
        match outcome {
            Ok(()) => {}
            Err(e) if is_divergence(&e) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    finish(params, proj, cfg, epoch + 1, data, diverged, started)
}

fn batch_loss(
    params: &ParamVector,
    proj: &FixedProjections,
    spec: &NetworkSpec,
    target: &TargetSnapshot,
    coords: &[usize],
    ws: &mut Workspace,
) -> Result<f64> {
    forward_batch(params, proj, spec, coords, AuxBatch::None, ws)?;
    Ok(squared_error(ws.predictions(), coords, target.values()))
}

/// One hill-climbing epoch: for each shuffled mini-batch, propose
/// `params + N(0, sigma^2 I)` and keep it only if the batch loss against the
/// epoch snapshot strictly decreases.
pub fn train_epoch_hillclimb(
    params: &mut ParamVector,
    proj: &FixedProjections,
    cfg: &TrainConfig,
    rng: &mut Rng,
    epoch: u64,
) -> Result<EpochReport> {
    cfg.validate()?;
    let started = Instant::now();
    let spec = &cfg.spec;
    if spec.is_auxiliary() {
        return Err(QuineError::UnsupportedRegime("hill-climbing supports vanilla quines only".into()));
    }
    let n = spec.n_params();
    let snapshot = TargetSnapshot::of(params);
    let order = epoch_order(n, rng);
    let mut noise = cfg.noise_rng(epoch);
    let mut ws = Workspace::new();
    let mut proposal = params.clone();
    let mut steps = Vec::with_capacity(order.len().div_ceil(cfg.batch_size));
    let mut accepted = 0u64;
    let mut diverged = false;

    for batch in order.chunks(cfg.batch_size) {
        let incumbent = match batch_loss(params, proj, spec, &snapshot, batch, &mut ws) {
            Ok(l) => l,
            Err(e) if is_divergence(&e) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        for (p, &v) in proposal.as_mut_slice().iter_mut().zip(params.as_slice()) {
            *p = v + cfg.sigma * noise.normal();
        }
        let candidate = match batch_loss(&proposal, proj, spec, &snapshot, batch, &mut ws) {
            Ok(l) => l,
            Err(e) if is_divergence(&e) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        let accept = candidate < incumbent;
        if accept {
            std::mem::swap(params, &mut proposal);
            accepted += 1;
        }
        steps.push(BatchStep {
            incumbent,
            proposal: candidate,
            accepted: accept,
        });
    }
    let mut report = finish(params, proj, cfg, epoch + 1, None, diverged, started)?;
    report.accepted = Some(accepted);
    report.steps = steps;
    Ok(report)
}

/// Replaces every weight with the quine's own prediction of it. All
/// predictions are computed from the pre-sweep parameters.
pub fn regenerate(params: &ParamVector, proj: &FixedProjections, spec: &NetworkSpec) -> Result<ParamVector> {
    check_regenerable(spec)?;
    let pred = predict_all(params, proj, spec, AuxInput::None)?;
    ParamVector::from_vec(spec, pred)
}

/// In-place variant of [`regenerate`]: coordinate `c` is predicted with the
/// weights already rewritten for coordinates `< c`.
pub fn regenerate_sequential(params: &ParamVector, proj: &FixedProjections, spec: &NetworkSpec) -> Result<ParamVector> {
    check_regenerable(spec)?;
    let mut out = params.clone();
    let mut ws = Workspace::new();
    for c in 0..spec.n_params() {
        forward_batch(&out, proj, spec, &[c], AuxBatch::None, &mut ws)?;
        out.as_mut_slice()[c] = ws.predictions()[0];
    }
    Ok(out)
}

fn check_regenerable(spec: &NetworkSpec) -> Result<()> {
    if spec.is_auxiliary() {
        Err(QuineError::UnsupportedRegime(
            "regeneration unsupported for auxiliary quine".into(),
        ))
    } else {
        Ok(())
    }
}

/// Outcome of [`run_regeneration`].
#[derive(Debug, Clone, PartialEq)]
pub struct RegenerationRun {
    /// The initial measurement followed by one report per generation.
    pub reports: Vec<EpochReport>,
    /// Number of gradient epochs run so far, for continuing the epoch streams.
    pub epochs_run: u64,
}

/// `G` generations of `T` gradient epochs followed by one regeneration sweep.
/// Reports are numbered by generation; the optimizer state is kept across
/// generations.
pub fn run_regeneration(
    params: &mut ParamVector,
    proj: &FixedProjections,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    mut on_report: impl FnMut(&EpochReport) -> Result<()>,
) -> Result<RegenerationRun> {
    cfg.validate()?;
    check_regenerable(&cfg.spec)?;
    if cfg.generations == 0 {
        return Err(QuineError::InvalidArgument("generations must be at least 1".into()));
    }
    let initial = evaluate(params, proj, cfg, 0, None)?;
    on_report(&initial)?;
    let mut reports = vec![initial];
    let mut epochs_run = 0u64;
    for g in 0..cfg.generations {
        let started = Instant::now();
        let mut diverged = false;
        for _ in 0..cfg.inner_epochs {
            let r = train_epoch_gradient(params, proj, opt, cfg, &mut cfg.shuffle_rng(epochs_run), epochs_run)?;
            epochs_run += 1;
            if r.diverged {
                diverged = true;
                break;
            }
        }
        if !diverged {
            let next = if cfg.sequential_regeneration {
                regenerate_sequential(params, proj, &cfg.spec)
            } else {
                regenerate(params, proj, &cfg.spec)
            };
            match next {
                Ok(p) if p.is_finite() => *params = p,
                Ok(_) => diverged = true,
                Err(e) if is_divergence(&e) => diverged = true,
                Err(e) => return Err(e),
            }
        }
        let report = finish(params, proj, cfg, g as u64 + 1, None, diverged, started)?;
        on_report(&report)?;
        let stop = report.diverged;
        reports.push(report);
        if stop {
            break;
        }
    }
    Ok(RegenerationRun { reports, epochs_run })
}

/// Summary returned by [`run_epochs`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    /// Initial measurement (epoch 0) followed by one report per epoch.
    pub reports: Vec<EpochReport>,
    pub diverged: bool,
}

impl RunSummary {
    pub fn final_loss(&self) -> f64 {
        self.reports.last().map_or(f64::NAN, |r| r.l_sr)
    }

    pub fn best_loss(&self) -> f64 {
        self.reports.iter().map(|r| r.l_sr).fold(f64::INFINITY, f64::min)
    }
}

/// Runs `cfg.epochs` epochs of the configured regime (gradient or hill-climb
/// for vanilla quines, auxiliary training when `data` is given), starting at
/// epoch index `first_epoch`. Stops after the first diverged epoch.
pub fn run_epochs(
    params: &mut ParamVector,
    proj: &FixedProjections,
    cfg: &TrainConfig,
    data: Option<&AuxData>,
    first_epoch: u64,
    mut on_report: impl FnMut(&EpochReport) -> Result<()>,
) -> Result<RunSummary> {
    cfg.validate()?;
    let mut initial = evaluate(params, proj, cfg, first_epoch, data)?;
    if cfg.regime == Regime::HillClimb {
        initial.accepted = Some(0);
    }
    on_report(&initial)?;
    let mut reports = vec![initial];
    let mut opt = cfg.optimizer_state();
    let mut diverged = false;
    for k in 0..cfg.epochs as u64 {
        let epoch = first_epoch + k;
        let mut rng = cfg.shuffle_rng(epoch);
        let report = match (cfg.regime, data) {
            (Regime::HillClimb, _) => train_epoch_hillclimb(params, proj, cfg, &mut rng, epoch)?,
            (Regime::Gradient, Some(d)) => train_epoch_aux(params, proj, &mut opt, cfg, d, &mut rng, epoch)?,
            (Regime::Gradient, None) => train_epoch_gradient(params, proj, &mut opt, cfg, &mut rng, epoch)?,
            (Regime::Regenerate, _) => {
                return Err(QuineError::InvalidArgument("use run_regeneration for the regeneration regime".into()))
            }
        };
        on_report(&report)?;
        diverged = report.diverged;
        reports.push(report);
        if diverged {
            break;
        }
    }
    Ok(RunSummary { reports, diverged })
}

/// Loss of a batch against a snapshot; exposed for oracle tests.
pub fn snapshot_batch_loss(
    params: &ParamVector,
    proj: &FixedProjections,
    spec: &NetworkSpec,
    target: &TargetSnapshot,
    coords: &[usize],
) -> Result<LossBreakdown> {
    let l = batch_loss(params, proj, spec, target, coords, &mut Workspace::new())?;
    Ok(LossBreakdown {
        l_sr: l,
        l_task: 0.0,
        l_total: l,
    })
}
