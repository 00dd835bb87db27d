//! Supervised pretraining followed by mean-teacher consistency training.
//!
//! Per SSL iteration:
//!
//! ```text
//! teacher(weak(x_u))  → R̂_u = mode, h = entropy
//! mask                = schedule(t, h)
//! L_s                 = mean_l nll(student(x_l), R_l)
//! L_u                 = (1/B_u) Σ_{mask} nll(student(mosaic(x_u)), R̂_u)
//! student            ← SGD(L_s + λ·L_u)
//! teacher            ← EMA(teacher, student)
//! ```
//!
//! Every random draw is keyed by `(seed, stream, iteration·batch + slot)`, and
//! per-sample gradients are reduced in fixed chunks, so a run is
//! bit-reproducible whatever the thread count.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{pose_mosaic, weak_augment, AugPool, ImageTensor};
use crate::curriculum::{quantile_threshold, CurriculumSchedule, MaskRatioLog, ScheduleKind, SelectionResult};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::fisher::{mode, nll_and_grad, FisherStats};
use crate::metrics::{angle_errors, summarize};
use crate::model::{backward_into, ema_update, forward, ModelConfig, RegressorParams, Sgd};
use crate::seed::{self, stream};
use crate::so3::Rotation;

/// Per-sample gradients are summed inside chunks of this size, then the
/// chunk sums are added in order.
const REDUCE_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ScheduleSpec {
    /// Supervised-only baseline: the SSL phase keeps training on labels.
    None,
    Fixed {
        tau: f64,
    },
    Multistage {
        alpha_start: f64,
        alpha_end: f64,
        n_stage: usize,
    },
    Adaptive {
        tau_start: f64,
        tau_end: f64,
    },
}

/// How `τ` values of fixed/adaptive schedules are read.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ThresholdMode {
    /// Entropy values.
    Absolute,
    /// Percentiles (0–100) of teacher entropies on the first
    /// `calibration_size` unlabeled samples, measured once when the SSL phase
    /// starts.
    Quantile { calibration_size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub supervised_iters: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub lambda: f64,
    pub lr_supervised: f64,
    pub lr_ssl: f64,
    pub momentum: f64,
    pub ema_momentum: f64,
    pub schedule: ScheduleSpec,
    pub threshold_mode: ThresholdMode,
    /// PoseMosaic on the student view; when off the student sees the
    /// teacher's weak view.
    pub strong_aug: bool,
    pub mosaic_n: usize,
    pub aug_pool: String,
    pub aug_magnitude: Option<f64>,
    pub channels: [usize; 2],
    pub kernel: usize,
    pub n_embedding: usize,
    /// Evaluate the teacher every this many iterations (0 = only at the end).
    pub eval_every: usize,
    /// Write teacher checkpoints every this many iterations (0 = never).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iters: 20_000,
            supervised_iters: 10_000,
            batch_labeled: 32,
            batch_unlabeled: 128,
            lambda: 1.0,
            lr_supervised: 1e-4,
            lr_ssl: 1e-5,
            momentum: 0.9,
            ema_momentum: 0.999,
            schedule: ScheduleSpec::Adaptive {
                tau_start: -4.5,
                tau_end: -3.9,
            },
            threshold_mode: ThresholdMode::Absolute,
            strong_aug: true,
            mosaic_n: 5,
            aug_pool: "selected7".into(),
            aug_magnitude: None,
            channels: [8, 16],
            kernel: 3,
            n_embedding: 16,
            eval_every: 0,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.supervised_iters > self.total_iters {
            return bad(format!(
                "supervised iterations {} exceed total {}",
                self.supervised_iters, self.total_iters
            ));
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return bad("batch sizes must be ≥ 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("λ = {} must be finite and ≥ 0", self.lambda));
        }
        for (name, v) in [("lr_supervised", self.lr_supervised), ("lr_ssl", self.lr_ssl)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be finite and ≥ 0"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.ema_momentum) {
            return bad("momenta must lie in [0, 1)".into());
        }
        if self.mosaic_n == 0 {
            return bad("mosaic n must be ≥ 1".into());
        }
        if let ThresholdMode::Quantile { calibration_size } = self.threshold_mode {
            if calibration_size == 0 {
                return bad("calibration size must be ≥ 1".into());
            }
            let pcts = match self.schedule {
                ScheduleSpec::Fixed { tau } => vec![tau],
                ScheduleSpec::Adaptive { tau_start, tau_end } => vec![tau_start, tau_end],
                _ => vec![],
            };
            if pcts.iter().any(|p| !(0.0..=100.0).contains(p)) {
                return bad("quantile thresholds are percentiles in [0, 100]".into());
            }
        }
        self.pool()?;
        self.schedule_for(self.ssl_iters().max(1), |p| Ok(p))?;
        Ok(())
    }

    pub fn ssl_iters(&self) -> usize {
        self.total_iters - self.supervised_iters
    }

    pub fn pool(&self) -> Result<AugPool> {
        let pool: AugPool = self.aug_pool.parse()?;
        match self.aug_magnitude {
            Some(m) => pool.with_fixed_magnitude(m),
            None => Ok(pool),
        }
    }

    pub fn model_config(&self, width: usize, height: usize, n_categories: usize) -> ModelConfig {
        ModelConfig {
            width,
            height,
            channels: self.channels,
            kernel: self.kernel,
            n_embedding: self.n_embedding,
            n_categories,
            seed: seed::derive(self.seed, stream::MODEL_INIT, 0),
        }
    }

    /// Absolute schedule; `to_abs` maps fixed/adaptive τ values (identity in
    /// absolute mode).
    fn schedule_for(&self, n_iter: usize, to_abs: impl Fn(f64) -> Result<f64>) -> Result<Option<CurriculumSchedule>> {
        let kind = match self.schedule {
            ScheduleSpec::None => return Ok(None),
            ScheduleSpec::Fixed { tau } => ScheduleKind::Fixed { tau: to_abs(tau)? },
            ScheduleSpec::Multistage {
                alpha_start,
                alpha_end,
                n_stage,
            } => ScheduleKind::Multistage {
                alpha_start,
                alpha_end,
                n_stage,
            },
            ScheduleSpec::Adaptive { tau_start, tau_end } => ScheduleKind::Adaptive {
                tau_start: to_abs(tau_start)?,
                tau_end: to_abs(tau_end)?,
            },
        };
        CurriculumSchedule::new(kind, n_iter).map(Some)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Supervised,
    Ssl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub phase: Phase,
    pub loss_s: f64,
    pub loss_u: Option<f64>,
    pub threshold: Option<f64>,
    pub mask_ratio: Option<f64>,
    pub stage: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iter: usize,
    pub mean_med_deg: f64,
    pub mean_acc30: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<IterRecord>,
    pub evals: Vec<EvalRecord>,
    pub mask: MaskRatioLog,
}

impl TrainLog {
    fn push(&mut self, rec: IterRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if rec.iter <= last.iter {
                return Err(Error::InvalidArgument(format!("iteration {} not after {}", rec.iter, last.iter)));
            }
        }
        self.records.push(rec);
        Ok(())
    }

    /// `iter,phase,loss_s,loss_u,threshold,mask_ratio,stage`; SSL-only
    /// columns are empty on supervised rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        wr.write_record(["iter", "phase", "loss_s", "loss_u", "threshold", "mask_ratio", "stage"])?;
        for r in &self.records {
            wr.serialize(r)?;
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))
    }

    /// `iter,mean_med_deg,mean_acc30`
    pub fn write_eval_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["iter", "mean_med_deg", "mean_acc30"])?;
        for r in &self.evals {
            wr.write_record([r.iter.to_string(), r.mean_med_deg.to_string(), r.mean_acc30.to_string()])?;
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))
    }
}

/// Teacher prediction on the weak view of an unlabeled image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabel {
    pub rotation: Rotation,
    pub entropy: f64,
    /// The predicted `F` had no well-defined mode.
    pub degenerate: bool,
}

pub fn pseudo_label<R: rand::Rng + ?Sized>(
    teacher: &RegressorParams,
    x_u: &ImageTensor,
    category: usize,
    rng: &mut R,
) -> Result<PseudoLabel> {
    let weak = weak_augment(x_u, rng);
    pseudo_label_view(teacher, &weak, category)
}

fn pseudo_label_view(teacher: &RegressorParams, view: &ImageTensor, category: usize) -> Result<PseudoLabel> {
    let (f, _) = forward(teacher, view, category)?;
    let proj = mode(&f);
    Ok(PseudoLabel {
        rotation: proj.rotation,
        entropy: FisherStats::new(&f).entropy(),
        degenerate: proj.degenerate,
    })
}

/// Sum of per-item `(loss, gradient)` contributions, reduced in fixed
/// chunks.
fn grad_sum<T: Sync>(
    params: &RegressorParams,
    items: &[T],
    job: impl Fn(&T, &mut RegressorParams) -> Result<f64> + Sync,
) -> Result<(f64, RegressorParams)> {
    let partials = items
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| {
            let mut g = params.zeros_like();
            let mut loss = 0.0;
            for item in chunk {
                loss += job(item, &mut g)?;
            }
            Ok((loss, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for (l, g) in partials {
        loss += l;
        total.add_scaled(&g, 1.0)?;
    }
    Ok((loss, total))
}

/// `(1/B) Σ nll(student(x), R)` and its gradient.
fn labeled_loss_grad(student: &RegressorParams, batch: &[&Sample]) -> Result<(f64, RegressorParams)> {
    if let Some(s) = batch.iter().find(|s| s.label.is_none()) {
        return Err(Error::InvalidArgument(format!("sample {} in the labeled batch has no label", s.id)));
    }
    let scale = 1.0 / batch.len() as f64;
    grad_sum(student, batch, |s, g| {
        let r = s.label.as_ref().expect("checked above");
        let (f, cache) = forward(student, &s.image, s.category)?;
        let (loss, d_f) = nll_and_grad(&f, r);
        backward_into(student, &cache, &(d_f * scale), g)?;
        Ok(loss * scale)
    })
}

fn abort(iteration: usize, reason: impl Into<String>, ids: impl Iterator<Item = u64>) -> Error {
    Error::NumericalAbort {
        iteration,
        reason: reason.into(),
        batch_ids: ids.collect(),
    }
}

/// Optimizer plus teacher, i.e. everything a step mutates.
#[derive(Debug, Clone)]
pub struct Models {
    pub student: RegressorParams,
    pub teacher: RegressorParams,
    pub opt: Sgd,
}

impl Models {
    pub fn new(student: RegressorParams, momentum: f64) -> Self {
        Models {
            teacher: student.clone(),
            student,
            opt: Sgd::new(momentum),
        }
    }
}

/// One supervised update; returns the batch loss.
pub fn supervised_step(models: &mut Models, batch: &[&Sample], lr: f64, ema_momentum: f64, iteration: usize) -> Result<f64> {
    let ids = || batch.iter().map(|s| s.id);
    let (loss, grads) = labeled_loss_grad(&models.student, batch).map_err(|e| match e {
        Error::NonFinite(what) => abort(iteration, what, ids()),
        e => e,
    })?;
    if !loss.is_finite() {
        return Err(abort(iteration, "supervised loss is not finite", ids()));
    }
    models
        .opt
        .step(&mut models.student, &grads, lr)
        .map_err(|e| abort(iteration, e.to_string(), ids()))?;
    ema_update(&mut models.teacher, &models.student, ema_momentum)?;
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SslStep {
    pub loss_s: f64,
    pub loss_u: f64,
    pub selection: SelectionResult,
    pub stage: Option<usize>,
    pub pseudo: Vec<PseudoLabel>,
}

/// Knobs of one SSL step that do not change within a run.
#[derive(Debug, Clone)]
pub struct SslContext<'a> {
    pub schedule: &'a CurriculumSchedule,
    pub lambda: f64,
    pub lr: f64,
    pub ema_momentum: f64,
    pub strong: Option<(usize, &'a AugPool)>,
    pub seed: u64,
}

/// One consistency update at global iteration `iteration`, SSL iteration `t`.
pub fn ssl_step(
    models: &mut Models,
    labeled: &[&Sample],
    unlabeled: &[&Sample],
    iteration: usize,
    t: usize,
    ctx: &SslContext,
) -> Result<SslStep> {
    let b_u = unlabeled.len();
    let key = |slot: usize| (iteration * b_u + slot) as u64;
    let all_ids = || labeled.iter().chain(unlabeled).map(|s| s.id);

    let weak_views: Vec<ImageTensor> = unlabeled
        .par_iter()
        .enumerate()
        .map(|(j, s)| weak_augment(&s.image, &mut seed::rng(ctx.seed, stream::WEAK_AUG, key(j))))
        .collect();
    let pseudo = unlabeled
        .par_iter()
        .zip(&weak_views)
        .map(|(s, v)| pseudo_label_view(&models.teacher, v, s.category))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| abort(iteration, format!("teacher: {e}"), all_ids()))?;
    let entropies: Vec<f64> = pseudo.iter().map(|p| p.entropy).collect();
    if entropies.iter().any(|h| !h.is_finite()) {
        return Err(abort(iteration, "non-finite teacher entropy", all_ids()));
    }
    let (selection, stage) = ctx.schedule.select(t, &entropies)?;

    let (loss_s, mut grads) = labeled_loss_grad(&models.student, labeled)
        .map_err(|e| abort(iteration, format!("labeled branch: {e}"), all_ids()))?;

    let mut loss_u = 0.0;
    if ctx.lambda != 0.0 && selection.selected() > 0 {
        let chosen: Vec<usize> = (0..b_u).filter(|&j| selection.mask[j]).collect();
        let scale = ctx.lambda / b_u as f64;
        let student = &models.student;
        let (l, g) = grad_sum(student, &chosen, |&j, g| {
            let s = unlabeled[j];
            let view = match ctx.strong {
                Some((n, pool)) => pose_mosaic(&s.image, n, pool, &mut seed::rng(ctx.seed, stream::STRONG_AUG, key(j)))?,
                None => weak_views[j].clone(),
            };
            let (f, cache) = forward(student, &view, s.category)?;
            let (loss, d_f) = nll_and_grad(&f, &pseudo[j].rotation);
            backward_into(student, &cache, &(d_f * scale), g)?;
            Ok(loss / b_u as f64)
        })
        .map_err(|e| abort(iteration, format!("unlabeled branch: {e}"), all_ids()))?;
        loss_u = l;
        grads.add_scaled(&g, 1.0)?;
    }
    if !(loss_s.is_finite() && loss_u.is_finite()) {
        return Err(abort(iteration, "loss is not finite", all_ids()));
    }
    models
        .opt
        .step(&mut models.student, &grads, ctx.lr)
        .map_err(|e| abort(iteration, e.to_string(), all_ids()))?;
    ema_update(&mut models.teacher, &models.student, ctx.ema_momentum)?;
    Ok(SslStep {
        loss_s,
        loss_u,
        selection,
        stage,
        pseudo,
    })
}

/// Seeded shuffles with wraparound; a fresh permutation every epoch.
#[derive(Debug, Clone)]
pub struct BatchIter {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
    tag: u64,
}

impl BatchIter {
    pub fn new(n: usize, seed: u64, tag: u64) -> Self {
        let mut it = BatchIter {
            n,
            order: Vec::new(),
            pos: 0,
            epoch: 0,
            seed,
            tag,
        };
        it.reshuffle();
        it
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut seed::rng(self.seed, self.tag, self.epoch));
        self.pos = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        if self.n == 0 {
            return out;
        }
        while out.len() < size {
            if self.pos == self.n {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Training state at an iteration boundary. Cloning it after the
/// supervised phase lets several SSL variants share one pretraining run.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    pub models: Models,
    pub log: TrainLog,
    iteration: usize,
    labeled_iter: BatchIter,
    unlabeled_iter: BatchIter,
    schedule: Option<CurriculumSchedule>,
    pool: AugPool,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, dataset: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let m = &dataset.manifest;
        let n_l = dataset.labeled().len();
        if n_l == 0 {
            return Err(Error::Config("dataset has no labeled samples".into()));
        }
        let student = RegressorParams::init(cfg.model_config(m.width, m.height, m.n_categories))?;
        Ok(Trainer {
            models: Models::new(student, cfg.momentum),
            log: TrainLog::default(),
            iteration: 0,
            labeled_iter: BatchIter::new(n_l, cfg.seed, stream::LABELED_ORDER),
            unlabeled_iter: BatchIter::new(dataset.unlabeled().len(), cfg.seed, stream::UNLABELED_ORDER),
            schedule: None,
            pool: cfg.pool()?,
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Swaps the SSL-phase settings. Allowed only before the SSL phase
    /// starts, and only for settings the supervised phase never reads.
    pub fn set_config(&mut self, cfg: TrainConfig) -> Result<()> {
        cfg.validate()?;
        if self.iteration > cfg.supervised_iters.min(self.cfg.supervised_iters) {
            return Err(Error::Config("cannot change configuration inside the SSL phase".into()));
        }
        let same_prefix = TrainConfig {
            schedule: self.cfg.schedule,
            threshold_mode: self.cfg.threshold_mode,
            lambda: self.cfg.lambda,
            strong_aug: self.cfg.strong_aug,
            mosaic_n: self.cfg.mosaic_n,
            aug_pool: self.cfg.aug_pool.clone(),
            aug_magnitude: self.cfg.aug_magnitude,
            total_iters: self.cfg.total_iters,
            lr_ssl: self.cfg.lr_ssl,
            eval_every: self.cfg.eval_every,
            checkpoint_every: self.cfg.checkpoint_every,
            ..cfg.clone()
        };
        if same_prefix != self.cfg {
            return Err(Error::Config("new configuration changes the supervised phase".into()));
        }
        self.pool = cfg.pool()?;
        self.cfg = cfg;
        Ok(())
    }

    fn calibrate(&self, dataset: &Dataset) -> Result<CurriculumSchedule> {
        let n_iter = self.cfg.ssl_iters().max(1);
        let ThresholdMode::Quantile { calibration_size } = self.cfg.threshold_mode else {
            return Ok(self.cfg.schedule_for(n_iter, Ok)?.expect("SSL schedule present"));
        };
        let unlabeled = dataset.unlabeled();
        let n = calibration_size.min(unlabeled.len());
        if n == 0 {
            return Err(Error::Config("no unlabeled samples to calibrate on".into()));
        }
        let entropies = unlabeled[..n]
            .par_iter()
            .enumerate()
            .map(|(j, s)| {
                let mut rng = seed::rng(self.cfg.seed, stream::CALIBRATION, j as u64);
                Ok(pseudo_label(&self.models.teacher, &s.image, s.category, &mut rng)?.entropy)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(self
            .cfg
            .schedule_for(n_iter, |p| quantile_threshold(&entropies, p))?
            .expect("SSL schedule present"))
    }

    /// Runs iterations until `until` (exclusive, capped at the total).
    pub fn run(
        &mut self,
        dataset: &Dataset,
        until: usize,
        eval: Option<&[Sample]>,
        checkpoint_dir: Option<&Path>,
    ) -> Result<()> {
        let labeled = dataset.labeled();
        let unlabeled = dataset.unlabeled();
        let until = until.min(self.cfg.total_iters);
        let ssl = !matches!(self.cfg.schedule, ScheduleSpec::None) && !unlabeled.is_empty();
        while self.iteration < until {
            let it = self.iteration;
            let lbatch: Vec<&Sample> = self
                .labeled_iter
                .next_batch(self.cfg.batch_labeled)
                .into_iter()
                .map(|i| labeled[i])
                .collect();
            let pretraining = it < self.cfg.supervised_iters;
            let rec = if pretraining || !ssl {
                let lr = if pretraining { self.cfg.lr_supervised } else { self.cfg.lr_ssl };
                let loss = supervised_step(&mut self.models, &lbatch, lr, self.cfg.ema_momentum, it)?;
                IterRecord {
                    iter: it,
                    phase: Phase::Supervised,
                    loss_s: loss,
                    loss_u: None,
                    threshold: None,
                    mask_ratio: None,
                    stage: None,
                }
            } else {
                if self.schedule.is_none() {
                    self.schedule = Some(self.calibrate(dataset)?);
                }
                let ubatch: Vec<&Sample> = self
                    .unlabeled_iter
                    .next_batch(self.cfg.batch_unlabeled)
                    .into_iter()
                    .map(|i| unlabeled[i])
                    .collect();
                let schedule = self.schedule.expect("set above");
                let ctx = SslContext {
                    schedule: &schedule,
                    lambda: self.cfg.lambda,
                    lr: self.cfg.lr_ssl,
                    ema_momentum: self.cfg.ema_momentum,
                    strong: self.cfg.strong_aug.then_some((self.cfg.mosaic_n, &self.pool)),
                    seed: self.cfg.seed,
                };
                let t = it - self.cfg.supervised_iters;
                let step = ssl_step(&mut self.models, &lbatch, &ubatch, it, t, &ctx)?;
                self.log.mask.push(it, &step.selection, step.stage)?;
                IterRecord {
                    iter: it,
                    phase: Phase::Ssl,
                    loss_s: step.loss_s,
                    loss_u: Some(step.loss_u),
                    threshold: Some(step.selection.threshold_used),
                    mask_ratio: Some(step.selection.mask_ratio),
                    stage: step.stage,
                }
            };
            self.log.push(rec)?;
            self.iteration += 1;
            let done = self.iteration;
            if let Some(eval) = eval {
                if self.cfg.eval_every > 0 && done % self.cfg.eval_every == 0 && done < self.cfg.total_iters {
                    self.evaluate(eval)?;
                }
            }
            if let Some(dir) = checkpoint_dir {
                if self.cfg.checkpoint_every > 0 && done % self.cfg.checkpoint_every == 0 {
                    write_checkpoint(&self.models.teacher, &dir.join(format!("teacher_{done:06}.ckpt")))?;
                }
            }
        }
        Ok(())
    }

    /// Teacher metrics on `eval`, appended to the log.
    pub fn evaluate(&mut self, eval: &[Sample]) -> Result<EvalRecord> {
        let report = summarize(&angle_errors(&self.models.teacher, eval)?)?;
        let rec = EvalRecord {
            iter: self.iteration,
            mean_med_deg: report.mean_med,
            mean_acc30: report.mean_acc30,
        };
        self.log.evals.push(rec.clone());
        Ok(rec)
    }
}

pub fn write_checkpoint(params: &RegressorParams, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    params.write_checkpoint(&mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<RegressorParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    RegressorParams::read_checkpoint(&bytes[..])
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub student: RegressorParams,
    pub teacher: RegressorParams,
    pub log: TrainLog,
}

/// Full run: supervised phase, SSL phase, final evaluation when `eval` is
/// given.
pub fn train(
    cfg: &TrainConfig,
    dataset: &Dataset,
    eval: Option<&[Sample]>,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut tr = Trainer::new(cfg.clone(), dataset)?;
    tr.run(dataset, cfg.total_iters, eval, checkpoint_dir)?;
    if let Some(eval) = eval {
        tr.evaluate(eval)?;
    }
    Ok(TrainOutcome {
        student: tr.models.student,
        teacher: tr.models.teacher,
        log: tr.log,
    })
}
