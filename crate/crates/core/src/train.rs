//! Optimizer, learning-rate schedule and the training loop for the three
//! pooling modes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::FeatureSequence;
use crate::distill::{posteriors, random_erase, student_loss, teacher_loss, EraseSpec, ModelPair};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec, Pooling};
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor};
use crate::tokens::{build_schedule, sample_tokens, Schedule, TokenLayout};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// `N`: epochs, also the length of the token schedule.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_end: f64,
    /// Fraction of all steps spent ramping from `lr_start` to `lr_peak`.
    pub ramp_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub erase: EraseSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 32,
            lr_start: 1e-3,
            lr_peak: 5e-3,
            lr_end: 1e-4,
            ramp_fraction: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            erase: EraseSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("training.epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("training.batch_size must be at least 1");
        }
        if ![self.lr_start, self.lr_peak, self.lr_end].iter().all(|v| v.is_finite() && *v >= 0.0) {
            return bad("learning rates must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.ramp_fraction) {
            return bad("training.ramp_fraction must lie in [0, 1]");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return bad("Adam needs beta1, beta2 in [0, 1) and eps > 0");
        }
        self.erase.validate()
    }

    pub fn lr_schedule(&self, total_steps: usize) -> LrSchedule {
        LrSchedule::new(self.lr_start, self.lr_peak, self.lr_end, self.ramp_fraction, total_steps)
    }
}

/// Piecewise-linear learning rate through the knots `(0, start)`,
/// `(ramp, peak)` and `(total − 1, end)`, with
/// `ramp = round(ramp_fraction · (total − 1))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub start: f64,
    pub peak: f64,
    pub end: f64,
    pub ramp_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(start: f64, peak: f64, end: f64, ramp_fraction: f64, total_steps: usize) -> Self {
        let last = total_steps.saturating_sub(1);
        let ramp_steps = ((ramp_fraction * last as f64).round() as usize).min(last);
        LrSchedule {
            start,
            peak,
            end,
            ramp_steps,
            total_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        let last = self.total_steps.saturating_sub(1);
        let step = step.min(last);
        let lerp = |a: f64, b: f64, u: f64| a * (1.0 - u) + b * u;
        if step < self.ramp_steps {
            lerp(self.start, self.peak, step as f64 / self.ramp_steps as f64)
        } else if last > self.ramp_steps {
            let u = (step - self.ramp_steps) as f64 / (last - self.ramp_steps) as f64;
            lerp(self.peak, self.end, u)
        } else {
            self.peak
        }
    }
}

/// Adam with bias-corrected moments; one state per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn from_config(store: &ParamStore, cfg: &TrainConfig) -> Self {
        Adam::new(store, cfg.beta1, cfg.beta2, cfg.eps)
    }

    /// Applies one update from the gradients stored on each tensor. A tensor
    /// without a gradient is treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powf(self.t as f64);
        let c2 = 1.0 - self.beta2.powf(self.t as f64);
        for ((tensor, m), v) in store.tensors_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = tensor.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tensor.len()]);
            for (((p, g), m), v) in tensor.values_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Per-step settings shared by both models of a pair.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    /// Token rows available this epoch (`α_n`).
    pub available: usize,
    pub lr: f64,
    pub erase: &'a EraseSpec,
}

fn augmented_inputs<R: Rng + ?Sized>(
    model: &Model,
    batch: &[&FeatureSequence],
    erase: &EraseSpec,
    rng: &mut R,
) -> Result<Vec<Tensor>> {
    batch
        .iter()
        .map(|s| model.input_from(&random_erase(&s.frames, erase, rng), &s.positions))
        .collect()
}

fn token_draw<R: Rng + ?Sized>(model: &Model, available: usize, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    match &model.tokens {
        Some(m) => sample_tokens(m, available, n, rng),
        None => Ok(vec![0; n]),
    }
}

fn scalar(g: &Graph, v: crate::tensor::Var) -> f64 {
    g.value(v).values()[0]
}

fn check_finite(loss: f64, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} = {loss}")))
    }
}

/// One update of a single model (AVG or CLS) on the cross-entropy of its
/// class output. Returns the loss before the update.
pub fn train_step_single<R: Rng + ?Sized>(
    model: &mut Model,
    optim: &mut Adam,
    batch: &[&FeatureSequence],
    labels: &[usize],
    ctx: StepContext<'_>,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() || batch.len() != labels.len() {
        return Err(Error::invalid("batch must be non-empty with one label per example"));
    }
    let inputs = augmented_inputs(model, batch, ctx.erase, rng)?;
    let tokens = token_draw(model, ctx.available, batch.len(), rng)?;
    let mut g = Graph::new();
    let bound = model.store.bind(&mut g);
    let out = model.forward_batch(&mut g, &bound, &inputs, &tokens)?;
    let loss = teacher_loss(&mut g, out.cls_logits, labels)?;
    let value = scalar(&g, loss);
    check_finite(value, "loss")?;
    g.backward(loss)?;
    model.store.collect_grads(&g, &bound);
    optim.step(&mut model.store, ctx.lr);
    Ok(value)
}

/// One simultaneous teacher–student update. Teacher and student get their
/// own erase draws and token draws; the teacher posterior enters the
/// student loss as a constant. Returns `(Loss_T, Loss_S)` before the update.
pub fn train_step<R: Rng + ?Sized>(
    pair: &mut ModelPair,
    optim: (&mut Adam, &mut Adam),
    batch: &[&FeatureSequence],
    labels: &[usize],
    ctx: StepContext<'_>,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if batch.is_empty() || batch.len() != labels.len() {
        return Err(Error::invalid("batch must be non-empty with one label per example"));
    }
    if pair.teacher.spec.encoder != pair.student.spec.encoder {
        return Err(Error::Config("teacher and student encoders differ".into()));
    }
    let t_inputs = augmented_inputs(&pair.teacher, batch, ctx.erase, rng)?;
    let t_tokens = token_draw(&pair.teacher, ctx.available, batch.len(), rng)?;
    let s_inputs = augmented_inputs(&pair.student, batch, ctx.erase, rng)?;
    let s_tokens = token_draw(&pair.student, ctx.available, batch.len(), rng)?;

    let mut g = Graph::new();
    let tb = pair.teacher.store.bind(&mut g);
    let sb = pair.student.store.bind(&mut g);
    let t_out = pair.teacher.forward_batch(&mut g, &tb, &t_inputs, &t_tokens)?;
    let loss_t = teacher_loss(&mut g, t_out.cls_logits, labels)?;
    let target = posteriors(g.value(t_out.cls_logits));
    let s_out = pair.student.forward_batch(&mut g, &sb, &s_inputs, &s_tokens)?;
    let dist = s_out
        .dist_logits
        .ok_or_else(|| Error::Config("student has no distillation head".into()))?;
    let loss_s = student_loss(&mut g, s_out.cls_logits, dist, labels, &target)?;
    let (lt, ls) = (scalar(&g, loss_t), scalar(&g, loss_s));
    check_finite(lt, "Loss_T")?;
    check_finite(ls, "Loss_S")?;
    // the two losses share no parameters, so one backward pass serves both
    let total = g.add(loss_t, loss_s)?;
    g.backward(total)?;
    pair.teacher.store.collect_grads(&g, &tb);
    pair.student.store.collect_grads(&g, &sb);
    optim.0.step(&mut pair.teacher.store, ctx.lr);
    optim.1.step(&mut pair.student.store, ctx.lr);
    Ok((lt, ls))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Models {
    Single(Model),
    Pair(ModelPair),
}

impl Models {
    /// The network used for embeddings: the student of a pair.
    pub fn embedder(&self) -> &Model {
        match self {
            Models::Single(m) => m,
            Models::Pair(p) => &p.student,
        }
    }

    pub fn stores(&self) -> Vec<&ParamStore> {
        match self {
            Models::Single(m) => vec![&m.store],
            Models::Pair(p) => vec![&p.teacher.store, &p.student.store],
        }
    }

    pub fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        match self {
            Models::Single(m) => vec![&mut m.store],
            Models::Pair(p) => vec![&mut p.teacher.store, &mut p.student.store],
        }
    }
}

/// Labeled training example: the sequence and its class index.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub sequence: FeatureSequence,
    pub label: usize,
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub alpha: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean loss of the (teacher or single) model over the epoch.
    pub loss_t: f64,
    /// Mean student loss; `None` for single models.
    pub loss_s: Option<f64>,
}

/// Emitted after every step, mostly for tests and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss_t: f64,
    pub loss_s: Option<f64>,
}

/// Complete, resumable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub config: RunConfig,
    pub models: Models,
    pub optimizers: Vec<Adam>,
    pub rng: ChaCha8Rng,
    /// Steps taken so far.
    pub step: u64,
    /// Epochs completed so far.
    pub epoch: usize,
}

impl Trainer {
    /// Builds fresh models from the configuration. Initialization draws from
    /// stream 0 of the seed; training draws from stream 1.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let models = Self::build_models(&config, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
        let optimizers = models
            .stores()
            .into_iter()
            .map(|s| Adam::from_config(s, &config.training))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Trainer {
            config,
            models,
            optimizers,
            rng,
            step: 0,
            epoch: 0,
        })
    }

    pub fn model_spec(config: &RunConfig) -> ModelSpec {
        ModelSpec {
            encoder: config.encoder.clone(),
            feature_dim: config.corpus.feature_dim,
            position_dim: config.corpus.position_dim(),
            injection: config.position_injection,
            layout: match config.pooling {
                Pooling::Avg => TokenLayout::None,
                Pooling::Cls => TokenLayout::Class,
                Pooling::ClsDist => TokenLayout::ClassDistill,
            },
            tokens: config.tokens,
            classes: config.corpus.num_classes(),
        }
    }

    pub fn build_models<R: Rng + ?Sized>(config: &RunConfig, rng: &mut R) -> Result<Models> {
        let spec = Self::model_spec(config);
        Ok(match config.pooling {
            Pooling::ClsDist => Models::Pair(ModelPair::new(spec, rng)?),
            _ => Models::Single(Model::new(spec, "", rng)?),
        })
    }

    pub fn schedule(&self) -> Result<Schedule> {
        build_schedule(self.config.tokens, self.config.training.epochs)
    }

    pub fn steps_per_epoch(&self, examples: usize) -> usize {
        examples.div_ceil(self.config.training.batch_size)
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.training.epochs
    }

    /// Runs the next epoch: shuffles, splits into batches (the last may be
    /// short) and updates. `on_step` sees every step.
    pub fn run_epoch(&mut self, data: &[Example], mut on_step: impl FnMut(&Trainer, StepReport)) -> Result<EpochLog> {
        if data.is_empty() {
            return Err(Error::invalid("no training examples"));
        }
        if self.is_finished() {
            return Err(Error::invalid("all configured epochs have run"));
        }
        let classes = self.config.corpus.num_classes();
        if let Some(bad) = data.iter().find(|e| e.label >= classes) {
            return Err(Error::invalid(format!(
                "label {} of {} outside {classes} classes",
                bad.label, bad.sequence.utterance_id
            )));
        }
        let cfg = self.config.training;
        let alpha = self.schedule()?.available(self.epoch);
        let per_epoch = self.steps_per_epoch(data.len());
        let lr_schedule = cfg.lr_schedule(per_epoch * cfg.epochs);

        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut sum_t, mut sum_s, mut lr) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&FeatureSequence> = chunk.iter().map(|&i| &data[i].sequence).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data[i].label).collect();
            lr = lr_schedule.lr(self.step as usize);
            let ctx = StepContext {
                available: alpha,
                lr,
                erase: &cfg.erase,
            };
            let (epoch, step) = (self.epoch, self.step);
            let at_step = |e: Error| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, step {step}: {m}")),
                other => other,
            };
            let (lt, ls) = match (&mut self.models, self.optimizers.as_mut_slice()) {
                (Models::Single(m), [opt]) => {
                    (train_step_single(m, opt, &batch, &labels, ctx, &mut self.rng).map_err(at_step)?, None)
                }
                (Models::Pair(p), [ot, os]) => {
                    let (lt, ls) = train_step(p, (ot, os), &batch, &labels, ctx, &mut self.rng).map_err(at_step)?;
                    (lt, Some(ls))
                }
                _ => unreachable!("one optimizer per model"),
            };
            sum_t += lt;
            sum_s += ls.unwrap_or(0.0);
            self.step += 1;
            let report = StepReport {
                epoch: self.epoch,
                step: self.step,
                lr,
                loss_t: lt,
                loss_s: ls,
            };
            on_step(self, report);
        }
        let n = per_epoch as f64;
        let log = EpochLog {
            epoch: self.epoch,
            alpha,
            lr,
            loss_t: sum_t / n,
            loss_s: matches!(self.models, Models::Pair(_)).then_some(sum_s / n),
        };
        self.epoch += 1;
        Ok(log)
    }

    /// Runs every remaining epoch.
    pub fn run(&mut self, data: &[Example], mut on_epoch: impl FnMut(&EpochLog)) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while !self.is_finished() {
            let log = self.run_epoch(data, |_, _| {})?;
            on_epoch(&log);
            logs.push(log);
        }
        Ok(logs)
    }
}
