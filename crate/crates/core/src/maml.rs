//! Inner adaptation with Λ-masked gradient steps and the outer Adam meta-update.

use std::time::Instant;

use lambda_tensor::{grad, Scalar, Tape, Tensor, TensorData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::episodes::{sample_episode, ClassDataset, Episode, EpisodeSpec};
use crate::error::{Error, Result};
use crate::nn::{accuracy, cross_entropy, forward, Architecture, ForwardMode, WeightSet};
use crate::pattern::{masked_step, LambdaPattern};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Independent rng streams derived from one seed.
pub mod stream {
    pub const INIT: u64 = 0;
    pub const TRAIN: u64 = 1;
    pub const VALIDATION: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const DATA: u64 = 4;
    pub const BENCH: u64 = 5;
}

pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Inner step size α.
    pub alpha: f64,
    /// Outer (Adam) learning rate β.
    pub beta: f64,
    /// Adaptation steps P.
    pub steps: usize,
    pub meta_batch: usize,
    pub epochs: usize,
    pub tasks_per_epoch: usize,
    pub first_order: bool,
    pub seed: u64,
    /// Fixed validation episodes scored after every epoch.
    pub val_episodes: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 1e-3,
            steps: 10,
            meta_batch: 4,
            epochs: 1,
            tasks_per_epoch: 100,
            first_order: false,
            seed: 0,
            val_episodes: 100,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.meta_batch == 0 {
            return Err(Error::Config("meta_batch must be at least 1".into()));
        }
        Ok(())
    }

    /// Meta-updates per epoch.
    pub fn updates_per_epoch(&self) -> usize {
        self.tasks_per_epoch / self.meta_batch.max(1)
    }
}

/// A few-shot task seen through its losses.
pub trait Task<T: Scalar> {
    fn support_loss(&self, params: &[Tensor<T>]) -> Result<Tensor<T>>;
    /// Query loss, plus query accuracy where that is meaningful.
    fn query_loss(&self, params: &[Tensor<T>]) -> Result<(Tensor<T>, Option<f64>)>;
}

/// An [`Episode`] evaluated through the CNN forward pass.
pub struct EpisodeTask<'a, T: Scalar = f64> {
    pub arch: &'a Architecture,
    pub support_x: Tensor<T>,
    pub support_y: Vec<usize>,
    pub query_x: Tensor<T>,
    pub query_y: Vec<usize>,
}

impl<'a, T: Scalar> EpisodeTask<'a, T> {
    pub fn new(arch: &'a Architecture, episode: &Episode) -> Self {
        Self {
            arch,
            support_x: Tensor::from(episode.support_x.cast::<T>()),
            support_y: episode.support_y.clone(),
            query_x: Tensor::from(episode.query_x.cast::<T>()),
            query_y: episode.query_y.clone(),
        }
    }

    pub fn query_logits(&self, params: &[Tensor<T>]) -> Result<Tensor<T>> {
        forward(self.arch, params, &self.query_x, ForwardMode::Eval)
    }
}

impl<T: Scalar> Task<T> for EpisodeTask<'_, T> {
    fn support_loss(&self, params: &[Tensor<T>]) -> Result<Tensor<T>> {
        let logits = forward(self.arch, params, &self.support_x, ForwardMode::Train)?;
        cross_entropy(&self.support_y, &logits)
    }

    fn query_loss(&self, params: &[Tensor<T>]) -> Result<(Tensor<T>, Option<f64>)> {
        let logits = self.query_logits(params)?;
        let acc = accuracy(&self.query_y, &logits)?;
        Ok((cross_entropy(&self.query_y, &logits)?, Some(acc)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdaptMode {
    /// Plain values; each step records on a fresh tape holding only the active tensors.
    Inference,
    /// Steps are recorded on the caller's tape, but inner gradients are constants.
    FirstOrder,
    /// Inner gradients are differentiable, so the result can be differentiated through.
    SecondOrder,
}

/// Runs `steps` masked gradient steps on the support loss.
///
/// In [`AdaptMode::Inference`] `params` are used as plain values and the result is
/// untracked. In the other modes `params` are normally leaves of a caller-owned tape
/// and the result stays connected to them.
pub fn adapt_params<T: Scalar, K: Task<T> + ?Sized>(
    task: &K,
    params: &[Tensor<T>],
    layer_of: &[usize],
    pattern: &LambdaPattern,
    steps: usize,
    alpha: T,
    mode: AdaptMode,
) -> Result<Vec<Tensor<T>>> {
    if steps == 0 {
        return Err(Error::Config("adaptation needs at least one step".into()));
    }
    if params.len() != layer_of.len() {
        return Err(Error::Config(format!(
            "{} tensors but {} layer indices",
            params.len(),
            layer_of.len()
        )));
    }
    let blocks = layer_of.iter().max().map_or(0, |&m| m + 1);
    pattern.check_blocks(blocks)?;
    let active: Vec<usize> = (0..params.len())
        .filter(|&i| pattern.is_active(layer_of[i]))
        .collect();

    let mut current: Vec<Tensor<T>> = match mode {
        AdaptMode::Inference => params.iter().map(Tensor::detach).collect(),
        _ => params.to_vec(),
    };
    for _ in 0..steps {
        let grads = match mode {
            AdaptMode::Inference => {
                let tape = Tape::new();
                let mut vars = current.clone();
                for &i in &active {
                    vars[i] = tape.var(current[i].data().clone())?;
                }
                let loss = task.support_loss(&vars)?;
                let wrt: Vec<&Tensor<T>> = active.iter().map(|&i| &vars[i]).collect();
                grad(&loss, &wrt, false)?
            }
            AdaptMode::FirstOrder | AdaptMode::SecondOrder => {
                let loss = task.support_loss(&current)?;
                let wrt: Vec<&Tensor<T>> = active.iter().map(|&i| &current[i]).collect();
                grad(&loss, &wrt, mode == AdaptMode::SecondOrder)?
            }
        };
        let mut aligned: Vec<Option<Tensor<T>>> = vec![None; current.len()];
        for (&i, g) in active.iter().zip(grads) {
            aligned[i] = Some(g);
        }
        current = masked_step(&current, &aligned, layer_of, pattern, alpha)?;
    }
    Ok(current)
}

/// Adapts `weights` to the episode's support set without building any outer graph.
pub fn adapt<T: Scalar>(
    arch: &Architecture,
    weights: &WeightSet<T>,
    episode: &EpisodeTask<'_, T>,
    pattern: &LambdaPattern,
    steps: usize,
    alpha: T,
) -> Result<WeightSet<T>> {
    let adapted = adapt_params(
        episode,
        &weights.tensors(),
        &weights.layer_of(),
        pattern,
        steps,
        alpha,
        AdaptMode::Inference,
    )?;
    debug_assert_eq!(arch.param_slots().len(), adapted.len());
    weights.with_tensors(&adapted)
}

/// Gradient of the summed query loss over `tasks` with respect to `theta`.
#[derive(Clone, Debug)]
pub struct MetaGradient<T: Scalar = f64> {
    pub grads: Vec<TensorData<T>>,
    pub loss_sum: f64,
    pub mean_loss: f64,
    pub mean_accuracy: Option<f64>,
}

pub fn meta_gradient<T: Scalar>(
    tasks: &[&dyn Task<T>],
    theta: &[TensorData<T>],
    layer_of: &[usize],
    pattern: &LambdaPattern,
    steps: usize,
    alpha: T,
    first_order: bool,
) -> Result<MetaGradient<T>> {
    if tasks.is_empty() {
        return Err(Error::Config("meta-update needs at least one task".into()));
    }
    let mode = if first_order {
        AdaptMode::FirstOrder
    } else {
        AdaptMode::SecondOrder
    };
    let tape = Tape::new();
    let vars = theta
        .iter()
        .map(|d| tape.var(d.clone()))
        .collect::<lambda_tensor::Result<Vec<_>>>()?;
    let mut total: Option<Tensor<T>> = None;
    let mut acc_sum = 0.0;
    let mut acc_count = 0;
    for task in tasks {
        let adapted = adapt_params(*task, &vars, layer_of, pattern, steps, alpha, mode)?;
        let (loss, acc) = task.query_loss(&adapted)?;
        if let Some(a) = acc {
            acc_sum += a;
            acc_count += 1;
        }
        total = Some(match total {
            None => loss,
            Some(t) => t.add(&loss)?,
        });
    }
    let total = total.expect("non-empty");
    let wrt: Vec<&Tensor<T>> = vars.iter().collect();
    let grads = grad(&total, &wrt, false)?;
    let loss_sum = total.item().to_f64_lossy();
    Ok(MetaGradient {
        grads: grads.into_iter().map(|g| g.data().clone()).collect(),
        loss_sum,
        mean_loss: loss_sum / tasks.len() as f64,
        mean_accuracy: (acc_count > 0).then(|| acc_sum / acc_count as f64),
    })
}

/// `Σ_i L_query(adapt(θ))`, evaluated without any outer graph.
pub fn meta_objective<T: Scalar>(
    tasks: &[&dyn Task<T>],
    theta: &[TensorData<T>],
    layer_of: &[usize],
    pattern: &LambdaPattern,
    steps: usize,
    alpha: T,
) -> Result<f64> {
    let params: Vec<Tensor<T>> = theta.iter().cloned().map(Tensor::from).collect();
    let mut sum = 0.0;
    for task in tasks {
        let adapted = adapt_params(*task, &params, layer_of, pattern, steps, alpha, AdaptMode::Inference)?;
        sum += task.query_loss(&adapted)?.0.item().to_f64_lossy();
    }
    Ok(sum)
}

/// First and second moment estimates for Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<TensorData<f64>>,
    pub v: Vec<TensorData<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(params: &[TensorData<f64>]) -> Self {
        Self {
            m: params.iter().map(|p| TensorData::zeros(p.shape())).collect(),
            v: params.iter().map(|p| TensorData::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    /// One Adam step with learning rate `lr`; returns the new parameters.
    pub fn step(
        &mut self,
        params: &[TensorData<f64>],
        grads: &[TensorData<f64>],
        lr: f64,
    ) -> Result<Vec<TensorData<f64>>> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Config(format!(
                "Adam step: {} parameters, {} gradients, {} moment buffers",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let mut out = Vec::with_capacity(params.len());
        for i in 0..params.len() {
            let g = &grads[i];
            if g.shape() != params[i].shape() {
                return Err(Error::Config(format!(
                    "Adam step: gradient {:?} for parameter {:?}",
                    g.shape(),
                    params[i].shape()
                )));
            }
            self.m[i] = self.m[i].zip_map(g, |m, g| ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g);
            self.v[i] = self.v[i].zip_map(g, |v, g| ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g);
            let update = self.m[i].zip_map(&self.v[i], |m, v| (m / c1) / ((v / c2).sqrt() + ADAM_EPS));
            out.push(params[i].zip_map(&update, |p, u| p - lr * u));
        }
        Ok(out)
    }
}

/// Meta-weights, architecture and optimiser state.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaModel {
    pub arch: Architecture,
    pub weights: WeightSet<f64>,
    pub adam: AdamState,
    pub config: MetaConfig,
    pub episode: EpisodeSpec,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub mean_loss: f64,
    pub mean_accuracy: f64,
}

impl MetaModel {
    pub fn new(
        arch: Architecture,
        weights: WeightSet<f64>,
        config: MetaConfig,
        episode: EpisodeSpec,
    ) -> Result<Self> {
        arch.validate()?;
        config.validate()?;
        episode.validate()?;
        if episode.n_way != arch.n_way() {
            return Err(Error::Config(format!(
                "episodes are {}-way but the classifier has {} outputs",
                episode.n_way,
                arch.n_way()
            )));
        }
        let adam = AdamState::zeros_like(&weights.data());
        Ok(Self {
            arch,
            weights,
            adam,
            config,
            episode,
        })
    }

    /// One Adam step on the summed query loss of `episodes`. Metrics are measured
    /// before the step.
    pub fn meta_update(&mut self, episodes: &[Episode], pattern: &LambdaPattern) -> Result<StepMetrics> {
        if episodes.is_empty() {
            return Err(Error::Config("meta-update needs at least one episode".into()));
        }
        let tasks: Vec<EpisodeTask<'_, f64>> =
            episodes.iter().map(|e| EpisodeTask::new(&self.arch, e)).collect();
        let dyn_tasks: Vec<&dyn Task<f64>> = tasks.iter().map(|t| t as &dyn Task<f64>).collect();
        let mg = meta_gradient(
            &dyn_tasks,
            &self.weights.data(),
            &self.weights.layer_of(),
            pattern,
            self.config.steps,
            self.config.alpha,
            self.config.first_order,
        )?;
        let updated = self.adam.step(&self.weights.data(), &mg.grads, self.config.beta)?;
        self.weights = self.weights.with_data(updated)?;
        Ok(StepMetrics {
            mean_loss: mg.mean_loss,
            mean_accuracy: mg.mean_accuracy.unwrap_or(f64::NAN),
        })
    }

    /// Query accuracy after adapting a copy of the meta-weights to `episode`.
    pub fn episode_accuracy(&self, episode: &Episode, pattern: &LambdaPattern, steps: usize) -> Result<f64> {
        episode_accuracy(&self.arch, &self.weights, episode, pattern, steps, self.config.alpha)
    }
}

pub fn episode_accuracy<T: Scalar>(
    arch: &Architecture,
    weights: &WeightSet<T>,
    episode: &Episode,
    pattern: &LambdaPattern,
    steps: usize,
    alpha: f64,
) -> Result<f64> {
    let task = EpisodeTask::<T>::new(arch, episode);
    let adapted = adapt(arch, weights, &task, pattern, steps, T::from_f64_lossy(alpha))?;
    let logits = task.query_logits(&adapted.tensors())?;
    accuracy(&task.query_y, &logits)
}

pub fn sample_episodes(
    ds: &ClassDataset,
    spec: EpisodeSpec,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Episode>> {
    (0..n).map(|_| sample_episode(ds, spec, rng)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub val_accuracy: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Snapshot with the highest validation accuracy (the initial model if no epoch ran).
    pub best: MetaModel,
    pub best_epoch: Option<usize>,
}

/// Meta-trains `model` in place. Validation episodes are drawn once and reused every
/// epoch; ties in validation accuracy keep the earlier epoch.
pub fn train(
    model: &mut MetaModel,
    train_ds: &ClassDataset,
    val_ds: &ClassDataset,
    pattern: &LambdaPattern,
) -> Result<TrainOutcome> {
    model.config.validate()?;
    let cfg = model.config.clone();
    let spec = model.episode;
    for (name, ds) in [("training", train_ds), ("validation", val_ds)] {
        let per_class = spec.k_shot + spec.k_query;
        if ds.classes.len() < spec.n_way || ds.classes.iter().any(|c| c.images.len() < per_class) {
            return Err(Error::Dataset(format!(
                "{name} set too small for {} episodes with {} query images",
                spec.label(),
                spec.k_query
            )));
        }
    }
    let mut train_rng = rng_stream(cfg.seed, stream::TRAIN);
    let mut val_rng = rng_stream(cfg.seed, stream::VALIDATION);
    let val_episodes = if cfg.epochs > 0 {
        sample_episodes(val_ds, spec, cfg.val_episodes, &mut val_rng)?
    } else {
        Vec::new()
    };
    let updates = cfg.updates_per_epoch();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best = model.clone();
    let mut best_epoch = None;
    let mut best_acc = f64::NEG_INFINITY;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut loss_sum = 0.0;
        for _ in 0..updates {
            let batch = sample_episodes(train_ds, spec, cfg.meta_batch, &mut train_rng)?;
            loss_sum += model.meta_update(&batch, pattern)?.mean_loss;
        }
        let val_accuracy = if val_episodes.is_empty() {
            f64::NAN
        } else {
            let mut sum = 0.0;
            for ep in &val_episodes {
                sum += model.episode_accuracy(ep, pattern, cfg.steps)?;
            }
            sum / val_episodes.len() as f64
        };
        let row = EpochLog {
            epoch,
            mean_train_loss: if updates > 0 { loss_sum / updates as f64 } else { f64::NAN },
            val_accuracy,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        log::info!(
            "epoch {epoch}: train loss {:.4}, validation accuracy {:.4}",
            row.mean_train_loss,
            row.val_accuracy
        );
        if best_epoch.is_none() || val_accuracy > best_acc {
            best_acc = val_accuracy;
            best_epoch = Some(epoch);
            best = model.clone();
        }
        log.push(row);
    }
    Ok(TrainOutcome {
        log,
        best,
        best_epoch,
    })
}

/// Mean accuracy with a Student-t 95% confidence half-width.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub ci95: f64,
}

impl EvalSummary {
    pub fn from_accuracies(accuracies: Vec<f64>) -> Result<Self> {
        let n = accuracies.len();
        if n == 0 {
            return Err(Error::Config("evaluation needs at least one episode".into()));
        }
        let mean = accuracies.iter().sum::<f64>() / n as f64;
        let ci95 = if n < 2 {
            f64::INFINITY
        } else {
            let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
                .expect("valid degrees of freedom")
                .inverse_cdf(0.975);
            t * (var / n as f64).sqrt()
        };
        Ok(Self {
            accuracies,
            mean,
            ci95,
        })
    }

    pub fn n(&self) -> usize {
        self.accuracies.len()
    }

    pub fn contains(&self, value: f64) -> bool {
        (self.mean - value).abs() <= self.ci95
    }
}

/// Adapts the same meta-weights independently to every episode and scores the queries.
pub fn evaluate<T: Scalar>(
    arch: &Architecture,
    weights: &WeightSet<T>,
    episodes: &[Episode],
    pattern: &LambdaPattern,
    steps: usize,
    alpha: f64,
) -> Result<EvalSummary> {
    if episodes.is_empty() {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let accuracies = episodes
        .iter()
        .map(|ep| episode_accuracy(arch, weights, ep, pattern, steps, alpha))
        .collect::<Result<Vec<_>>>()?;
    EvalSummary::from_accuracies(accuracies)
}

pub fn write_train_log(log: &[EpochLog], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["epoch", "mean_train_loss", "val_accuracy", "wall_ms"])
        .map_err(|e| csv_err(path, e))?;
    for row in log {
        w.write_record([
            row.epoch.to_string(),
            row.mean_train_loss.to_string(),
            row.val_accuracy.to_string(),
            format!("{:.3}", row.wall_ms),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(crate::error::io_err(path))
}

pub(crate) fn csv_err(path: &std::path::Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}
