//! Optimisation loop, Adam and the evaluation protocol.
//!
//! Task `i` of a run is generated from `derive_seed(seed, TrainTask, i)` and
//! its reparameterisation noise from `(seed, TrainNoise, i)`, so a run is a
//! pure function of its configuration and resuming from a checkpoint
//! continues the same trajectory.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Task, TaskSource};
use crate::distributions::gaussian_log_density;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Mode, Model, ParamStore, Prediction};
use crate::rng::{derive_seed, rng_for, Stream};
use crate::tensor::{Tape, Tensor};

pub const LOSS_LOG_HEADER: &str = "step,total,recon,kl_z,kl_w";

fn default_lr() -> f64 {
    1e-3
}
fn default_clip() -> f64 {
    10.0
}

/// Optimisation settings of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    #[serde(default)]
    pub eval_every: u64,
    pub seed: u64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Cycle through this many fixed tasks instead of drawing fresh ones.
    #[serde(default)]
    pub task_pool: Option<u64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::validation("train.steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("train.batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::validation("train.lr", "must be positive"));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::validation("train.clip_norm", "must be non-negative"));
        }
        if self.task_pool == Some(0) {
            return Err(Error::validation("train.task_pool", "must be at least 1"));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update. Every gradient is checked before any parameter moves.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::precondition("adam_step", format!("no gradient for {name}")))?;
            if g.shape() != p.shape() {
                return Err(Error::shape("adam_step", format!("gradient shape of {name}")));
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::numeric("adam_step", format!("gradient of {name}[{i}] is {}", g.data()[i])));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = grads[name].data();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((theta, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *theta -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Batch-mean loss components of one step. `total` is
/// `(recon + kl_z) + kl_w` in floating point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub total: f64,
    pub recon: f64,
    pub kl_z: f64,
    pub kl_w: f64,
}

impl LossRecord {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.total, self.recon, self.kl_z, self.kl_w)
    }
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_LOG_HEADER) {
        return Err(Error::Parse { line: 1, detail: format!("expected header {LOSS_LOG_HEADER}") });
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let line = i as u64 + 2;
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Parse { line, detail: format!("malformed row {l:?}") };
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(LossRecord {
                step: f[0].parse().map_err(|_| bad())?,
                total: num(f[1])?,
                recon: num(f[2])?,
                kl_z: num(f[3])?,
                kl_w: num(f[4])?,
            })
        })
        .collect()
}

/// Where and how a run executes.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for `checkpoint.json` and `loss.csv`; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Worker threads for the tasks of a batch; results do not depend on it.
    pub threads: usize,
    /// Optimiser state and step count to continue from.
    pub resume: Option<(AdamState, u64)>,
}

pub struct TrainOutput {
    pub log: Vec<LossRecord>,
    pub adam: AdamState,
    pub steps_done: u64,
}

struct TaskResult {
    grads: BTreeMap<String, Tensor>,
    parts: [f64; 4],
}

fn task_gradients(model: &Model, task: &Task, noise_seed: u64) -> Result<TaskResult> {
    let mut rng = crate::rng::rng_from_seed(noise_seed);
    let noises = model.draw_loss_noise(task, &mut rng);
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let parts = model.loss(&mut tape, &bound, task, &noises)?;
    let mut g = tape.backward(parts.total)?;
    let values = [tape.item(parts.total), tape.item(parts.recon), tape.item(parts.kl_z), tape.item(parts.kl_w)];
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("train", format!("non-finite loss components {values:?}")));
    }
    Ok(TaskResult { grads: bound.gradients(&mut g), parts: values })
}

/// Runs `f` over `items` on up to `threads` scoped threads, keeping order.
fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker thread panicked")).collect()
    })
}

/// Trains `model` in place.
pub fn train(model: &mut Model, source: &dyn TaskSource, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutput> {
    cfg.validate()?;
    let (mut adam, start) = match &opts.resume {
        Some((a, s)) => (a.clone(), *s),
        None => (AdamState::new(cfg.lr), 0),
    };
    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("loss.csv");
            if start == 0 {
                let mut f = BufWriter::new(File::create(&path)?);
                writeln!(f, "{LOSS_LOG_HEADER}")?;
                Some(f)
            } else {
                Some(BufWriter::new(OpenOptions::new().append(true).open(&path)?))
            }
        }
        None => None,
    };
    let mut pool_cache: BTreeMap<u64, Task> = BTreeMap::new();
    let mut log = Vec::with_capacity((cfg.steps.saturating_sub(start)) as usize);
    let b = cfg.batch_size as u64;
    for step in start..cfg.steps {
        let mut tasks = Vec::with_capacity(cfg.batch_size);
        for j in 0..b {
            let i = step * b + j;
            let key = cfg.task_pool.map_or(i, |p| i % p);
            let task = match pool_cache.get(&key) {
                Some(t) => t.clone(),
                None => {
                    let t = source.task(derive_seed(cfg.seed, Stream::TrainTask, key))?;
                    if cfg.task_pool.is_some() {
                        pool_cache.insert(key, t.clone());
                    }
                    t
                }
            };
            tasks.push((task, derive_seed(cfg.seed, Stream::TrainNoise, i)));
        }
        let results = parallel_map(&tasks, opts.threads, |(t, s)| task_gradients(model, t, *s));
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut sums = [0.0; 4];
        for r in results {
            let r = r.map_err(|e| match e {
                Error::Numeric { op, detail } => Error::Numeric { op, detail: format!("step {step}: {detail}") },
                other => other,
            })?;
            for (k, v) in sums.iter_mut().zip(r.parts) {
                *k += v;
            }
            for (name, g) in r.grads {
                match grads.get_mut(&name) {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, x)| *a += x),
                    None => {
                        grads.insert(name, g);
                    }
                }
            }
        }
        let inv = 1.0 / b as f64;
        let wd = model.config.weight_decay;
        for (name, g) in grads.iter_mut() {
            let p = model.params.get(name).expect("gradient for unknown parameter");
            for (gi, &pi) in g.data_mut().iter_mut().zip(p.data()) {
                *gi = *gi * inv + wd * pi;
            }
        }
        if cfg.clip_norm > 0.0 {
            let norm = grads.values().map(Tensor::squared_norm).sum::<f64>().sqrt();
            if norm > cfg.clip_norm {
                let s = cfg.clip_norm / norm;
                grads.values_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
            }
        }
        adam.step(&mut model.params, &grads).map_err(|e| match e {
            Error::Numeric { op, detail } => Error::Numeric { op, detail: format!("step {step}: {detail}") },
            other => other,
        })?;
        let (recon, kl_z, kl_w) = (sums[1] * inv, sums[2] * inv, sums[3] * inv);
        let rec = LossRecord { step, total: (recon + kl_z) + kl_w, recon, kl_z, kl_w };
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", rec.csv_line())?;
        }
        log.push(rec);
        let done = step + 1;
        if let Some(dir) = &opts.out_dir {
            if (cfg.eval_every > 0 && done % cfg.eval_every == 0) || done == cfg.steps {
                if let Some(f) = log_file.as_mut() {
                    f.flush()?;
                }
                Checkpoint::new(model, Some(adam.clone()), done).save(&dir.join("checkpoint.json"))?;
            }
        }
    }
    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }
    Ok(TrainOutput { log, adam, steps_done: cfg.steps })
}

/// Trailing moving average at every position; the first `window − 1`
/// entries average over what is available.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

/// Arithmetic mean.
pub fn window_mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StdErr {
    pub context_ll: f64,
    pub target_ll: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskScore {
    pub context_ll: f64,
    pub target_ll: f64,
    pub target_rmse: f64,
}

/// Mean per-point log-likelihoods over held-out tasks.
///
/// `target_ll` averages over target points that are not context points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kernel: String,
    pub context_ll: f64,
    pub target_ll: f64,
    pub stderr: StdErr,
    pub n_tasks: usize,
    /// Root mean squared error of the predictive mean on non-context targets, averaged over tasks.
    pub target_rmse: f64,
    #[serde(skip)]
    pub per_task: Vec<TaskScore>,
}

fn mean_and_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Per-point log-likelihoods (summed over output dimensions) of `pred` on the targets of `task`.
pub fn pointwise_ll(task: &Task, pred: &Prediction) -> Vec<f64> {
    (0..task.n_target())
        .map(|i| {
            let (y, mu, s) = (task.y_target.row(i), pred.mu.row(i), pred.sigma.row(i));
            (0..y.len()).map(|d| gaussian_log_density(y[d], mu[d], s[d])).sum()
        })
        .collect()
}

pub fn score_task(task: &Task, pred: &Prediction) -> TaskScore {
    let ll = pointwise_ll(task, pred);
    let nc = task.n_context();
    let extra = &ll[nc..];
    let (target_ll, target_rmse) = if extra.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let se: f64 = task
            .extra_indices()
            .flat_map(|i| task.y_target.row(i).iter().zip(pred.mu.row(i)).map(|(a, b)| (a - b) * (a - b)).collect::<Vec<_>>())
            .sum();
        (window_mean(extra), (se / (extra.len() * task.d_y()) as f64).sqrt())
    };
    TaskScore { context_ll: window_mean(&ll[..nc]), target_ll, target_rmse }
}

/// Scores an arbitrary predictor on `n_tasks` tasks drawn with `seed`.
pub fn evaluate_with(
    predictor: impl Fn(&Task, u64) -> Result<Prediction>,
    source: &dyn TaskSource,
    n_tasks: usize,
    seed: u64,
) -> Result<EvalReport> {
    if n_tasks == 0 {
        return Err(Error::validation("n_tasks", "must be at least 1"));
    }
    let mut per_task = Vec::with_capacity(n_tasks);
    for i in 0..n_tasks as u64 {
        let task = source.task(derive_seed(seed, Stream::EvalTask, i))?;
        let pred = predictor(&task, derive_seed(seed, Stream::EvalNoise, i))?;
        let s = score_task(&task, &pred);
        if !s.context_ll.is_finite() || !s.target_ll.is_finite() {
            return Err(Error::numeric("evaluate", format!("non-finite log-likelihood on task {i}")));
        }
        per_task.push(s);
    }
    let (context_ll, se_c) = mean_and_stderr(&per_task.iter().map(|s| s.context_ll).collect::<Vec<_>>());
    let (target_ll, se_t) = mean_and_stderr(&per_task.iter().map(|s| s.target_ll).collect::<Vec<_>>());
    Ok(EvalReport {
        kernel: source.name(),
        context_ll,
        target_ll,
        stderr: StdErr { context_ll: se_c, target_ll: se_t },
        n_tasks,
        target_rmse: window_mean(&per_task.iter().map(|s| s.target_rmse).collect::<Vec<_>>()),
        per_task,
    })
}

/// The paper's protocol: one stochastic forward pass per task.
pub fn evaluate(model: &Model, source: &dyn TaskSource, n_tasks: usize, seed: u64, mode: Mode) -> Result<EvalReport> {
    let probe = source.task(derive_seed(seed, Stream::EvalTask, 0))?;
    if probe.d_x() != model.config.d_x || probe.d_y() != model.config.d_y {
        return Err(Error::validation(
            "checkpoint",
            format!(
                "model expects d_x = {}, d_y = {} but {} tasks have d_x = {}, d_y = {}",
                model.config.d_x,
                model.config.d_y,
                source.name(),
                probe.d_x(),
                probe.d_y()
            ),
        ));
    }
    evaluate_with(|task, s| model.predict_task(task, mode, s), source, n_tasks, seed)
}

/// Seeded generator for reporting-side randomness.
pub fn report_rng(seed: u64, index: u64) -> rand_chacha::ChaCha8Rng {
    rng_for(seed, Stream::Report, index)
}

/// Loads a checkpoint and the optimiser state needed to resume it.
pub fn resume_from(path: &Path) -> Result<(Model, Option<(AdamState, u64)>)> {
    let ck = Checkpoint::load(path)?;
    let model = ck.model()?;
    Ok((model, ck.optimizer.map(|a| (a, ck.step))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_identity() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::scalar(1.0));
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::scalar(-0.3));
        let mut adam = AdamState::new(1e-3);
        adam.step(&mut p, &g).unwrap();
        let want = 1.0 + 1e-3 * 0.3 / (0.3 + 1e-8);
        assert!((p.get("a").unwrap().item() - want).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::scalar(2.5));
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::scalar(0.0));
        let mut adam = AdamState::new(1e-3);
        adam.step(&mut p, &g).unwrap();
        assert_eq!(p.get("a").unwrap().item(), 2.5);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_rejects_nan_without_moving() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::scalar(2.5));
        p.insert("b", Tensor::scalar(1.0));
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::scalar(1.0));
        g.insert("b".to_string(), Tensor::scalar(f64::NAN));
        let mut adam = AdamState::new(1e-3);
        let err = adam.step(&mut p, &g).unwrap_err();
        assert!(err.is_numeric() && err.to_string().contains('b'));
        assert_eq!(p.get("a").unwrap().item(), 2.5);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn moving_average_windows() {
        let ma = moving_average(&[1.0, 2.0, 3.0, 4.0], 2);
        assert_eq!(ma, vec![1.0, 1.5, 2.5, 3.5]);
    }

    #[test]
    fn loss_line_round_trips() {
        let r = LossRecord { step: 3, total: 0.1 + 0.2, recon: 1.0 / 3.0, kl_z: 0.0, kl_w: 2e-300 };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.csv");
        fs::write(&path, format!("{LOSS_LOG_HEADER}\n{}\n", r.csv_line())).unwrap();
        assert_eq!(read_loss_log(&path).unwrap(), vec![r]);
    }

    #[test]
    fn stderr_of_constant_is_zero() {
        assert_eq!(mean_and_stderr(&[2.0, 2.0, 2.0]), (2.0, 0.0));
        let (m, s) = mean_and_stderr(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
