//! Attention heatmaps, their diagonal statistics, prediction curves and the
//! sweep over the Weibull shape.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::data::{csv_io, make_regression_task_with_counts, parse_err, KernelSpec, Task};
use crate::error::{Error, Result};
use crate::model::{Family, Mode, Model};
use crate::rng::{derive_seed, rng_for, Stream};
use crate::tensor::Tensor;
use crate::training::{evaluate, moving_average, train, window_mean, TrainOptions};

/// Context points per task in simplified heatmaps.
pub const SIMPLIFIED_CONTEXT: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatmapMode {
    /// Every target row.
    Full,
    /// Only the target rows that are context points, giving a square matrix.
    Simplified,
}

impl std::str::FromStr for HeatmapMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(HeatmapMode::Full),
            "simplified" => Ok(HeatmapMode::Simplified),
            other => Err(Error::validation("mode", format!("expected full or simplified, got {other:?}"))),
        }
    }
}

/// Head-averaged attention with both axes sorted by feature value.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapMatrix {
    pub context_x: Vec<f64>,
    pub target_x: Vec<f64>,
    /// `weights[i][j]`: target `i` attending to context `j`.
    pub weights: Vec<Vec<f64>>,
    pub mode: HeatmapMode,
}

fn sorted_order(xs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    idx
}

/// Arranges a weight matrix given in task order. In simplified mode the
/// kept rows are `0..context_x.len()`, the targets that are context points.
pub fn arrange_heatmap(context_x: &[f64], target_x: &[f64], weights: &Tensor, mode: HeatmapMode) -> Result<HeatmapMatrix> {
    let (n, m) = weights.dims2()?;
    if m != context_x.len() || n != target_x.len() {
        return Err(Error::shape("heatmap", "weights do not match the axes"));
    }
    let rows: Vec<usize> = match mode {
        HeatmapMode::Full => (0..n).collect(),
        HeatmapMode::Simplified => {
            if n < m {
                return Err(Error::precondition("heatmap", "fewer targets than context points"));
            }
            (0..m).collect()
        }
    };
    let kept_x: Vec<f64> = rows.iter().map(|&i| target_x[i]).collect();
    let row_order: Vec<usize> = sorted_order(&kept_x).into_iter().map(|k| rows[k]).collect();
    let col_order = sorted_order(context_x);
    Ok(HeatmapMatrix {
        context_x: col_order.iter().map(|&j| context_x[j]).collect(),
        target_x: row_order.iter().map(|&i| target_x[i]).collect(),
        weights: row_order.iter().map(|&i| col_order.iter().map(|&j| weights.get(i, j)).collect()).collect(),
        mode,
    })
}

/// Attention of one evaluation-mode pass, averaged over heads.
pub fn export_heatmap(model: &Model, task: &Task, mode: HeatmapMode, seed: u64) -> Result<HeatmapMatrix> {
    if !model.config.family.has_attention() {
        return Err(Error::Unsupported(format!("{} has no attention to export", model.config.family.name())));
    }
    if model.config.d_x != 1 {
        return Err(Error::Unsupported("heatmaps need one-dimensional inputs".into()));
    }
    let pred = model.predict_task(task, Mode::Eval, seed)?;
    let heads = pred.attention.ok_or_else(|| Error::Unsupported("no attention weights".into()))?;
    let mut avg = Tensor::zeros(heads[0].shape());
    for h in &heads {
        avg.data_mut().iter_mut().zip(h.data()).for_each(|(a, w)| *a += w);
    }
    let inv = 1.0 / heads.len() as f64;
    avg.data_mut().iter_mut().for_each(|a| *a *= inv);
    arrange_heatmap(task.x_context.data(), task.x_target.data(), &avg, mode)
}

/// First row `target_x,<context xs>`, then `target_x,w_1..w_m` per target.
pub fn write_heatmap_csv<W: Write>(h: &HeatmapMatrix, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut head = vec!["target_x".to_string()];
    head.extend(h.context_x.iter().map(f64::to_string));
    w.write_record(&head).map_err(csv_io)?;
    for (x, row) in h.target_x.iter().zip(&h.weights) {
        let mut rec = vec![x.to_string()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_heatmap_csv<R: Read>(input: R, mode: HeatmapMode) -> Result<HeatmapMatrix> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut records = r.records();
    let num = |line: u64, s: &str| s.parse::<f64>().map_err(|_| Error::Parse { line, detail: format!("bad number {s:?}") });
    let head = records.next().ok_or(Error::Parse { line: 1, detail: "empty file".into() })?.map_err(|e| parse_err(1, e))?;
    if head.get(0) != Some("target_x") {
        return Err(Error::Parse { line: 1, detail: "first field must be target_x".into() });
    }
    let context_x = head.iter().skip(1).map(|s| num(1, s)).collect::<Result<Vec<_>>>()?;
    let (mut target_x, mut weights) = (Vec::new(), Vec::new());
    for (i, rec) in records.enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| parse_err(line, e))?;
        let vals = rec.iter().map(|s| num(line, s)).collect::<Result<Vec<_>>>()?;
        target_x.push(vals[0]);
        weights.push(vals[1..].to_vec());
    }
    Ok(HeatmapMatrix { context_x, target_x, weights, mode })
}

/// Mean and population variance of the diagonal and off-diagonal cells.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiagStats {
    pub diag_mean: f64,
    pub diag_var: f64,
    pub offdiag_mean: f64,
    pub offdiag_var: f64,
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let mean = window_mean(v);
    (mean, v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64)
}

/// Statistics over the cells of one or more simplified heatmaps.
pub fn diag_stats_pooled(maps: &[HeatmapMatrix]) -> Result<DiagStats> {
    let (mut diag, mut off) = (Vec::new(), Vec::new());
    for h in maps {
        let m = h.context_x.len();
        if h.mode != HeatmapMode::Simplified || h.weights.len() != m || h.weights.iter().any(|r| r.len() != m) {
            return Err(Error::precondition("diag_stats", "needs a square simplified heatmap"));
        }
        if m < 2 {
            return Err(Error::precondition("diag_stats", "needs at least two context points"));
        }
        for (i, row) in h.weights.iter().enumerate() {
            for (j, &w) in row.iter().enumerate() {
                if i == j { diag.push(w) } else { off.push(w) }
            }
        }
    }
    if diag.is_empty() {
        return Err(Error::precondition("diag_stats", "no heatmaps"));
    }
    let (diag_mean, diag_var) = mean_var(&diag);
    let (offdiag_mean, offdiag_var) = mean_var(&off);
    Ok(DiagStats { diag_mean, diag_var, offdiag_mean, offdiag_var })
}

pub fn diag_stats(h: &HeatmapMatrix) -> Result<DiagStats> {
    diag_stats_pooled(std::slice::from_ref(h))
}

/// Tasks with [`SIMPLIFIED_CONTEXT`] context points and 20 extra targets.
pub fn heatmap_task(kernel: &KernelSpec, noise: Option<&KernelSpec>, seed: u64) -> Result<Task> {
    let mut rng = rng_for(seed, Stream::Report, 0);
    let mut t = make_regression_task_with_counts(kernel, noise, SIMPLIFIED_CONTEXT, 20, &mut rng)?;
    t.meta.seed = seed;
    Ok(t)
}

/// Diagonal statistics pooled over `n_maps` simplified heatmaps.
pub fn heatmap_diag_stats(model: &Model, kernel: &KernelSpec, n_maps: usize, seed: u64) -> Result<DiagStats> {
    let maps = (0..n_maps as u64)
        .map(|i| {
            let task = heatmap_task(kernel, None, derive_seed(seed, Stream::Report, i))?;
            export_heatmap(model, &task, HeatmapMode::Simplified, derive_seed(seed, Stream::EvalNoise, i))
        })
        .collect::<Result<Vec<_>>>()?;
    diag_stats_pooled(&maps)
}

/// One row of a prediction export.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub x: f64,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// `grid` or `context`.
    pub role: &'static str,
    /// Observed outputs for context rows.
    pub y: Option<Vec<f64>>,
}

/// Predictive curve over `grid`; grid points that coincide with a context
/// input are marked `context`, and context points off the grid are appended.
pub fn export_predictions(model: &Model, task: &Task, grid: &[f64], seed: u64) -> Result<Vec<PredictionRow>> {
    if model.config.d_x != 1 {
        return Err(Error::Unsupported("prediction curves need one-dimensional inputs".into()));
    }
    let cx = task.x_context.data();
    let mut xs: Vec<f64> = grid.to_vec();
    xs.extend(cx.iter().filter(|x| !grid.contains(x)));
    if xs.is_empty() {
        return Err(Error::precondition("export_predictions", "empty grid"));
    }
    let xt = Tensor::matrix(xs.len(), 1, xs.clone())?;
    let mut rng = crate::rng::rng_from_seed(seed);
    let pred = model.predict(&task.x_context, &task.y_context, &xt, None, Mode::Eval, &mut rng)?;
    Ok(xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let ctx = cx.iter().position(|&c| c == x);
            PredictionRow {
                x,
                mu: pred.mu.row(i).to_vec(),
                sigma: pred.sigma.row(i).to_vec(),
                role: if ctx.is_some() { "context" } else { "grid" },
                y: ctx.map(|j| task.y_context.row(j).to_vec()),
            }
        })
        .collect())
}

/// CSV `x,mu,sigma,role,y`; with several outputs the value columns are
/// suffixed `_1.._d`.
pub fn write_predictions_csv<W: Write>(rows: &[PredictionRow], out: W) -> Result<()> {
    let d = rows.first().map_or(1, |r| r.mu.len());
    let names = |base: &str| -> Vec<String> {
        if d == 1 { vec![base.to_string()] } else { (1..=d).map(|i| format!("{base}_{i}")).collect() }
    };
    let mut w = csv::Writer::from_writer(out);
    let mut head = vec!["x".to_string()];
    head.extend(names("mu"));
    head.extend(names("sigma"));
    head.push("role".into());
    head.extend(names("y"));
    w.write_record(&head).map_err(csv_io)?;
    for r in rows {
        let mut rec = vec![r.x.to_string()];
        rec.extend(r.mu.iter().map(f64::to_string));
        rec.extend(r.sigma.iter().map(f64::to_string));
        rec.push(r.role.to_string());
        match &r.y {
            Some(y) => rec.extend(y.iter().map(f64::to_string)),
            None => rec.extend(std::iter::repeat_n(String::new(), d)),
        }
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub const SWEEP_HEADER: &str =
    "K,regularized,converged,final_loss,context_ll,target_ll,diag_mean,diag_var,offdiag_mean,offdiag_var";

/// One arm of the Weibull-shape sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub k: f64,
    pub regularized: bool,
    pub converged: bool,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub context_ll: f64,
    pub target_ll: f64,
    pub diag: DiagStats,
}

impl SweepRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.k,
            self.regularized,
            self.converged,
            self.final_loss,
            self.context_ll,
            self.target_ll,
            self.diag.diag_mean,
            self.diag.diag_var,
            self.diag.offdiag_mean,
            self.diag.offdiag_var
        )
    }
}

/// Averaging window for the convergence rule: 1000 steps, or a fifth of a
/// shorter run.
pub fn convergence_window(steps: usize) -> usize {
    1000.min((steps / 5).max(1))
}

/// `(initial, final, converged)`: converged when the final windowed mean
/// loss is at least half a nat below the initial one.
pub fn convergence(losses: &[f64]) -> (f64, f64, bool) {
    let w = convergence_window(losses.len());
    let first = window_mean(&losses[..w]);
    let last = *moving_average(losses, w).last().unwrap_or(&f64::NAN);
    (first, last, last < first - 0.5)
}

/// Heatmaps pooled per sweep arm.
pub const SWEEP_HEATMAPS: usize = 20;

/// Trains one arm per `(K, regularised)` pair, starting from the base
/// configuration, and scores each arm on the first evaluation kernel.
pub fn sweep_k(base: &RunConfig, k_list: &[f64], threads: usize, out_dir: Option<&Path>) -> Result<Vec<SweepRow>> {
    base.validate()?;
    if base.model.family != Family::Npsa {
        return Err(Error::validation("model.family", "the sweep varies the Weibull shape and needs npsa"));
    }
    if k_list.is_empty() {
        return Err(Error::validation("k_list", "needs at least one value"));
    }
    let source = base.train_source()?;
    let evals = base.eval_sources()?;
    let (eval_source, eval_kernel) = (&evals[0], base.eval_kernel(0)?);
    let mut rows = Vec::with_capacity(k_list.len() * 2);
    for &k in k_list {
        for regularized in [true, false] {
            let mut cfg = base.model.clone();
            cfg.k_shape = k;
            cfg.use_attn_kl = regularized;
            let mut model = Model::new(cfg, base.train.seed)?;
            let opts = TrainOptions {
                out_dir: out_dir.map(|d| d.join(format!("k{k}_{}", if regularized { "reg" } else { "noreg" }))),
                threads,
                resume: None,
            };
            let out = train(&mut model, source.as_ref(), &base.train, &opts)?;
            let losses: Vec<f64> = out.log.iter().map(|r| r.total).collect();
            let (initial_loss, final_loss, converged) = convergence(&losses);
            let report = evaluate(&model, eval_source.as_ref(), base.eval.n_tasks, base.eval.seed, Mode::Eval)?;
            let diag = heatmap_diag_stats(&model, &eval_kernel, SWEEP_HEATMAPS, base.eval.seed)?;
            rows.push(SweepRow {
                k,
                regularized,
                converged,
                initial_loss,
                final_loss,
                context_ll: report.context_ll,
                target_ll: report.target_ll,
                diag,
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> Result<()> {
    writeln!(out, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_line())?;
    }
    out.flush()?;
    Ok(())
}

/// Population variance of the diagonal means of a set of arms.
pub fn diag_mean_variance(rows: &[&SweepRow]) -> f64 {
    let v: Vec<f64> = rows.iter().map(|r| r.diag.diag_mean).collect();
    mean_var(&v).1
}
