//! Task generators: Gaussian-process regression curves, Lotka–Volterra
//! trajectories and the hare–lynx series.
//!
//! Every generator is a pure function of its specification and a seed.

mod gp;
mod lv;

pub use gp::{
    gp_sample, kernel_eval, make_regression_task, make_regression_task_with_counts, KernelFamily, KernelSpec,
    RegressionSource,
};
pub use lv::{
    load_hare_lynx, lv_rates, lv_simulate, make_lv_task, read_trajectory_csv, record_grid, write_hare_lynx,
    write_trajectory_csv, HareLynxSource, LvSeries, LvSimSource, LvState, PAPER_THETA,
};

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where a task came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub source: String,
    pub noisy: bool,
    pub seed: u64,
}

/// One episode. The first `n_context` target rows are the context set.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub x_context: Tensor,
    pub y_context: Tensor,
    pub x_target: Tensor,
    pub y_target: Tensor,
    pub meta: TaskMeta,
}

impl Task {
    /// Builds a task whose context is the first `n_context` target rows.
    pub fn from_targets(x_target: Tensor, y_target: Tensor, n_context: usize, meta: TaskMeta) -> Result<Self> {
        x_target.dims2()?;
        y_target.dims2()?;
        if x_target.rows() != y_target.rows() {
            return Err(Error::shape("task", "x and y row counts differ"));
        }
        if n_context == 0 || n_context > x_target.rows() {
            return Err(Error::precondition(
                "task",
                format!("{n_context} context points out of {} targets", x_target.rows()),
            ));
        }
        let idx: Vec<usize> = (0..n_context).collect();
        Ok(Self {
            x_context: x_target.select_rows(&idx),
            y_context: y_target.select_rows(&idx),
            x_target,
            y_target,
            meta,
        })
    }

    pub fn n_context(&self) -> usize {
        self.x_context.rows()
    }

    pub fn n_target(&self) -> usize {
        self.x_target.rows()
    }

    pub fn d_x(&self) -> usize {
        self.x_target.cols()
    }

    pub fn d_y(&self) -> usize {
        self.y_target.cols()
    }

    /// Target rows that are not context points.
    pub fn extra_indices(&self) -> std::ops::Range<usize> {
        self.n_context()..self.n_target()
    }

    /// True when the context rows are exactly the leading target rows.
    pub fn context_is_prefix(&self) -> bool {
        (0..self.n_context()).all(|i| {
            self.x_context.row(i) == self.x_target.row(i) && self.y_context.row(i) == self.y_target.row(i)
        })
    }
}

/// A distribution over tasks, sampled by seed.
pub trait TaskSource: Sync {
    fn task(&self, seed: u64) -> Result<Task>;

    /// Short label used in reports.
    fn name(&self) -> String;
}

/// Writes a task as CSV with columns `role,x_1..,y_1..`; roles are
/// `context` and `extra`.
pub fn write_task_csv<W: Write>(task: &Task, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["role".to_string()];
    header.extend((1..=task.d_x()).map(|i| format!("x_{i}")));
    header.extend((1..=task.d_y()).map(|i| format!("y_{i}")));
    w.write_record(&header).map_err(csv_io)?;
    for i in 0..task.n_target() {
        let role = if i < task.n_context() { "context" } else { "extra" };
        let mut rec = vec![role.to_string()];
        rec.extend(task.x_target.row(i).iter().map(f64::to_string));
        rec.extend(task.y_target.row(i).iter().map(f64::to_string));
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the format of [`write_task_csv`]. Context rows must come first.
pub fn read_task_csv<R: Read>(input: R, meta: TaskMeta) -> Result<Task> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(|e| parse_err(1, e))?.clone();
    let d_x = header.iter().filter(|h| h.starts_with("x_")).count();
    let d_y = header.iter().filter(|h| h.starts_with("y_")).count();
    if header.get(0) != Some("role") || d_x == 0 || d_y == 0 || header.len() != 1 + d_x + d_y {
        return Err(Error::Parse { line: 1, detail: "expected header role,x_1..,y_1..".into() });
    }
    let (mut xs, mut ys, mut n_context, mut seen_extra) = (Vec::new(), Vec::new(), 0, false);
    for (i, rec) in r.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| parse_err(line, e))?;
        match &rec[0] {
            "context" if !seen_extra => n_context += 1,
            "context" => return Err(Error::Parse { line, detail: "context row after extra rows".into() }),
            "extra" => seen_extra = true,
            other => return Err(Error::Parse { line, detail: format!("unknown role {other:?}") }),
        }
        for (j, field) in rec.iter().enumerate().skip(1) {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse { line, detail: format!("bad number {field:?}") })?;
            if j <= d_x { xs.push(v) } else { ys.push(v) }
        }
    }
    let n = xs.len() / d_x;
    if n == 0 {
        return Err(Error::Parse { line: 2, detail: "no rows".into() });
    }
    Task::from_targets(Tensor::matrix(n, d_x, xs)?, Tensor::matrix(n, d_y, ys)?, n_context, meta)
}

pub(crate) fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

pub(crate) fn parse_err(line: u64, e: csv::Error) -> Error {
    let line = e.position().map_or(line, |p| p.line());
    Error::Parse { line, detail: e.to_string() }
}
