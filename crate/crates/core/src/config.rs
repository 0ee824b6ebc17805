//! Run configuration files: strict JSON, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_hare_lynx, HareLynxSource, KernelSpec, LvSimSource, RegressionSource, TaskSource, PAPER_THETA};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Regression1d,
    Sim2real,
}

fn default_theta() -> [f64; 4] {
    PAPER_THETA
}
fn default_t_max() -> f64 {
    30.0
}
fn default_n_points() -> usize {
    100
}
fn default_max_events() -> usize {
    100_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LvConfig {
    #[serde(default = "default_theta")]
    pub theta: [f64; 4],
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    #[serde(default = "default_n_points")]
    pub n_points: usize,
    #[serde(default = "default_max_events")]
    pub max_events: usize,
}

impl Default for LvConfig {
    fn default() -> Self {
        Self { theta: PAPER_THETA, t_max: 30.0, n_points: 100, max_events: 100_000 }
    }
}

impl LvConfig {
    pub fn source(&self) -> LvSimSource {
        LvSimSource { theta: self.theta, t_max: self.t_max, n_points: self.n_points, max_events: self.max_events }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_kernel: Option<KernelSpec>,
    /// Additive noise process for training curves.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<KernelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lv: Option<LvConfig>,
}

fn default_kernels() -> Vec<String> {
    vec!["rbf".into(), "matern".into(), "periodic".into()]
}
fn default_n_tasks() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_kernels")]
    pub kernels: Vec<String>,
    #[serde(default = "default_n_tasks")]
    pub n_tasks: usize,
    #[serde(default)]
    pub seed: u64,
    /// Add the training noise process to evaluation curves.
    #[serde(default)]
    pub noisy: bool,
    /// Real series for sim2real evaluation; simulated tasks otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hare_lynx: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { kernels: default_kernels(), n_tasks: default_n_tasks(), seed: 0, noisy: false, hare_lynx: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parses and validates; errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            // missing fields are reported on the parent path
            let field = match missing_field(&inner.to_string()) {
                Some(name) if path == "." => name,
                Some(name) => format!("{path}.{name}"),
                None => path,
            };
            Error::validation(field, inner.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.model.d_x != 1 {
            return Err(Error::validation("model.d_x", "both experiments use one-dimensional inputs"));
        }
        match self.experiment {
            Experiment::Regression1d => {
                if self.model.d_y != 1 {
                    return Err(Error::validation("model.d_y", "regression1d has one output"));
                }
                self.data
                    .train_kernel
                    .as_ref()
                    .ok_or_else(|| Error::validation("data.train_kernel", "required for regression1d"))?
                    .validate()?;
                if let Some(n) = &self.data.noise {
                    n.validate()?;
                }
                if self.eval.kernels.is_empty() {
                    return Err(Error::validation("eval.kernels", "needs at least one kernel"));
                }
                for k in &self.eval.kernels {
                    KernelSpec::paper_test(k).map_err(|_| Error::validation("eval.kernels", format!("unknown kernel {k:?}")))?;
                }
            }
            Experiment::Sim2real => {
                if self.model.d_y != 2 {
                    return Err(Error::validation("model.d_y", "sim2real has two outputs"));
                }
                let lv = self.data.lv.as_ref().ok_or_else(|| Error::validation("data.lv", "required for sim2real"))?;
                if lv.theta.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
                    return Err(Error::validation("data.lv.theta", "rates must be positive"));
                }
                if !(lv.t_max > 0.0) || lv.n_points < 60 || lv.max_events == 0 {
                    return Err(Error::validation("data.lv", "needs t_max > 0, n_points ≥ 60, max_events ≥ 1"));
                }
            }
        }
        if self.eval.n_tasks == 0 {
            return Err(Error::validation("eval.n_tasks", "must be at least 1"));
        }
        Ok(())
    }

    pub fn train_source(&self) -> Result<Box<dyn TaskSource>> {
        Ok(match self.experiment {
            Experiment::Regression1d => Box::new(RegressionSource {
                kernel: self.data.train_kernel.ok_or_else(|| Error::validation("data.train_kernel", "missing"))?,
                noise: self.data.noise,
            }),
            Experiment::Sim2real => Box::new(self.data.lv.clone().unwrap_or_default().source()),
        })
    }

    /// Kernel behind the `i`-th evaluation source.
    pub fn eval_kernel(&self, i: usize) -> Result<KernelSpec> {
        match self.experiment {
            Experiment::Regression1d => KernelSpec::paper_test(
                self.eval.kernels.get(i).ok_or_else(|| Error::validation("eval.kernels", "index out of range"))?,
            ),
            Experiment::Sim2real => Err(Error::Unsupported("sim2real evaluation has no kernel".into())),
        }
    }

    pub fn eval_sources(&self) -> Result<Vec<Box<dyn TaskSource>>> {
        match self.experiment {
            Experiment::Regression1d => (0..self.eval.kernels.len())
                .map(|i| {
                    let noise = if self.eval.noisy { self.data.noise.or(Some(KernelSpec::paper_noise())) } else { None };
                    Ok(Box::new(RegressionSource { kernel: self.eval_kernel(i)?, noise }) as Box<dyn TaskSource>)
                })
                .collect(),
            Experiment::Sim2real => Ok(vec![match &self.eval.hare_lynx {
                Some(p) => Box::new(HareLynxSource { series: load_hare_lynx(p)? }),
                None => Box::new(self.data.lv.clone().unwrap_or_default().source()),
            }]),
        }
    }
}

fn missing_field(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("missing field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMOKE: &str = r#"{
        "experiment": "regression1d",
        "model": {"family": "npsa", "d_x": 1, "d_y": 1, "d_h": 16, "heads": 2},
        "train": {"steps": 10, "batch_size": 2, "seed": 1},
        "data": {"train_kernel": {"family": "rbf", "s": 3.0, "l": 3.0}}
    }"#;

    #[test]
    fn smoke_config_parses_with_defaults() {
        let c = RunConfig::from_json(SMOKE).unwrap();
        assert_eq!(c.eval.kernels.len(), 3);
        assert_eq!(c.model.k_shape, 300.0);
        assert_eq!(c.eval_sources().unwrap().len(), 3);
        let again = RunConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn missing_field_is_named() {
        let text = SMOKE.replace(r#""steps": 10, "#, "");
        match RunConfig::from_json(&text) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "train.steps"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_rejected_with_path() {
        let text = SMOKE.replace(r#""heads": 2"#, r#""heads": 2, "dropout": 0.1"#);
        match RunConfig::from_json(&text) {
            Err(Error::Validation { field, .. }) => assert!(field.starts_with("model"), "{field}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn experiment_shape_checks() {
        let text = SMOKE.replace("regression1d", "sim2real");
        assert!(matches!(RunConfig::from_json(&text), Err(Error::Validation { .. })));
        let text = SMOKE.replace(r#""data": {"train_kernel": {"family": "rbf", "s": 3.0, "l": 3.0}}"#, r#""data": {}"#);
        match RunConfig::from_json(&text) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "data.train_kernel"),
            other => panic!("{other:?}"),
        }
    }
}
