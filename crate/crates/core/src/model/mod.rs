//! CNP, NP, ANP and NPSA assemblies.
//!
//! Every family shares the same building blocks: a multi-layer perceptron,
//! mean aggregation over the context set, a diagonal-Gaussian latent path
//! and multi-head cross attention. NPSA replaces the deterministic attention
//! weights with Weibull samples and regularises them against a Gamma prior
//! whose shape is computed from the keys.

mod checkpoint;
mod layers;
mod network;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
pub use layers::{mlp_forward, MlpSpec};
pub use network::{
    canonical_order, multihead_attention, AttnTrace, Forward, LatentOutput, LatentVars, LossParts, Mode, Model,
    Noise, Prediction, StochAttnOutput,
};
pub use params::{Bound, ParamStore};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Cnp,
    Np,
    Anp,
    Npsa,
}

impl Family {
    pub fn has_latent(self) -> bool {
        !matches!(self, Family::Cnp)
    }

    pub fn has_attention(self) -> bool {
        matches!(self, Family::Anp | Family::Npsa)
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Cnp => "cnp",
            Family::Np => "np",
            Family::Anp => "anp",
            Family::Npsa => "npsa",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cnp" => Ok(Family::Cnp),
            "np" => Ok(Family::Np),
            "anp" => Ok(Family::Anp),
            "npsa" => Ok(Family::Npsa),
            other => Err(Error::validation("family", format!("unknown family {other:?}"))),
        }
    }
}

/// How the Weibull scale is derived from the deterministic attention weight.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaRule {
    /// `λ = w / Γ(1 + 1/k)`, so the sampled weight has mean `w`.
    #[default]
    Divide,
    /// `λ = w · Γ(1 + 1/k)`.
    Multiply,
}

fn default_l_pre() -> usize {
    3
}
fn default_l_post() -> usize {
    1
}
fn default_l_dec() -> usize {
    3
}
fn default_k_shape() -> f64 {
    300.0
}
fn default_one() -> f64 {
    1.0
}
fn default_sigma_floor() -> f64 {
    0.01
}
fn default_iwae() -> usize {
    1
}
fn default_true() -> bool {
    true
}

/// Architecture and objective hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub d_x: usize,
    pub d_y: usize,
    pub d_h: usize,
    pub heads: usize,
    #[serde(default = "default_l_pre")]
    pub l_pre: usize,
    #[serde(default = "default_l_post")]
    pub l_post: usize,
    #[serde(default = "default_l_dec")]
    pub l_dec: usize,
    /// Weibull shape `k`.
    #[serde(default = "default_k_shape")]
    pub k_shape: f64,
    /// Gamma prior rate `β`.
    #[serde(default = "default_one")]
    pub beta: f64,
    #[serde(default = "default_sigma_floor")]
    pub sigma_floor: f64,
    #[serde(default)]
    pub lambda_rule: LambdaRule,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_iwae")]
    pub iwae_samples: usize,
    #[serde(default = "default_true")]
    pub use_attn_kl: bool,
    #[serde(default = "default_one")]
    pub attn_kl_weight: f64,
}

impl ModelConfig {
    /// Desk-scale defaults for one-dimensional regression.
    pub fn regression(family: Family) -> Self {
        Self {
            family,
            d_x: 1,
            d_y: 1,
            d_h: 64,
            heads: 8,
            l_pre: 3,
            l_post: 1,
            l_dec: 3,
            k_shape: 300.0,
            beta: 1.0,
            sigma_floor: 0.01,
            lambda_rule: LambdaRule::Divide,
            weight_decay: 0.0,
            iwae_samples: 1,
            use_attn_kl: true,
            attn_kl_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("d_x", self.d_x), ("d_y", self.d_y), ("d_h", self.d_h), ("heads", self.heads)];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::validation(format!("model.{name}"), "must be at least 1"));
            }
        }
        for (name, v) in [("l_pre", self.l_pre), ("l_post", self.l_post), ("l_dec", self.l_dec)] {
            if v == 0 {
                return Err(Error::validation(format!("model.{name}"), "must be at least 1"));
            }
        }
        if !self.d_h.is_multiple_of(self.heads) {
            return Err(Error::validation(
                "model.heads",
                format!("d_h = {} is not divisible by {} heads", self.d_h, self.heads),
            ));
        }
        if self.family.has_attention() && self.d_h < 2 {
            return Err(Error::validation("model.d_h", "attention needs d_h ≥ 2 for layer normalisation"));
        }
        if !(self.k_shape > 0.0 && self.k_shape.is_finite()) {
            return Err(Error::validation("model.k_shape", "must be positive"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::validation("model.beta", "must be positive"));
        }
        if !(self.sigma_floor > 0.0 && self.sigma_floor < 1.0) {
            return Err(Error::validation("model.sigma_floor", "must lie in (0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::validation("model.weight_decay", "must be non-negative"));
        }
        if self.iwae_samples == 0 {
            return Err(Error::validation("model.iwae_samples", "must be at least 1"));
        }
        if !(self.attn_kl_weight >= 0.0 && self.attn_kl_weight.is_finite()) {
            return Err(Error::validation("model.attn_kl_weight", "must be non-negative"));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_h / self.heads
    }

    pub(crate) fn decoder_input(&self) -> usize {
        match self.family {
            Family::Cnp | Family::Np => self.d_x + self.d_h,
            Family::Anp | Family::Npsa => self.d_x + 2 * self.d_h,
        }
    }
}
