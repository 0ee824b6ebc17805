use rand::Rng;
use rand_distr::{Open01, StandardNormal};

use super::layers::{linear, mlp_forward, MlpSpec};
use super::params::{Bound, ParamStore};
use super::{Family, LambdaRule, ModelConfig};
use crate::data::Task;
use crate::distributions::{
    gaussian_log_likelihood, gaussian_rsample, kl_diag_gaussian_var, kl_weibull_gamma_var, weibull_rsample,
    DiagGaussianParams, GammaParams, WeibullParams,
};
use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};
use crate::tensor::special::gamma;
use crate::tensor::{Tape, Tensor, Var};

const LATENT_SIGMA_MIN: f64 = 0.1;
const ALPHA_FLOOR: f64 = 1e-4;
const LAMBDA_FLOOR: f64 = 1e-10;

/// Which latent distribution feeds the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// `z ~ q(z | X, Y)`; target outputs are required.
    Train,
    /// `z ~ q(z | X_c, Y_c)` and one draw of attention noise.
    Eval,
    /// Distribution means in place of samples. Not part of the paper's protocol.
    EvalMean,
}

/// Reparameterisation noise for one forward pass.
///
/// `attn` holds one `[n_target × n_context]` matrix of `Unif(0, 1)` draws per
/// head, with columns in the caller's context order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Noise {
    pub z: Option<Tensor>,
    pub attn: Option<Vec<Tensor>>,
}

impl Noise {
    /// Draws all the noise `config` needs for a task of the given size.
    pub fn draw(config: &ModelConfig, n_target: usize, n_context: usize, rng: &mut impl Rng) -> Self {
        let z = config.family.has_latent().then(|| {
            let data = (0..config.d_h).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            Tensor::from_parts(vec![1, config.d_h], data)
        });
        let attn = (config.family == Family::Npsa).then(|| {
            (0..config.heads)
                .map(|_| {
                    let data = (0..n_target * n_context).map(|_| rng.sample::<f64, _>(Open01)).collect();
                    Tensor::from_parts(vec![n_target, n_context], data)
                })
                .collect()
        });
        Self { z, attn }
    }

    /// Noise with every attention cell at `1 − e^{−1}`, where the unit
    /// Weibull draw equals one for any shape.
    pub fn fixed_point(config: &ModelConfig, n_target: usize, n_context: usize) -> Self {
        let z = config.family.has_latent().then(|| Tensor::zeros(&[1, config.d_h]));
        let e = 1.0 - (-1f64).exp();
        let attn = (config.family == Family::Npsa)
            .then(|| vec![Tensor::full(&[n_target, n_context], e); config.heads]);
        Self { z, attn }
    }

    /// Reorders attention-noise columns: column `j` of the result is column
    /// `order[j]` of `self`.
    pub fn select_context(&self, order: &[usize]) -> Self {
        Self {
            z: self.z.clone(),
            attn: self.attn.as_ref().map(|hs| hs.iter().map(|h| h.select_cols(order)).collect()),
        }
    }
}

/// Tape handles of the attention block.
#[derive(Clone, Debug)]
pub struct AttnTrace {
    /// Per-head row-stochastic weights `[n × m]`, canonical context order.
    pub weights: Vec<Var>,
    /// Per-head softmax weights before sampling.
    pub w_standard: Vec<Var>,
    /// Per-head Weibull scales (NPSA only).
    pub lambda: Vec<Var>,
    /// Prior shapes `[1 × m]` (NPSA only).
    pub alpha: Option<Var>,
    /// Mean over heads and rows of the row-summed attention divergence.
    pub kl_total: Option<Var>,
    /// `r_i` for every target, `[n × d_h]`.
    pub local_rep: Var,
}

/// Tape handles of the latent path.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub z: Var,
    pub q_context: DiagGaussianParams,
    pub q_target: Option<DiagGaussianParams>,
    pub kl_z: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub mu: Var,
    pub sigma: Var,
    pub latent: Option<LatentVars>,
    pub attn: Option<AttnTrace>,
    /// Position `j` of the canonical context order holds caller index `perm[j]`.
    pub perm: Vec<usize>,
}

/// Sampled attention with its variational and prior parameters, read off a tape.
#[derive(Clone, Debug)]
pub struct StochAttnOutput {
    pub weights: Vec<Tensor>,
    pub lambda: Vec<Tensor>,
    pub alpha: Tensor,
    pub kl_total: f64,
    pub local_rep: Tensor,
}

#[derive(Clone, Debug)]
pub struct LatentOutput {
    pub z: Tensor,
    pub q_target: Option<(Tensor, Tensor)>,
    pub q_context: (Tensor, Tensor),
    pub kl_z: Option<f64>,
}

impl Forward {
    pub fn stoch_attn_output(&self, tape: &Tape) -> Option<StochAttnOutput> {
        let a = self.attn.as_ref()?;
        Some(StochAttnOutput {
            weights: a.weights.iter().map(|&v| tape.value(v).clone()).collect(),
            lambda: a.lambda.iter().map(|&v| tape.value(v).clone()).collect(),
            alpha: tape.value(a.alpha?).clone(),
            kl_total: tape.item(a.kl_total?),
            local_rep: tape.value(a.local_rep).clone(),
        })
    }

    pub fn latent_output(&self, tape: &Tape) -> Option<LatentOutput> {
        let l = self.latent?;
        let pair = |q: DiagGaussianParams| (tape.value(q.mu).clone(), tape.value(q.sigma).clone());
        Some(LatentOutput {
            z: tape.value(l.z).clone(),
            q_target: l.q_target.map(pair),
            q_context: pair(l.q_context),
            kl_z: l.kl_z.map(|v| tape.item(v)),
        })
    }
}

/// Loss of one task split into the logged components; `total` is built as
/// `(recon + kl_z) + kl_w` on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub recon: Var,
    pub kl_z: Var,
    pub kl_w: Var,
}

/// Predictive means and standard deviations for every target row.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mu: Tensor,
    pub sigma: Tensor,
    /// Per-head attention weights, columns in the caller's context order.
    pub attention: Option<Vec<Tensor>>,
}

/// Context order that does not depend on how the caller listed the points:
/// lexicographic on `(x, y)` rows, ties kept in input order.
pub fn canonical_order(x: &Tensor, y: &Tensor) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.rows()).collect();
    idx.sort_by(|&a, &b| {
        x.row(a)
            .iter()
            .chain(y.row(a))
            .zip(x.row(b).iter().chain(y.row(b)))
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

/// A model: its configuration and named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Fresh parameters: Glorot-uniform weights, zero biases, unit layer-norm gain.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, Stream::Init, 0);
        let mut params = ParamStore::new();
        let c = &config;
        let pair_in = c.d_x + c.d_y;
        match c.family {
            Family::Cnp => {
                MlpSpec::new(c.l_pre, pair_in, c.d_h, c.d_h).init(&mut rng, &mut params, "det.pre");
                MlpSpec::new(c.l_post, c.d_h, c.d_h, c.d_h).init(&mut rng, &mut params, "det.post");
            }
            _ => {
                MlpSpec::new(c.l_pre, pair_in, c.d_h, c.d_h).init(&mut rng, &mut params, "lat.pre");
                MlpSpec::new(c.l_post, c.d_h, c.d_h, 2 * c.d_h).init(&mut rng, &mut params, "lat.post");
            }
        }
        if c.family.has_attention() {
            MlpSpec::new(2, c.d_x, c.d_h, c.d_h).init(&mut rng, &mut params, "att.qk");
            MlpSpec::new(c.l_pre, pair_in, c.d_h, c.d_h).init(&mut rng, &mut params, "att.val");
            for name in ["att.wq", "att.wk", "att.wv", "att.out"] {
                params.add_linear(&mut rng, name, c.d_h, c.d_h);
            }
            params.insert("att.ln.gain", Tensor::full(&[1, c.d_h], 1.0));
            params.insert("att.ln.bias", Tensor::zeros(&[1, c.d_h]));
            if c.family == Family::Npsa {
                MlpSpec::new(2, c.d_h, c.d_h, 1).init(&mut rng, &mut params, "att.prior");
            }
        }
        MlpSpec::new(c.l_dec, c.decoder_input(), c.d_h, 2 * c.d_y).init(&mut rng, &mut params, "dec");
        Ok(Self { config, params })
    }

    /// Wraps loaded parameters after checking them against a fresh layout.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        reference.params.check_compatible(&params)?;
        Ok(Self { config, params })
    }

    fn check_inputs(&self, xc: &Tensor, yc: &Tensor, xt: &Tensor, yt: Option<&Tensor>) -> Result<()> {
        let c = &self.config;
        let ok = |t: &Tensor, cols: usize| t.shape().len() == 2 && t.cols() == cols;
        if !ok(xc, c.d_x) || !ok(yc, c.d_y) || !ok(xt, c.d_x) || yt.is_some_and(|y| !ok(y, c.d_y)) {
            return Err(Error::shape("forward", format!("inputs must have d_x = {} and d_y = {} columns", c.d_x, c.d_y)));
        }
        if xc.rows() != yc.rows() || yt.is_some_and(|y| y.rows() != xt.rows()) {
            return Err(Error::shape("forward", "input and output row counts differ"));
        }
        Ok(())
    }

    /// One pass through the network. `noise.attn` columns follow the
    /// caller's context order.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Bound,
        xc: &Tensor,
        yc: &Tensor,
        xt: &Tensor,
        yt: Option<&Tensor>,
        mode: Mode,
        noise: &Noise,
    ) -> Result<Forward> {
        self.check_inputs(xc, yc, xt, yt)?;
        let c = &self.config;
        let perm = canonical_order(xc, yc);
        let xc = tape.constant(xc.select_rows(&perm));
        let yc = tape.constant(yc.select_rows(&perm));
        let noise = noise.select_context(&perm);
        let n = xt.rows();
        let xt_t = xt.clone();
        let xt = tape.constant(xt_t);
        let pairs_c = tape.concat_cols(&[xc, yc])?;

        let latent = if c.family.has_latent() {
            Some(self.latent_path(tape, params, pairs_c, xt, yt, mode, &noise)?)
        } else {
            None
        };
        let attn = if c.family.has_attention() {
            Some(self.attention(tape, params, xc, pairs_c, xt, mode, &noise)?)
        } else {
            None
        };

        let mut parts = Vec::with_capacity(3);
        match c.family {
            Family::Cnp => {
                let h = mlp_forward(tape, params, "det.pre", &MlpSpec::new(c.l_pre, c.d_x + c.d_y, c.d_h, c.d_h), pairs_c)?;
                let h = tape.mean_rows(h)?;
                let r = mlp_forward(tape, params, "det.post", &MlpSpec::new(c.l_post, c.d_h, c.d_h, c.d_h), h)?;
                parts.push(tape.repeat_rows(r, n)?);
            }
            _ => {
                let z = latent.as_ref().map(|l| l.z).ok_or_else(|| Error::precondition("forward", "missing latent"))?;
                parts.push(tape.repeat_rows(z, n)?);
                if let Some(a) = &attn {
                    parts.push(a.local_rep);
                }
            }
        }
        parts.push(xt);
        let dec_in = tape.concat_cols(&parts)?;
        let out = mlp_forward(tape, params, "dec", &MlpSpec::new(c.l_dec, c.decoder_input(), c.d_h, 2 * c.d_y), dec_in)?;
        let mu = tape.slice_cols(out, 0, c.d_y)?;
        let raw = tape.slice_cols(out, c.d_y, c.d_y)?;
        let sp = tape.softplus(raw)?;
        let sigma = tape.scale(sp, 1.0 - c.sigma_floor)?;
        let sigma = tape.add_scalar(sigma, c.sigma_floor)?;
        Ok(Forward { mu, sigma, latent, attn, perm })
    }

    fn encode_latent(&self, tape: &mut Tape, params: &Bound, pairs: Var) -> Result<DiagGaussianParams> {
        let c = &self.config;
        let h = mlp_forward(tape, params, "lat.pre", &MlpSpec::new(c.l_pre, c.d_x + c.d_y, c.d_h, c.d_h), pairs)?;
        let h = tape.mean_rows(h)?;
        let out = mlp_forward(tape, params, "lat.post", &MlpSpec::new(c.l_post, c.d_h, c.d_h, 2 * c.d_h), h)?;
        let mu = tape.slice_cols(out, 0, c.d_h)?;
        let raw = tape.slice_cols(out, c.d_h, c.d_h)?;
        let s = tape.sigmoid(raw)?;
        let s = tape.scale(s, 1.0 - LATENT_SIGMA_MIN)?;
        let sigma = tape.add_scalar(s, LATENT_SIGMA_MIN)?;
        Ok(DiagGaussianParams { mu, sigma })
    }

    #[allow(clippy::too_many_arguments)]
    fn latent_path(
        &self,
        tape: &mut Tape,
        params: &Bound,
        pairs_c: Var,
        xt: Var,
        yt: Option<&Tensor>,
        mode: Mode,
        noise: &Noise,
    ) -> Result<LatentVars> {
        let q_context = self.encode_latent(tape, params, pairs_c)?;
        let z_noise = || noise.z.as_ref().ok_or_else(|| Error::precondition("forward", "latent noise missing"));
        match mode {
            Mode::Train => {
                let yt = yt.ok_or_else(|| Error::precondition("forward", "training mode needs target outputs"))?;
                let yt = tape.constant(yt.clone());
                let pairs_t = tape.concat_cols(&[xt, yt])?;
                let q_target = self.encode_latent(tape, params, pairs_t)?;
                let z = gaussian_rsample(tape, &q_target, z_noise()?)?;
                let kl = kl_diag_gaussian_var(tape, &q_target, &q_context)?;
                Ok(LatentVars { z, q_context, q_target: Some(q_target), kl_z: Some(kl) })
            }
            Mode::Eval => {
                let z = gaussian_rsample(tape, &q_context, z_noise()?)?;
                Ok(LatentVars { z, q_context, q_target: None, kl_z: None })
            }
            Mode::EvalMean => Ok(LatentVars { z: q_context.mu, q_context, q_target: None, kl_z: None }),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape,
        params: &Bound,
        xc: Var,
        pairs_c: Var,
        xt: Var,
        mode: Mode,
        noise: &Noise,
    ) -> Result<AttnTrace> {
        let c = &self.config;
        let qk = MlpSpec::new(2, c.d_x, c.d_h, c.d_h);
        let emb_t = mlp_forward(tape, params, "att.qk", &qk, xt)?;
        let emb_c = mlp_forward(tape, params, "att.qk", &qk, xc)?;
        let values = mlp_forward(tape, params, "att.val", &MlpSpec::new(c.l_pre, c.d_x + c.d_y, c.d_h, c.d_h), pairs_c)?;
        let q = linear(tape, params, "att.wq", emb_t)?;
        let k = linear(tape, params, "att.wk", emb_c)?;
        let v = linear(tape, params, "att.wv", values)?;

        let sampling = match (c.family, mode) {
            (Family::Npsa, Mode::EvalMean) => Some(None),
            (Family::Npsa, _) => {
                let hs = noise.attn.as_ref().ok_or_else(|| Error::precondition("forward", "attention noise missing"))?;
                if hs.len() != c.heads {
                    return Err(Error::shape("forward", format!("{} noise heads for {} heads", hs.len(), c.heads)));
                }
                Some(Some(hs.as_slice()))
            }
            _ => None,
        };
        let alpha = match sampling {
            Some(_) => {
                let a = mlp_forward(tape, params, "att.prior", &MlpSpec::new(2, c.d_h, c.d_h, 1), emb_c)?;
                let a = tape.softplus(a)?;
                let a = tape.add_scalar(a, ALPHA_FLOOR)?;
                Some(tape.transpose(a)?)
            }
            None => None,
        };
        multihead_attention(tape, params, c, q, k, v, sampling, alpha)
    }

    /// Reconstruction and divergence terms of one task.
    ///
    /// With `iwae_samples > 1` the loss is `−log mean exp` of one evidence
    /// bound per noise draw, divided by the target count; its components are
    /// then not separable and are logged as reconstruction only.
    pub fn loss(&self, tape: &mut Tape, params: &Bound, task: &Task, noises: &[Noise]) -> Result<LossParts> {
        let c = &self.config;
        if noises.is_empty() {
            return Err(Error::precondition("loss", "no noise draws"));
        }
        let n = task.n_target() as f64;
        let sampled_kl = c.family == Family::Npsa && c.use_attn_kl;
        let zero_z = tape.scalar(0.0);
        let zero_w = tape.scalar(0.0);
        let mut elbos = Vec::with_capacity(noises.len());
        let mut single = None;
        for noise in noises.iter().take(c.iwae_samples.max(1)) {
            let f = self.forward(
                tape,
                params,
                &task.x_context,
                &task.y_context,
                &task.x_target,
                Some(&task.y_target),
                Mode::Train,
                noise,
            )?;
            let y = tape.constant(task.y_target.clone());
            let ll = gaussian_log_likelihood(tape, y, f.mu, f.sigma)?;
            let kl_z = f.latent.and_then(|l| l.kl_z);
            let kl_w = if sampled_kl { f.attn.as_ref().and_then(|a| a.kl_total) } else { None };
            if c.iwae_samples <= 1 {
                let mean_ll = tape.mean(ll)?;
                let recon = tape.neg(mean_ll)?;
                let kl_z = match kl_z {
                    Some(v) => tape.scale(v, 1.0 / n)?,
                    None => zero_z,
                };
                let kl_w = match kl_w {
                    Some(v) => tape.scale(v, c.attn_kl_weight)?,
                    None => zero_w,
                };
                single = Some((recon, kl_z, kl_w));
                break;
            }
            let mut elbo = tape.sum(ll)?;
            if let Some(v) = kl_z {
                elbo = tape.sub(elbo, v)?;
            }
            if let Some(v) = kl_w {
                let w = tape.scale(v, n * c.attn_kl_weight)?;
                elbo = tape.sub(elbo, w)?;
            }
            elbos.push(elbo);
        }
        let (recon, kl_z, kl_w) = match single {
            Some(parts) => parts,
            None => {
                if elbos.len() != c.iwae_samples {
                    return Err(Error::precondition(
                        "loss",
                        format!("{} noise draws for {} importance samples", elbos.len(), c.iwae_samples),
                    ));
                }
                let row = tape.concat_cols(&elbos)?;
                let shift = tape.value(row).data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if !shift.is_finite() {
                    return Err(Error::numeric("loss", "non-finite importance weight"));
                }
                let centred = tape.add_scalar(row, -shift)?;
                let e = tape.exp(centred)?;
                let m = tape.mean(e)?;
                let lme = tape.log(m)?;
                let lme = tape.add_scalar(lme, shift)?;
                (tape.scale(lme, -1.0 / n)?, zero_z, zero_w)
            }
        };
        let partial = tape.add(recon, kl_z)?;
        let total = tape.add(partial, kl_w)?;
        Ok(LossParts { total, recon, kl_z, kl_w })
    }

    /// Noise draws for [`Model::loss`]: one per importance sample.
    pub fn draw_loss_noise(&self, task: &Task, rng: &mut impl Rng) -> Vec<Noise> {
        (0..self.config.iwae_samples.max(1))
            .map(|_| Noise::draw(&self.config, task.n_target(), task.n_context(), rng))
            .collect()
    }

    /// Predictive distribution at `xt` with one draw of every noise source.
    ///
    /// Noise is drawn in canonical context order, so the result does not
    /// depend on how the context points are listed.
    pub fn predict(
        &self,
        xc: &Tensor,
        yc: &Tensor,
        xt: &Tensor,
        yt: Option<&Tensor>,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Prediction> {
        self.check_inputs(xc, yc, xt, yt)?;
        let perm = canonical_order(xc, yc);
        let canon = Noise::draw(&self.config, xt.rows(), xc.rows(), rng);
        let mut inverse = vec![0; perm.len()];
        for (j, &p) in perm.iter().enumerate() {
            inverse[p] = j;
        }
        let noise = canon.select_context(&inverse);
        let mut tape = Tape::new();
        let params = self.params.bind_constant(&mut tape);
        let f = self.forward(&mut tape, &params, xc, yc, xt, yt, mode, &noise)?;
        let attention = f.attn.as_ref().map(|a| {
            a.weights.iter().map(|&w| tape.value(w).select_cols(&inverse)).collect()
        });
        let mu = tape.value(f.mu).clone();
        let sigma = tape.value(f.sigma).clone();
        if !mu.is_finite() || !sigma.is_finite() {
            return Err(Error::numeric("predict", "non-finite prediction"));
        }
        Ok(Prediction { mu, sigma, attention })
    }

    /// [`Model::predict`] on a task in evaluation mode.
    pub fn predict_task(&self, task: &Task, mode: Mode, seed: u64) -> Result<Prediction> {
        let mut rng = crate::rng::rng_from_seed(seed);
        let yt = (mode == Mode::Train).then_some(&task.y_target);
        self.predict(&task.x_context, &task.y_context, &task.x_target, yt, mode, &mut rng)
    }
}

/// Multi-head cross attention followed by an output projection and layer
/// normalisation.
///
/// `sampling` is `None` for deterministic softmax attention, `Some(None)` for
/// the mean of the Weibull weights, and `Some(Some(noise))` for sampled
/// weights; `alpha` (`[1 × m]`) is required whenever `sampling` is set.
#[allow(clippy::too_many_arguments)]
pub fn multihead_attention(
    tape: &mut Tape,
    params: &Bound,
    config: &ModelConfig,
    q: Var,
    k: Var,
    v: Var,
    sampling: Option<Option<&[Tensor]>>,
    alpha: Option<Var>,
) -> Result<AttnTrace> {
    let (n, d) = tape.value(q).dims2()?;
    let (m, dk) = tape.value(k).dims2()?;
    if m == 0 || tape.value(v).rows() != m {
        return Err(Error::precondition("attention", "keys and values need the same positive count"));
    }
    if dk != d || tape.value(v).cols() != d || d != config.d_h {
        return Err(Error::shape("attention", "query, key and value widths must equal d_h"));
    }
    let dh = config.d_head();
    let gamma_k = gamma(1.0 + 1.0 / config.k_shape);
    let lambda_factor = match config.lambda_rule {
        LambdaRule::Divide => 1.0 / gamma_k,
        LambdaRule::Multiply => gamma_k,
    };
    let alpha_rep = match (sampling, alpha) {
        (Some(_), Some(a)) => Some(tape.repeat_rows(a, n)?),
        (Some(_), None) => return Err(Error::precondition("attention", "sampled attention needs prior shapes")),
        _ => None,
    };
    let mut heads = Vec::with_capacity(config.heads);
    let mut weights = Vec::with_capacity(config.heads);
    let mut w_standard = Vec::with_capacity(config.heads);
    let mut lambdas = Vec::new();
    let mut kl_sum: Option<Var> = None;
    for h in 0..config.heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let logits = tape.matmul_bt(qh, kh)?;
        let logits = tape.scale(logits, 1.0 / (dh as f64).sqrt())?;
        let ws = tape.softmax_rows(logits)?;
        w_standard.push(ws);
        let w = match sampling {
            None => ws,
            Some(eps) => {
                let lam = tape.scale(ws, lambda_factor)?;
                let lam = tape.clamp_min(lam, LAMBDA_FLOOR)?;
                lambdas.push(lam);
                let a = alpha_rep.expect("checked above");
                let kl = kl_weibull_gamma_var(
                    tape,
                    &WeibullParams { k: config.k_shape, lambda: lam },
                    &GammaParams { alpha: a, beta: config.beta },
                )?;
                let kl = tape.sum(kl)?;
                kl_sum = Some(match kl_sum {
                    Some(acc) => tape.add(acc, kl)?,
                    None => kl,
                });
                let raw = match eps {
                    Some(noise) => {
                        weibull_rsample(tape, &WeibullParams { k: config.k_shape, lambda: lam }, &noise[h])?
                    }
                    None => tape.scale(lam, gamma_k)?,
                };
                tape.normalize_rows(raw)?
            }
        };
        weights.push(w);
        heads.push(tape.matmul(w, vh)?);
    }
    let cat = tape.concat_cols(&heads)?;
    let out = linear(tape, params, "att.out", cat)?;
    let gain = params.var("att.ln.gain")?;
    let bias = params.var("att.ln.bias")?;
    let local_rep = tape.layer_norm_rows(out, gain, bias)?;
    let kl_total = match kl_sum {
        Some(s) => Some(tape.scale(s, 1.0 / (config.heads * n) as f64)?),
        None => None,
    };
    Ok(AttnTrace { weights, w_standard, lambda: lambdas, alpha, kl_total, local_rep })
}
