//! Branch/trunk operator network with a two-node Gaussian output head.
//!
//! The branch net encodes the input function, the trunk net encodes the query
//! location, and their outputs are merged (elementwise product by default, or
//! the scalar dot product) before a linear head produces `(mu, delta)` with
//! `sigma = max(softplus(delta), sigma_floor)`.
//!
//! Flat parameter layout: `[branch | trunk | head]`.

use std::f64::consts::PI;
use std::ops::Range;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::dataset::QuerySet;
use crate::error::{ensure_len, Error, Result};
use crate::nn::{self, Activation, LayerSpec, NetSpec};
use crate::variational::{
    accumulate_draw, complexity_cost, complexity_cost_grad, sample_params, sampled_complexity_cost,
    sampled_complexity_cost_grad, sigmoid, softplus, NoiseDraw, VariationalParams,
};

pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-6;
pub const DEFAULT_N_TILDE: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeMode {
    /// `B ⊙ T` feeds the head (`merge_dim` inputs).
    Hadamard,
    /// `⟨B, T⟩` feeds the head (one input).
    Dot,
}

impl MergeMode {
    pub(crate) fn code(self) -> u8 {
        match self {
            MergeMode::Hadamard => 0,
            MergeMode::Dot => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(MergeMode::Hadamard),
            1 => Ok(MergeMode::Dot),
            other => Err(Error::Format(format!("unknown merge mode {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepONetSpec {
    pub branch: NetSpec,
    pub trunk: NetSpec,
    pub merge: MergeMode,
    pub sigma_floor: f64,
}

impl DeepONetSpec {
    pub fn new(branch: NetSpec, trunk: NetSpec, merge: MergeMode, sigma_floor: f64) -> Result<Self> {
        let (Some(b), Some(t)) = (branch.out_dim(), trunk.out_dim()) else {
            return Err(Error::Argument("branch and trunk nets must have at least one layer".into()));
        };
        if b != t {
            return Err(Error::Argument(format!(
                "branch output ({b}) and trunk output ({t}) must have the same width"
            )));
        }
        if !(sigma_floor > 0.0 && sigma_floor.is_finite()) {
            return Err(Error::Argument(format!("sigma floor {sigma_floor} must be positive")));
        }
        Ok(Self {
            branch,
            trunk,
            merge,
            sigma_floor,
        })
    }

    /// Equal-width ReLU branch and trunk nets with `depth` layers each.
    pub fn standard(sensors: usize, y_dim: usize, width: usize, depth: usize) -> Result<Self> {
        Self::new(
            NetSpec::dense(sensors, width, depth, Activation::Relu)?,
            NetSpec::dense(y_dim, width, depth, Activation::Relu)?,
            MergeMode::Hadamard,
            DEFAULT_SIGMA_FLOOR,
        )
    }

    pub fn with_merge(mut self, merge: MergeMode) -> Self {
        self.merge = merge;
        self
    }

    pub fn merge_dim(&self) -> usize {
        self.branch.out_dim().expect("validated")
    }

    pub fn sensors(&self) -> usize {
        self.branch.in_dim().expect("validated")
    }

    pub fn y_dim(&self) -> usize {
        self.trunk.in_dim().expect("validated")
    }

    pub fn head(&self) -> LayerSpec {
        let input = match self.merge {
            MergeMode::Hadamard => self.merge_dim(),
            MergeMode::Dot => 1,
        };
        LayerSpec::new(input, 2, Activation::Linear)
    }

    pub fn head_net(&self) -> NetSpec {
        NetSpec::new(vec![self.head()]).expect("single layer")
    }

    pub fn param_count(&self) -> usize {
        self.branch.param_count() + self.trunk.param_count() + self.head().param_count()
    }

    pub fn ranges(&self) -> (Range<usize>, Range<usize>, Range<usize>) {
        let b = 0..self.branch.param_count();
        let t = b.end..b.end + self.trunk.param_count();
        let h = t.end..t.end + self.head().param_count();
        (b, t, h)
    }

    pub fn init_params(&self, seed: u64) -> VariationalParams {
        VariationalParams::init(&[&self.branch, &self.trunk, &self.head_net()], seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianOutput {
    pub mu: f64,
    pub sigma: f64,
}

/// `-log N(s; mu, sigma²)`.
pub fn gaussian_nll(out: GaussianOutput, s: f64) -> f64 {
    let r = s - out.mu;
    0.5 * (2.0 * PI * out.sigma * out.sigma).ln() + r * r / (2.0 * out.sigma * out.sigma)
}

/// How `sigma` enters the likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Likelihood {
    /// Use the head's predicted `sigma`.
    Heteroscedastic,
    /// Ignore the `delta` node and use a constant `sigma` (deterministic baseline).
    FixedSigma(f64),
}

#[derive(Debug, Clone)]
pub struct ModelCache {
    branch: nn::BatchCache,
    trunk: nn::BatchCache,
    head: nn::BatchCache,
    merged: Array2<f64>,
}

fn merge(spec: &DeepONetSpec, b: ArrayView2<'_, f64>, t: ArrayView2<'_, f64>, pairs: &[(usize, usize)]) -> Array2<f64> {
    let h = spec.merge_dim();
    match spec.merge {
        MergeMode::Hadamard => {
            let mut m = Array2::<f64>::zeros((pairs.len(), h));
            for (r, &(ui, yi)) in pairs.iter().enumerate() {
                let (br, tr) = (b.row(ui), t.row(yi));
                let mut row = m.row_mut(r);
                for k in 0..h {
                    row[k] = br[k] * tr[k];
                }
            }
            m
        }
        MergeMode::Dot => {
            let mut m = Array2::<f64>::zeros((pairs.len(), 1));
            for (r, &(ui, yi)) in pairs.iter().enumerate() {
                m[[r, 0]] = b.row(ui).dot(&t.row(yi));
            }
            m
        }
    }
}

fn batch_forward(spec: &DeepONetSpec, params: &[f64], q: &QuerySet) -> Result<ModelCache> {
    ensure_len("model parameters", spec.param_count(), params.len())?;
    ensure_len("branch input width", spec.sensors(), q.inputs.ncols())?;
    ensure_len("trunk input width", spec.y_dim(), q.locations.ncols())?;
    for &(ui, yi) in &q.pairs {
        if ui >= q.inputs.nrows() || yi >= q.locations.nrows() {
            return Err(Error::Argument(format!("query pair ({ui}, {yi}) out of range")));
        }
    }
    let (rb, rt, rh) = spec.ranges();
    let branch = nn::forward_batch(&spec.branch, &params[rb], q.inputs.view())?;
    let trunk = nn::forward_batch(&spec.trunk, &params[rt], q.locations.view())?;
    let merged = merge(spec, branch.output().view(), trunk.output().view(), &q.pairs);
    let head = nn::forward_batch(&spec.head_net(), &params[rh], merged.view())?;
    Ok(ModelCache {
        branch,
        trunk,
        head,
        merged,
    })
}

fn sigma_of(spec: &DeepONetSpec, delta: f64) -> f64 {
    softplus(delta).max(spec.sigma_floor)
}

/// `(mu, sigma)` per query row.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

pub fn evaluate(spec: &DeepONetSpec, params: &[f64], q: &QuerySet) -> Result<BatchOutput> {
    let cache = batch_forward(spec, params, q)?;
    let out = cache.head.output();
    Ok(BatchOutput {
        mu: out.column(0).to_vec(),
        sigma: out.column(1).iter().map(|&d| sigma_of(spec, d)).collect(),
    })
}

/// Backpropagates `(∂L/∂mu, ∂L/∂delta)` per row into `grad`.
fn batch_backward(
    spec: &DeepONetSpec,
    params: &[f64],
    q: &QuerySet,
    cache: &ModelCache,
    d_head: ArrayView2<'_, f64>,
    grad: &mut [f64],
) -> Result<()> {
    let (rb, rt, rh) = spec.ranges();
    let d_merged = nn::backward_batch(&spec.head_net(), &params[rh.clone()], &cache.head, d_head, &mut grad[rh], true)?
        .expect("input gradient requested");
    let b = cache.branch.output();
    let t = cache.trunk.output();
    let mut db = Array2::<f64>::zeros(b.dim());
    let mut dt = Array2::<f64>::zeros(t.dim());
    let h = spec.merge_dim();
    for (r, &(ui, yi)) in q.pairs.iter().enumerate() {
        match spec.merge {
            MergeMode::Hadamard => {
                for k in 0..h {
                    let g = d_merged[[r, k]];
                    db[[ui, k]] += g * t[[yi, k]];
                    dt[[yi, k]] += g * b[[ui, k]];
                }
            }
            MergeMode::Dot => {
                let g = d_merged[[r, 0]];
                for k in 0..h {
                    db[[ui, k]] += g * t[[yi, k]];
                    dt[[yi, k]] += g * b[[ui, k]];
                }
            }
        }
    }
    nn::backward_batch(&spec.branch, &params[rb.clone()], &cache.branch, db.view(), &mut grad[rb], false)?;
    nn::backward_batch(&spec.trunk, &params[rt.clone()], &cache.trunk, dt.view(), &mut grad[rt], false)?;
    Ok(())
}

/// Summed negative log-likelihood over the query rows; adds its gradient
/// with respect to the sampled parameters into `grad`.
pub fn nll_and_grad(
    spec: &DeepONetSpec,
    params: &[f64],
    q: &QuerySet,
    targets: &[f64],
    likelihood: Likelihood,
    grad: &mut [f64],
) -> Result<f64> {
    ensure_len("targets", q.len(), targets.len())?;
    ensure_len("gradient buffer", spec.param_count(), grad.len())?;
    let cache = batch_forward(spec, params, q)?;
    let out = cache.head.output();
    let mut d_head = Array2::<f64>::zeros((q.len(), 2));
    let mut total = 0.0;
    for (r, &s) in targets.iter().enumerate() {
        let mu = out[[r, 0]];
        let delta = out[[r, 1]];
        let resid = s - mu;
        match likelihood {
            Likelihood::Heteroscedastic => {
                let sp = softplus(delta);
                let sigma = sp.max(spec.sigma_floor);
                let inv_var = 1.0 / (sigma * sigma);
                total += gaussian_nll(GaussianOutput { mu, sigma }, s);
                d_head[[r, 0]] = -resid * inv_var;
                if sp > spec.sigma_floor {
                    let d_sigma = 1.0 / sigma - resid * resid * inv_var / sigma;
                    d_head[[r, 1]] = d_sigma * sigmoid(delta);
                }
            }
            Likelihood::FixedSigma(sigma) => {
                total += gaussian_nll(GaussianOutput { mu, sigma }, s);
                d_head[[r, 0]] = -resid / (sigma * sigma);
            }
        }
    }
    if total.is_finite() {
        batch_backward(spec, params, q, &cache, d_head.view(), grad)?;
    }
    Ok(total)
}

/// Single query forward pass.
pub fn model_forward(spec: &DeepONetSpec, params: &[f64], u: &[f64], y: &[f64]) -> Result<(GaussianOutput, ModelCache)> {
    let q = single_query(u, y);
    let cache = batch_forward(spec, params, &q)?;
    let out = cache.head.output();
    let g = GaussianOutput {
        mu: out[[0, 0]],
        sigma: sigma_of(spec, out[[0, 1]]),
    };
    Ok((g, cache))
}

/// Gradient of a scalar function of `(mu, sigma)` for a single query.
pub fn model_backward(
    spec: &DeepONetSpec,
    params: &[f64],
    u: &[f64],
    y: &[f64],
    cache: &ModelCache,
    d_mu: f64,
    d_sigma: f64,
) -> Result<Vec<f64>> {
    let q = single_query(u, y);
    let delta = cache.head.output()[[0, 1]];
    let d_delta = if softplus(delta) > spec.sigma_floor {
        d_sigma * sigmoid(delta)
    } else {
        0.0
    };
    let d_head = Array2::from_shape_vec((1, 2), vec![d_mu, d_delta]).expect("shape");
    let mut grad = vec![0.0; spec.param_count()];
    batch_backward(spec, params, &q, cache, d_head.view(), &mut grad)?;
    Ok(grad)
}

impl ModelCache {
    pub fn merged(&self) -> &Array2<f64> {
        &self.merged
    }

    pub fn branch_output(&self) -> &Array2<f64> {
        self.branch.output()
    }

    pub fn trunk_output(&self) -> &Array2<f64> {
        self.trunk.output()
    }
}

fn single_query(u: &[f64], y: &[f64]) -> QuerySet {
    QuerySet {
        inputs: Array2::from_shape_vec((1, u.len()), u.to_vec()).expect("row"),
        locations: Array2::from_shape_vec((1, y.len()), y.to_vec()).expect("row"),
        pairs: vec![(0, 0)],
    }
}

/// Complexity-cost estimator used inside the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlEstimator {
    ClosedForm,
    /// `log q(theta) - log p(theta)` averaged over the loss draws.
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Multiplier on the complexity cost; zero drops it.
    pub kl_scale: f64,
    pub kl_estimator: KlEstimator,
    pub likelihood: Likelihood,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kl_scale: 1.0,
            kl_estimator: KlEstimator::ClosedForm,
            likelihood: Likelihood::Heteroscedastic,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElboResult {
    /// Objective value that the gradients differentiate.
    pub loss: f64,
    /// Closed-form complexity cost (unscaled).
    pub kl: f64,
    /// Likelihood cost: summed NLL averaged over the noise draws.
    pub nll: f64,
    pub grad_mu: Vec<f64>,
    pub grad_delta: Vec<f64>,
}

/// `kl_scale · KL(q || p) + (1/Ñ) Σ_l Σ_rows nll(model(theta_l), s)` and its
/// gradient with respect to `(mu, delta)`.
///
/// Draws are evaluated in parallel and reduced in draw order, so the result
/// does not depend on the thread count.
pub fn elbo_loss(
    spec: &DeepONetSpec,
    vp: &VariationalParams,
    q: &QuerySet,
    targets: &[f64],
    noises: &[NoiseDraw],
    cfg: &LossConfig,
) -> Result<ElboResult> {
    if noises.is_empty() {
        return Err(Error::Argument("at least one noise draw is required".into()));
    }
    ensure_len("variational parameters", spec.param_count(), vp.len())?;
    let p = vp.len();
    let sampled_kl = cfg.kl_scale != 0.0 && cfg.kl_estimator == KlEstimator::Sampled;

    let per_draw: Vec<Result<(f64, Vec<f64>, f64)>> = noises
        .par_iter()
        .map(|noise| {
            let theta = sample_params(vp, noise)?;
            let mut g = vec![0.0; p];
            let nll = nll_and_grad(spec, &theta, q, targets, cfg.likelihood, &mut g)?;
            let mut kl_draw = 0.0;
            if sampled_kl {
                kl_draw = sampled_complexity_cost(vp, noise)?;
                let (via_theta, _) = sampled_complexity_cost_grad(vp, &theta);
                for (gi, ti) in g.iter_mut().zip(via_theta) {
                    *gi += cfg.kl_scale * ti;
                }
            }
            Ok((nll, g, kl_draw))
        })
        .collect();

    let inv_n = 1.0 / noises.len() as f64;
    let sig: Vec<f64> = vp.delta.iter().map(|&d| sigmoid(d)).collect();
    let mut grad_mu = vec![0.0; p];
    let mut grad_delta = vec![0.0; p];
    let mut nll_sum = 0.0;
    let mut kl_sampled = 0.0;
    for (draw, (res, noise)) in per_draw.into_iter().zip(noises).enumerate() {
        let (nll, g, kl_draw) = res?;
        if !nll.is_finite() || !kl_draw.is_finite() {
            return Err(Error::NonFiniteLoss { draw });
        }
        nll_sum += nll;
        kl_sampled += kl_draw;
        accumulate_draw(&g, &noise.kappa, &sig, inv_n, &mut grad_mu, &mut grad_delta);
    }
    let nll = nll_sum * inv_n;
    let kl = complexity_cost(vp);

    let kl_term = if cfg.kl_scale == 0.0 {
        0.0
    } else {
        match cfg.kl_estimator {
            KlEstimator::ClosedForm => {
                let (dmu, ddelta) = complexity_cost_grad(vp);
                for i in 0..p {
                    grad_mu[i] += cfg.kl_scale * dmu[i];
                    grad_delta[i] += cfg.kl_scale * ddelta[i];
                }
                kl
            }
            KlEstimator::Sampled => {
                let (_, direct) = sampled_complexity_cost_grad(vp, &[]);
                for i in 0..p {
                    grad_delta[i] += cfg.kl_scale * direct[i];
                }
                kl_sampled * inv_n
            }
        }
    };
    let loss = cfg.kl_scale * kl_term + nll;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { draw: 0 });
    }
    Ok(ElboResult {
        loss,
        kl,
        nll,
        grad_mu,
        grad_delta,
    })
}
