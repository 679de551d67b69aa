//! Mean-field Gaussian posterior over every scalar network parameter.
//!
//! Each parameter has a mean `mu` and a raw scale `delta` with standard
//! deviation `softplus(delta)`. Samples use the reparameterization
//! `theta = mu + softplus(delta) * kappa`, `kappa ~ N(0, 1)`, and the prior is
//! the standard normal.

use std::f64::consts::PI;

use rand_distr::{Distribution, Normal};

use crate::error::{ensure_len, Error, Result};
use crate::nn::NetSpec;
use crate::rng::{self, Purpose};

/// Initial posterior standard deviation.
pub const INIT_SIGMA: f64 = 0.05;

/// `log(1 + exp(x))`, switching to its asymptotes beyond ±30.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else if y < 1e-13 {
        y.ln()
    } else {
        y + (-(-y).exp_m1()).ln()
    }
}

/// Derivative of softplus, `1 / (exp(-x) + 1)`.
pub fn sigmoid(x: f64) -> f64 {
    1.0 / ((-x).exp() + 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams {
    pub mu: Vec<f64>,
    pub delta: Vec<f64>,
}

impl VariationalParams {
    pub fn new(mu: Vec<f64>, delta: Vec<f64>) -> Result<Self> {
        ensure_len("variational delta", mu.len(), delta.len())?;
        if mu.iter().chain(&delta).any(|v| !v.is_finite()) {
            return Err(Error::Domain("variational parameters must be finite".into()));
        }
        Ok(Self { mu, delta })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.delta.iter().map(|&d| softplus(d)).collect()
    }

    /// Glorot-scaled Gaussian means for weights, zero means for biases, and a
    /// uniform initial standard deviation of [`INIT_SIGMA`].
    pub fn init(nets: &[&NetSpec], seed: u64) -> Self {
        let mut mu = Vec::new();
        for (k, net) in nets.iter().enumerate() {
            for (layer_idx, (layer, off)) in net.layers().iter().zip(net.layout()).enumerate() {
                let std = (2.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let mut rng = rng::keyed(seed, Purpose::Init, k as u64, layer_idx as u64);
                mu.extend(off.weights.clone().map(|_| normal.sample(&mut rng)));
                mu.extend(off.bias.clone().map(|_| 0.0));
            }
        }
        let delta = vec![softplus_inv(INIT_SIGMA); mu.len()];
        Self { mu, delta }
    }
}

/// Standard-normal noise for one reparameterized draw.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub kappa: Vec<f64>,
    pub seed: u64,
    pub index: u64,
    pub draw: u64,
}

impl NoiseDraw {
    /// Noise keyed by `(seed, purpose, index, draw)`.
    pub fn generate(len: usize, seed: u64, purpose: Purpose, index: u64, draw: u64) -> Self {
        let mut r = rng::keyed(seed, purpose, index, draw);
        Self {
            kappa: rng::standard_normal_vec(&mut r, len),
            seed,
            index,
            draw,
        }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            kappa: vec![0.0; len],
            seed: 0,
            index: 0,
            draw: 0,
        }
    }

    pub fn from_kappa(kappa: Vec<f64>) -> Self {
        Self {
            kappa,
            seed: 0,
            index: 0,
            draw: 0,
        }
    }
}

pub fn sample_params(vp: &VariationalParams, noise: &NoiseDraw) -> Result<Vec<f64>> {
    ensure_len("noise draw", vp.len(), noise.kappa.len())?;
    Ok(vp
        .mu
        .iter()
        .zip(&vp.delta)
        .zip(&noise.kappa)
        .map(|((m, d), k)| m + softplus(*d) * k)
        .collect())
}

/// Closed-form `KL(q || N(0, I))`.
pub fn complexity_cost(vp: &VariationalParams) -> f64 {
    vp.mu
        .iter()
        .zip(&vp.delta)
        .map(|(&m, &d)| {
            let s = softplus(d);
            0.5 * (s * s + m * m - 1.0) - s.ln()
        })
        .sum()
}

/// Gradient of [`complexity_cost`] with respect to `(mu, delta)`.
pub fn complexity_cost_grad(vp: &VariationalParams) -> (Vec<f64>, Vec<f64>) {
    let dmu = vp.mu.clone();
    let ddelta = vp
        .delta
        .iter()
        .map(|&d| {
            let s = softplus(d);
            (s - 1.0 / s) * sigmoid(d)
        })
        .collect();
    (dmu, ddelta)
}

/// Single-draw estimate `log q(theta) - log p(theta)` at `theta = mu + sigma * kappa`.
pub fn sampled_complexity_cost(vp: &VariationalParams, noise: &NoiseDraw) -> Result<f64> {
    ensure_len("noise draw", vp.len(), noise.kappa.len())?;
    let half_log_2pi = 0.5 * (2.0 * PI).ln();
    Ok(vp
        .mu
        .iter()
        .zip(&vp.delta)
        .zip(&noise.kappa)
        .map(|((&m, &d), &k)| {
            let s = softplus(d);
            let theta = m + s * k;
            let log_q = -half_log_2pi - s.ln() - 0.5 * k * k;
            let log_p = -half_log_2pi - 0.5 * theta * theta;
            log_q - log_p
        })
        .sum())
}

/// Pathwise pieces of the sampled estimator's gradient: `(∂/∂theta, direct ∂/∂delta)`.
pub fn sampled_complexity_cost_grad(vp: &VariationalParams, theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let direct = vp
        .delta
        .iter()
        .map(|&d| -sigmoid(d) / softplus(d))
        .collect();
    (theta.to_vec(), direct)
}

/// Chain rule from `∂L/∂theta` to `(Δmu, Δdelta)`:
///
/// `Δmu = ∂L/∂theta + ∂L/∂mu`, `Δdelta = ∂L/∂theta · kappa / (exp(-delta) + 1) + ∂L/∂delta`.
pub fn backprop_variational(
    param_grad: &[f64],
    vp: &VariationalParams,
    noise: &NoiseDraw,
    direct_mu: &[f64],
    direct_delta: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = vp.len();
    ensure_len("parameter gradient", n, param_grad.len())?;
    ensure_len("noise draw", n, noise.kappa.len())?;
    ensure_len("direct mu gradient", n, direct_mu.len())?;
    ensure_len("direct delta gradient", n, direct_delta.len())?;
    let dmu = param_grad.iter().zip(direct_mu).map(|(g, d)| g + d).collect();
    let ddelta = (0..n)
        .map(|i| param_grad[i] * noise.kappa[i] * sigmoid(vp.delta[i]) + direct_delta[i])
        .collect();
    Ok((dmu, ddelta))
}

/// Accumulates `scale · ∂L/∂theta` from one draw into `(Δmu, Δdelta)`.
pub(crate) fn accumulate_draw(
    param_grad: &[f64],
    kappa: &[f64],
    sig_delta: &[f64],
    scale: f64,
    dmu: &mut [f64],
    ddelta: &mut [f64],
) {
    for i in 0..param_grad.len() {
        let g = scale * param_grad[i];
        dmu[i] += g;
        ddelta[i] += g * kappa[i] * sig_delta[i];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softplus_values() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(0.0) - 0.693147).abs() < 1e-6);
        assert!((softplus(100.0) - 100.0).abs() < 1e-12);
        let tiny = softplus(-100.0);
        assert!(tiny > 0.0);
        assert!((tiny - (-100f64).exp()).abs() <= 1e-15 * (-100f64).exp());
    }

    #[test]
    fn softplus_inverse_roundtrip() {
        for y in [1e-20, 1e-8, 0.05, 0.5, 1.0, 3.0, 29.0, 40.0] {
            let back = softplus(softplus_inv(y));
            assert!((back - y).abs() <= 1e-12 * y.max(1e-300) + 1e-300, "y = {y}, back = {back}");
        }
    }

    #[test]
    fn sampling_examples() {
        let vp = VariationalParams::new(vec![0.3, -1.2], vec![0.1, -2.0]).unwrap();
        assert_eq!(sample_params(&vp, &NoiseDraw::zeros(2)).unwrap(), vp.mu);

        let frozen = VariationalParams::new(vec![0.3, -1.2], vec![-50.0, -50.0]).unwrap();
        let noisy = NoiseDraw::from_kappa(vec![3.0, -4.0]);
        let theta = sample_params(&frozen, &noisy).unwrap();
        for (t, m) in theta.iter().zip(&frozen.mu) {
            assert!((t - m).abs() < 1e-20);
        }

        let unit = VariationalParams::new(vec![0.0], vec![softplus_inv(1.0)]).unwrap();
        let theta = sample_params(&unit, &NoiseDraw::from_kappa(vec![2.0])).unwrap();
        assert!((theta[0] - 2.0).abs() < 1e-12);

        assert!(matches!(
            sample_params(&vp, &NoiseDraw::zeros(3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn kl_examples() {
        let at_prior = VariationalParams::new(vec![0.0; 4], vec![softplus_inv(1.0); 4]).unwrap();
        assert!(complexity_cost(&at_prior).abs() < 1e-12);
        let shifted = VariationalParams::new(vec![1.0], vec![softplus_inv(1.0)]).unwrap();
        assert!((complexity_cost(&shifted) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn chain_rule_examples() {
        let vp = VariationalParams::new(vec![0.1, 0.2], vec![0.3, -0.4]).unwrap();
        let zero = NoiseDraw::zeros(2);
        let (dmu, dd) = backprop_variational(&[1.5, -2.0], &vp, &zero, &[0.0; 2], &[0.0; 2]).unwrap();
        assert_eq!(dmu, vec![1.5, -2.0]);
        assert_eq!(dd, vec![0.0, 0.0]);

        let noise = NoiseDraw::from_kappa(vec![0.7, -1.3]);
        let (dmu, dd) = backprop_variational(&[0.0; 2], &vp, &noise, &[0.0; 2], &[0.0; 2]).unwrap();
        assert_eq!(dmu, vec![0.0, 0.0]);
        assert_eq!(dd, vec![0.0, 0.0]);

        let (_, dd) = backprop_variational(&[2.0, 1.0], &vp, &noise, &[0.0; 2], &[0.5, 0.0]).unwrap();
        let expected = 2.0 * 0.7 / ((-0.3f64).exp() + 1.0) + 0.5;
        assert!((dd[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn init_shapes_and_scales() {
        let net = NetSpec::dense(100, 30, 3, crate::nn::Activation::Relu).unwrap();
        let vp = VariationalParams::init(&[&net], 7);
        assert_eq!(vp.len(), net.param_count());
        assert!(vp.sigma().iter().all(|s| (s - INIT_SIGMA).abs() < 1e-12));
        let layout = net.layout();
        assert!(vp.mu[layout[0].bias.clone()].iter().all(|&b| b == 0.0));
        let w = &vp.mu[layout[0].weights.clone()];
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let expected = 2.0 / 130.0;
        assert!((var - expected).abs() < 0.15 * expected, "var {var}");
        assert_eq!(VariationalParams::init(&[&net], 7), vp);
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(mu in prop::collection::vec(-3.0f64..3.0, 1..20), seed_delta in -4.0f64..4.0) {
            let delta = vec![seed_delta; mu.len()];
            let vp = VariationalParams::new(mu, delta).unwrap();
            prop_assert!(complexity_cost(&vp) >= -1e-12);
        }

        #[test]
        fn kl_zero_only_at_prior(m in -2.0f64..2.0, s in 0.05f64..3.0) {
            let vp = VariationalParams::new(vec![m], vec![softplus_inv(s)]).unwrap();
            let kl = complexity_cost(&vp);
            if m.abs() > 1e-3 || (s - 1.0).abs() > 1e-3 {
                prop_assert!(kl > 0.0);
            }
        }

        #[test]
        fn softplus_monotone_positive(a in -60.0f64..60.0, b in -60.0f64..60.0) {
            prop_assert!(softplus(a) > 0.0);
            if a < b {
                prop_assert!(softplus(a) <= softplus(b));
            }
        }
    }
}
