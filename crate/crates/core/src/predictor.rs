//! Posterior-predictive summaries, confidence intervals, coverage, NMSE and
//! kernel density curves.

use ndarray::{Array2, ArrayView2};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::{NormStats, QuerySet};
use crate::deeponet::{evaluate, DeepONetSpec};
use crate::error::{ensure_len, Error, Result};
use crate::rng::{self, Purpose};
use crate::variational::{sample_params, NoiseDraw, VariationalParams};

pub const DEFAULT_SAMPLES: usize = 200;
pub const PDF_MIN_VALUES: usize = 100;
pub const PDF_SUPPORT_POINTS: usize = 401;
const SAMPLE_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictOptions {
    /// Posterior samples `S`.
    pub samples: usize,
    pub seed: u64,
    /// Keep the per-sample `(mu, sigma)` arrays.
    pub keep_samples: bool,
    /// Point-estimate network: use `theta = mu` and `sigma = sigma_floor`.
    pub deterministic: bool,
    /// The model was trained on normalized data, so statistics are required.
    pub require_norm: bool,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            seed: 0,
            keep_samples: false,
            deterministic: false,
            require_norm: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CiMethod {
    /// `mean ± z·sqrt(total variance)`.
    Moments,
    /// Quantiles of the Gaussian mixture over posterior samples.
    Empirical,
}

/// Per-query predictive moments in target units.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveEnsemble {
    pub samples: usize,
    pub mean: Vec<f64>,
    pub epistemic_var: Vec<f64>,
    pub aleatoric_var: Vec<f64>,
    pub total_var: Vec<f64>,
    /// `S × Q` sampled means, when retained.
    pub sample_mu: Option<Array2<f64>>,
    /// `S × Q` sampled sigmas, when retained.
    pub sample_sigma: Option<Array2<f64>>,
}

impl PredictiveEnsemble {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn std_total(&self) -> Vec<f64> {
        self.total_var.iter().map(|v| v.sqrt()).collect()
    }

    /// Lower and upper interval bounds at `level`.
    pub fn interval(&self, level: f64, method: CiMethod) -> Result<(Vec<f64>, Vec<f64>)> {
        check_level(level)?;
        match method {
            CiMethod::Moments => {
                let z = z_value(level);
                Ok(self
                    .mean
                    .iter()
                    .zip(&self.total_var)
                    .map(|(m, v)| {
                        let half = z * v.sqrt();
                        (m - half, m + half)
                    })
                    .unzip())
            }
            CiMethod::Empirical => {
                let (Some(mu), Some(sigma)) = (&self.sample_mu, &self.sample_sigma) else {
                    return Err(Error::Argument("empirical intervals need retained samples".into()));
                };
                let lo_p = 0.5 * (1.0 - level);
                let hi_p = 0.5 * (1.0 + level);
                Ok((0..self.len())
                    .into_par_iter()
                    .map(|q| {
                        let m = mu.column(q);
                        let s = sigma.column(q);
                        let lo = mixture_quantile(&m, &s, lo_p);
                        let hi = mixture_quantile(&m, &s, hi_p);
                        (lo.min(self.mean[q]), hi.max(self.mean[q]))
                    })
                    .unzip())
            }
        }
    }
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::Argument(format!("confidence level {level} must lie in (0, 1)")))
    }
}

/// Two-sided standard-normal quantile `Φ⁻¹((1 + level) / 2)`.
pub fn z_value(level: f64) -> f64 {
    Normal::standard().inverse_cdf(0.5 * (1.0 + level))
}

fn mixture_quantile(
    mu: &ndarray::ArrayView1<'_, f64>,
    sigma: &ndarray::ArrayView1<'_, f64>,
    p: f64,
) -> f64 {
    let n = mu.len() as f64;
    let std_normal = Normal::standard();
    let cdf = |x: f64| {
        mu.iter()
            .zip(sigma.iter())
            .map(|(&m, &s)| {
                if s > 0.0 {
                    std_normal.cdf((x - m) / s)
                } else if x >= m {
                    1.0
                } else {
                    0.0
                }
            })
            .sum::<f64>()
            / n
    };
    let z = std_normal.inverse_cdf(p).abs() + 1.0;
    let mut lo = mu.iter().zip(sigma.iter()).map(|(m, s)| m - z * s).fold(f64::INFINITY, f64::min);
    let mut hi = mu.iter().zip(sigma.iter()).map(|(m, s)| m + z * s).fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

struct Welford {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    sig2: Vec<f64>,
}

/// Monte Carlo posterior-predictive moments over `opts.samples` parameter draws.
///
/// `queries` holds raw (unnormalized) branch inputs; `norm` maps them into
/// model units and maps outputs back (`sigma` scales by `s_std`).
pub fn predict(
    spec: &DeepONetSpec,
    vp: &VariationalParams,
    queries: &QuerySet,
    norm: Option<&NormStats>,
    opts: &PredictOptions,
) -> Result<PredictiveEnsemble> {
    if opts.samples < 2 {
        return Err(Error::Argument(format!("need at least 2 posterior samples, got {}", opts.samples)));
    }
    if opts.require_norm && norm.is_none() {
        return Err(Error::MissingNormStats);
    }
    ensure_len("variational parameters", spec.param_count(), vp.len())?;
    let normalized;
    let q = match norm {
        Some(n) => {
            ensure_len("normalization statistics", spec.sensors(), n.u_mean.len())?;
            normalized = queries.normalized(n);
            &normalized
        }
        None => queries,
    };
    let nq = q.len();
    let (scale, shift) = norm.map_or((1.0, 0.0), |n| (n.s_std, n.s_mean));
    let p = spec.param_count();

    let mut acc = Welford {
        count: 0.0,
        mean: vec![0.0; nq],
        m2: vec![0.0; nq],
        sig2: vec![0.0; nq],
    };
    let mut kept_mu = opts.keep_samples.then(|| Array2::<f64>::zeros((opts.samples, nq)));
    let mut kept_sigma = opts.keep_samples.then(|| Array2::<f64>::zeros((opts.samples, nq)));

    let draws: Vec<usize> = (0..opts.samples).collect();
    for chunk in draws.chunks(SAMPLE_CHUNK) {
        let outs: Vec<Result<(Vec<f64>, Vec<f64>)>> = chunk
            .par_iter()
            .map(|&j| {
                let theta = if opts.deterministic {
                    vp.mu.clone()
                } else {
                    let noise = NoiseDraw::generate(p, opts.seed, Purpose::PosteriorSample, j as u64, 0);
                    sample_params(vp, &noise)?
                };
                let out = evaluate(spec, &theta, q)?;
                let mu = out.mu.iter().map(|m| m * scale + shift).collect();
                let sigma = if opts.deterministic {
                    vec![spec.sigma_floor * scale; nq]
                } else {
                    out.sigma.iter().map(|s| s * scale).collect()
                };
                Ok((mu, sigma))
            })
            .collect();
        for (&j, res) in chunk.iter().zip(outs) {
            let (mu, sigma) = res?;
            acc.count += 1.0;
            for i in 0..nq {
                let d = mu[i] - acc.mean[i];
                acc.mean[i] += d / acc.count;
                acc.m2[i] += d * (mu[i] - acc.mean[i]);
                acc.sig2[i] += sigma[i] * sigma[i];
            }
            if let (Some(km), Some(ks)) = (kept_mu.as_mut(), kept_sigma.as_mut()) {
                km.row_mut(j).assign(&ndarray::ArrayView1::from(&mu));
                ks.row_mut(j).assign(&ndarray::ArrayView1::from(&sigma));
            }
        }
    }
    let s = acc.count;
    let epistemic_var: Vec<f64> = acc.m2.iter().map(|m| m / s).collect();
    let aleatoric_var: Vec<f64> = acc.sig2.iter().map(|v| v / s).collect();
    let total_var = epistemic_var.iter().zip(&aleatoric_var).map(|(e, a)| e + a).collect();
    Ok(PredictiveEnsemble {
        samples: opts.samples,
        mean: acc.mean,
        epistemic_var,
        aleatoric_var,
        total_var,
        sample_mu: kept_mu,
        sample_sigma: kept_sigma,
    })
}

/// `Σ(pred − truth)² / Σ truth²`.
pub fn nmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    ensure_len("prediction", truth.len(), pred.len())?;
    let denom: f64 = truth.iter().map(|t| t * t).sum();
    if denom == 0.0 {
        return Err(Error::ZeroNormTruth);
    }
    let num: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(num / denom)
}

/// Fraction of queries whose truth lies inside the moment interval at `level`.
pub fn coverage(ens: &PredictiveEnsemble, truth: &[f64], level: f64) -> Result<f64> {
    ensure_len("truth", ens.len(), truth.len())?;
    if ens.is_empty() {
        return Err(Error::Argument("coverage of an empty ensemble".into()));
    }
    let (lo, hi) = ens.interval(level, CiMethod::Moments)?;
    let inside = truth
        .iter()
        .zip(lo.iter().zip(&hi))
        .filter(|(t, (l, h))| **t >= **l && **t <= **h)
        .count();
    Ok(inside as f64 / truth.len() as f64)
}

/// One output draw `mu + sigma·z` per retained posterior sample and query,
/// with `z` keyed by `(seed, sample, query)`.
pub fn sample_outputs(ens: &PredictiveEnsemble, seed: u64) -> Result<Array2<f64>> {
    let (Some(mu), Some(sigma)) = (&ens.sample_mu, &ens.sample_sigma) else {
        return Err(Error::Argument("output sampling needs retained posterior samples".into()));
    };
    let (s, q) = mu.dim();
    let mut out = Array2::<f64>::zeros((s, q));
    out.as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(q.max(1))
        .enumerate()
        .for_each(|(j, row)| {
            let mut r = rng::keyed(seed, Purpose::OutputNoise, j as u64, 0);
            for (i, v) in row.iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(&mut r);
                *v = mu[[j, i]] + sigma[[j, i]] * z;
            }
        });
    Ok(out)
}

/// Density curve with a pointwise band across posterior samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PdfCurve {
    pub support: Vec<f64>,
    pub mean: Vec<f64>,
    pub band_lo: Vec<f64>,
    pub band_hi: Vec<f64>,
    /// Bandwidth used for each sample row.
    pub bandwidths: Vec<f64>,
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Linear-interpolation percentile of sorted data, `p` in `[0, 1]`.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    }
}

fn spread_check(sorted: &[f64]) -> Result<()> {
    let range = sorted[sorted.len() - 1] - sorted[0];
    let scale = sorted[0].abs().max(sorted[sorted.len() - 1].abs()).max(1.0);
    if !(range > 1e-15 * scale) {
        return Err(Error::SingleSpike { range });
    }
    Ok(())
}

/// Silverman's rule `0.9·min(std, IQR/1.34)·n^(-1/5)`, falling back to the
/// standard deviation when the IQR vanishes.
pub fn silverman_bandwidth(sorted: &[f64]) -> Result<f64> {
    spread_check(sorted)?;
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let std = (sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let iqr = percentile_sorted(sorted, 0.75) - percentile_sorted(sorted, 0.25);
    let spread = if iqr > 0.0 { std.min(iqr / 1.34) } else { std };
    Ok(0.9 * spread * n.powf(-0.2))
}

fn kde_sorted(sorted: &[f64], h: f64, support: &[f64]) -> Vec<f64> {
    let n = sorted.len() as f64;
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    let cut = 9.0 * h;
    support
        .iter()
        .map(|&x| {
            let a = sorted.partition_point(|v| *v < x - cut);
            let b = sorted.partition_point(|v| *v <= x + cut);
            let sum: f64 = sorted[a..b]
                .iter()
                .map(|v| {
                    let z = (x - v) / h;
                    (-0.5 * z * z).exp()
                })
                .sum();
            sum * norm
        })
        .collect()
}

/// Gaussian kernel density of `values` on `support` with Silverman bandwidth.
pub fn kde(values: &[f64], support: &[f64]) -> Result<(Vec<f64>, f64)> {
    if values.is_empty() {
        return Err(Error::Argument("kernel density of an empty set".into()));
    }
    let s = sorted(values);
    let h = silverman_bandwidth(&s)?;
    Ok((kde_sorted(&s, h, support), h))
}

/// Uniform support covering `[min − 4h, max + 4h]`, fine enough that the
/// smallest bandwidth spans at least four grid cells.
pub fn auto_support(lo: f64, hi: f64, min_bandwidth: f64) -> Vec<f64> {
    let a = lo - 4.0 * min_bandwidth;
    let b = hi + 4.0 * min_bandwidth;
    let needed = ((b - a) / (min_bandwidth / 4.0)).ceil() as usize + 1;
    let n = needed.clamp(PDF_SUPPORT_POINTS, 20_001);
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

/// Per-sample densities over the `Q` values of each row of an `S × Q` matrix,
/// their pointwise mean, and the 2.5/97.5 percentile band.
pub fn pdf_estimate(values: ArrayView2<'_, f64>, support: Option<&[f64]>) -> Result<PdfCurve> {
    let (s, q) = values.dim();
    if s == 0 {
        return Err(Error::Argument("need at least one sample row".into()));
    }
    if q < PDF_MIN_VALUES {
        return Err(Error::Argument(format!(
            "density estimate needs at least {PDF_MIN_VALUES} values per sample, got {q}"
        )));
    }
    let rows: Vec<Vec<f64>> = values.outer_iter().map(|r| sorted(&r.to_vec())).collect();
    let bandwidths = rows.iter().map(|r| silverman_bandwidth(r)).collect::<Result<Vec<_>>>()?;
    let support = match support {
        Some(s) => s.to_vec(),
        None => {
            let lo = rows.iter().map(|r| r[0]).fold(f64::INFINITY, f64::min);
            let hi = rows.iter().map(|r| r[r.len() - 1]).fold(f64::NEG_INFINITY, f64::max);
            let hmin = bandwidths.iter().copied().fold(f64::INFINITY, f64::min);
            auto_support(lo, hi, hmin)
        }
    };
    let dens: Vec<Vec<f64>> = rows
        .par_iter()
        .zip(&bandwidths)
        .map(|(r, &h)| kde_sorted(r, h, &support))
        .collect();
    let g = support.len();
    let mut mean = vec![0.0; g];
    let mut band_lo = vec![0.0; g];
    let mut band_hi = vec![0.0; g];
    let mut column = vec![0.0; s];
    for k in 0..g {
        for (j, d) in dens.iter().enumerate() {
            column[j] = d[k];
        }
        mean[k] = column.iter().sum::<f64>() / s as f64;
        column.sort_by(f64::total_cmp);
        band_lo[k] = percentile_sorted(&column, 0.025);
        band_hi[k] = percentile_sorted(&column, 0.975);
    }
    Ok(PdfCurve {
        support,
        mean,
        band_lo,
        band_hi,
        bandwidths,
    })
}

/// Trapezoid integral of `f` over `x`.
pub fn trapezoid(x: &[f64], f: &[f64]) -> f64 {
    x.windows(2)
        .zip(f.windows(2))
        .map(|(xw, fw)| 0.5 * (xw[1] - xw[0]) * (fw[0] + fw[1]))
        .sum()
}
