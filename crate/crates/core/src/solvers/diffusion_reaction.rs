use ndarray::Array2;

use super::{check_times, FieldSolution, InputFunction};
use crate::error::{Error, Result};
use crate::grf::SensorGrid;

pub const DEFAULT_DIFFUSIVITY: f64 = 0.01;
pub const DEFAULT_REACTION: f64 = 0.01;
pub const BLOWUP_THRESHOLD: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionReaction {
    pub diffusivity: f64,
    pub reaction: f64,
}

impl Default for DiffusionReaction {
    fn default() -> Self {
        Self {
            diffusivity: DEFAULT_DIFFUSIVITY,
            reaction: DEFAULT_REACTION,
        }
    }
}

/// `s_t = D s_xx + k s² + u(x)` on the closed `x_grid` with `s = 0` at both
/// ends and at `t = 0`.
///
/// Diffusion is Crank-Nicolson on second-order central differences; the
/// reaction and source terms are explicit. Each interval between output times
/// is split into equal substeps with `dt ≤ 0.25 dx² / D`.
pub fn solve_diffusion_reaction(
    u: &InputFunction,
    params: DiffusionReaction,
    x_grid: &SensorGrid,
    t_grid: &[f64],
) -> Result<FieldSolution> {
    let DiffusionReaction { diffusivity: d, reaction: k } = params;
    if !(d > 0.0 && d.is_finite() && k.is_finite()) {
        return Err(Error::Argument(format!("invalid coefficients D = {d}, k = {k}")));
    }
    check_times(t_grid)?;
    let nx = x_grid.count();
    if nx < 3 {
        return Err(Error::Argument("diffusion-reaction needs at least 3 grid points".into()));
    }
    let dx = x_grid.spacing().expect("grid has more than one point");
    let dt_max = 0.25 * dx * dx / d;
    let interior = nx - 2;
    let source: Vec<f64> = x_grid.points()[1..nx - 1].iter().map(|&x| u.eval(x)).collect();

    let mut values = Array2::<f64>::zeros((nx, t_grid.len()));
    let mut s = vec![0.0; interior];
    let mut rhs = vec![0.0; interior];
    let mut scratch = vec![0.0; interior];
    let mut t = 0.0;

    for (j, &t_out) in t_grid.iter().enumerate() {
        let span = t_out - t;
        if span > 0.0 {
            let n = (span / dt_max).ceil().max(1.0) as usize;
            let dt = span / n as f64;
            let r = d * dt / (dx * dx);
            // (1 + r) s_i^{n+1} - r/2 (s_{i-1} + s_{i+1})^{n+1} = rhs
            let diag = 1.0 + r;
            let off = -0.5 * r;
            for _ in 0..n {
                for i in 0..interior {
                    let left = if i > 0 { s[i - 1] } else { 0.0 };
                    let right = if i + 1 < interior { s[i + 1] } else { 0.0 };
                    rhs[i] = (1.0 - r) * s[i]
                        + 0.5 * r * (left + right)
                        + dt * (k * s[i] * s[i] + source[i]);
                }
                solve_constant_tridiagonal(diag, off, &rhs, &mut s, &mut scratch);
            }
            t = t_out;
            let peak = s
                .iter()
                .fold(0.0f64, |m, v| if v.is_finite() { m.max(v.abs()) } else { f64::INFINITY });
            if !peak.is_finite() || peak > BLOWUP_THRESHOLD {
                return Err(Error::SolverDivergence {
                    magnitude: peak,
                    threshold: BLOWUP_THRESHOLD,
                    time: t,
                });
            }
        }
        for i in 0..interior {
            values[[i + 1, j]] = s[i];
        }
    }
    Ok(FieldSolution {
        x_grid: x_grid.clone(),
        t_grid: t_grid.to_vec(),
        values,
    })
}

/// Thomas algorithm for a symmetric Toeplitz tridiagonal system.
fn solve_constant_tridiagonal(diag: f64, off: f64, rhs: &[f64], out: &mut [f64], c_prime: &mut [f64]) {
    let n = rhs.len();
    c_prime[0] = off / diag;
    out[0] = rhs[0] / diag;
    for i in 1..n {
        let m = diag - off * c_prime[i - 1];
        c_prime[i] = off / m;
        out[i] = (rhs[i] - off * out[i - 1]) / m;
    }
    for i in (0..n - 1).rev() {
        out[i] -= c_prime[i] * out[i + 1];
    }
}
