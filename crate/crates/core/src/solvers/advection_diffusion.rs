use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{check_times, FieldSolution, InputFunction};
use crate::error::{Error, Result};
use crate::grf::SensorGrid;

pub const ADVD_DIFFUSIVITY: f64 = 0.1;

/// Fourier representation of a periodic initial condition on `[0, 1)`,
/// evolved exactly in time under `s_t + s_x - 0.1 s_xx = 0`.
#[derive(Debug, Clone)]
pub struct AdvectionDiffusion {
    /// Coefficients `c_m` for `m = 0..=N/2` (the negative modes are conjugates).
    coefficients: Vec<Complex64>,
    /// Number of periodic sample points.
    n: usize,
}

impl AdvectionDiffusion {
    /// Builds the trigonometric interpolant of the initial condition.
    ///
    /// The sensor grid must start at 0 and either end at 1 (the last point is
    /// the periodic image of the first and is dropped) or be the open grid
    /// `j / N`.
    pub fn from_initial_condition(ic: &InputFunction) -> Result<Self> {
        let grid = ic.grid();
        let count = grid.count();
        if count < 2 || grid.lo() != 0.0 {
            return Err(Error::Argument("periodic grid must start at 0 with at least 2 points".into()));
        }
        let h = grid.spacing().expect("two or more points");
        let n = if (grid.hi() - 1.0).abs() < 1e-12 {
            count - 1
        } else if ((h * count as f64) - 1.0).abs() < 1e-9 {
            count
        } else {
            return Err(Error::Argument("sensor grid does not tile the unit period".into()));
        };
        let mut buf: Vec<Complex64> = ic.samples()[..n].iter().map(|&v| Complex64::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let scale = 1.0 / n as f64;
        let coefficients = buf[..=n / 2].iter().map(|c| c * scale).collect();
        Ok(Self { coefficients, n })
    }

    pub fn period_points(&self) -> usize {
        self.n
    }

    /// Modulus of mode `m` at time `t`.
    pub fn mode_amplitude(&self, m: usize, t: f64) -> f64 {
        self.coefficients[m].norm() * (-ADVD_DIFFUSIVITY * (2.0 * PI * m as f64).powi(2) * t).exp()
    }

    fn weights(&self) -> Vec<f64> {
        (0..self.coefficients.len())
            .map(|m| {
                if m == 0 {
                    1.0
                } else if 2 * m == self.n {
                    1.0
                } else {
                    2.0
                }
            })
            .collect()
    }

    /// Evaluates `s(x, t)` on the Cartesian product of `xs` and `ts`.
    pub fn evaluate(&self, xs: &[f64], ts: &[f64]) -> Array2<f64> {
        let modes = self.coefficients.len();
        let weights = self.weights();
        let phases: Vec<Vec<Complex64>> = xs
            .iter()
            .map(|&x| (0..modes).map(|m| Complex64::from_polar(1.0, 2.0 * PI * m as f64 * x)).collect())
            .collect();
        let mut out = Array2::<f64>::zeros((xs.len(), ts.len()));
        let mut evolved = vec![Complex64::new(0.0, 0.0); modes];
        for (j, &t) in ts.iter().enumerate() {
            for (m, a) in evolved.iter_mut().enumerate() {
                let k = 2.0 * PI * m as f64;
                let growth = Complex64::new(-ADVD_DIFFUSIVITY * k * k * t, -k * t).exp();
                *a = self.coefficients[m] * growth * weights[m];
            }
            for (i, phase) in phases.iter().enumerate() {
                let mut acc = 0.0;
                for m in 0..modes {
                    acc += (evolved[m] * phase[m]).re;
                }
                out[[i, j]] = acc;
            }
        }
        out
    }
}

/// Solves the periodic advection-diffusion problem; `ic` holds `s(x, 0)`.
pub fn solve_advection_diffusion(
    ic: &InputFunction,
    x_grid: &SensorGrid,
    t_grid: &[f64],
) -> Result<FieldSolution> {
    check_times(t_grid)?;
    let spectral = AdvectionDiffusion::from_initial_condition(ic)?;
    let values = spectral.evaluate(x_grid.points(), t_grid);
    Ok(FieldSolution {
        x_grid: x_grid.clone(),
        t_grid: t_grid.to_vec(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::unit_times;

    #[test]
    fn constant_is_invariant() {
        let g = SensorGrid::unit(100).unwrap();
        let ic = InputFunction::from_fn(g.clone(), |_| 0.7).unwrap();
        let sol = solve_advection_diffusion(&ic, &g, &unit_times(100)).unwrap();
        for v in sol.values.iter() {
            assert!((v - 0.7).abs() < 1e-14);
        }
    }

    #[test]
    fn single_mode_matches_analytic_solution() {
        let g = SensorGrid::unit(100).unwrap();
        let ic = InputFunction::from_fn(g.clone(), |x| (2.0 * PI * x).sin()).unwrap();
        let t = unit_times(100);
        let sol = solve_advection_diffusion(&ic, &g, &t).unwrap();
        let decay = ADVD_DIFFUSIVITY * (2.0 * PI).powi(2);
        let mut err: f64 = 0.0;
        for (i, &x) in g.points().iter().enumerate() {
            for (j, &tj) in t.iter().enumerate() {
                let exact = (-decay * tj).exp() * (2.0 * PI * (x - tj)).sin();
                err = err.max((sol.values[[i, j]] - exact).abs());
            }
        }
        assert!(err < 1e-10, "max abs error {err}");
    }

    #[test]
    fn even_period_count_handles_nyquist() {
        // open grid j/8: cos(8πx) is the Nyquist mode
        let pts: Vec<f64> = (0..8).map(|j| j as f64 / 8.0).collect();
        let g = SensorGrid::from_points(pts.clone()).unwrap();
        let ic = InputFunction::from_fn(g.clone(), |x| (8.0 * PI * x).cos() + 0.25).unwrap();
        let spectral = AdvectionDiffusion::from_initial_condition(&ic).unwrap();
        assert_eq!(spectral.period_points(), 8);
        let at_zero = spectral.evaluate(&pts, &[0.0]);
        for (i, &x) in pts.iter().enumerate() {
            assert!((at_zero[[i, 0]] - ((8.0 * PI * x).cos() + 0.25)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_mode_is_conserved_and_modes_decay() {
        let g = SensorGrid::unit(100).unwrap();
        let ic = InputFunction::from_fn(g.clone(), |x| (2.0 * PI * (0.3 * x + x * x)).sin().powi(2)).unwrap();
        let spectral = AdvectionDiffusion::from_initial_condition(&ic).unwrap();
        let n = spectral.period_points();
        let xs: Vec<f64> = (0..n).map(|j| j as f64 / n as f64).collect();
        let t = unit_times(25);
        let field = spectral.evaluate(&xs, &t);
        let mean0: f64 = ic.samples()[..n].iter().sum::<f64>() / n as f64;
        for j in 0..t.len() {
            let mean: f64 = field.column(j).sum() / n as f64;
            assert!((mean - mean0).abs() < 1e-12);
        }
        for m in 1..=n / 2 {
            let mut prev = spectral.mode_amplitude(m, 0.0);
            for &tj in &t[1..] {
                let a = spectral.mode_amplitude(m, tj);
                assert!(a <= prev);
                prev = a;
            }
        }
    }

    #[test]
    fn rejects_non_periodic_grid() {
        let g = SensorGrid::uniform(0.0, 0.5, 10).unwrap();
        let ic = InputFunction::from_fn(g.clone(), |_| 1.0).unwrap();
        assert!(solve_advection_diffusion(&ic, &g, &[0.0, 1.0]).is_err());
    }
}
