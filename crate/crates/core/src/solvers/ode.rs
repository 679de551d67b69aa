use ndarray::Array2;

use super::{check_times, InputFunction, OdeSolution};
use crate::error::{Error, Result};

/// Upper bound on the pendulum substep.
pub const PENDULUM_MAX_STEP: f64 = 1e-3;

/// Classical fourth-order Runge-Kutta from `t = 0` with state `y0`.
///
/// Substeps never straddle a breakpoint or an output time: each interval
/// between consecutive stops is split into equal steps no longer than `h_max`.
/// Returns the state at each entry of `outputs`.
pub fn rk4_integrate<const N: usize>(
    f: impl Fn(f64, &[f64; N]) -> [f64; N],
    y0: [f64; N],
    breakpoints: &[f64],
    outputs: &[f64],
    h_max: f64,
) -> Result<Vec<[f64; N]>> {
    if !(h_max > 0.0 && h_max.is_finite()) {
        return Err(Error::Argument(format!("step bound {h_max} must be positive")));
    }
    check_times(outputs)?;
    let t_end = outputs[outputs.len() - 1];
    let mut stops: Vec<f64> = breakpoints
        .iter()
        .copied()
        .filter(|&b| b > 0.0 && b < t_end)
        .chain(outputs.iter().copied())
        .collect();
    stops.sort_by(f64::total_cmp);
    stops.dedup();

    let axpy = |y: &[f64; N], k: &[f64; N], h: f64| -> [f64; N] {
        let mut out = *y;
        for i in 0..N {
            out[i] += h * k[i];
        }
        out
    };

    let mut result = Vec::with_capacity(outputs.len());
    let mut next_output = 0;
    let mut t = 0.0;
    let mut y = y0;
    while next_output < outputs.len() && outputs[next_output] == 0.0 {
        result.push(y);
        next_output += 1;
    }
    for &stop in &stops {
        if stop <= t {
            continue;
        }
        let span = stop - t;
        let n = (span / h_max).ceil().max(1.0) as usize;
        let h = span / n as f64;
        let t0 = t;
        for step in 0..n {
            let ts = t0 + h * step as f64;
            let k1 = f(ts, &y);
            let k2 = f(ts + 0.5 * h, &axpy(&y, &k1, 0.5 * h));
            let k3 = f(ts + 0.5 * h, &axpy(&y, &k2, 0.5 * h));
            let k4 = f(ts + h, &axpy(&y, &k3, h));
            for i in 0..N {
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        t = stop;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite state at t = {t}")));
        }
        while next_output < outputs.len() && outputs[next_output] == stop {
            result.push(y);
            next_output += 1;
        }
    }
    Ok(result)
}

/// `ds/dt = u(t)`, `s(0) = 0`.
pub fn solve_antiderivative(u: &InputFunction, t_grid: &[f64]) -> Result<OdeSolution> {
    let h_max = u.grid().spacing().map_or(0.25, |h| h / 4.0);
    let states = rk4_integrate(|t, _: &[f64; 1]| [u.eval(t)], [0.0], u.grid().points(), t_grid, h_max)?;
    Ok(OdeSolution {
        times: t_grid.to_vec(),
        states: Array2::from_shape_fn((states.len(), 1), |(i, _)| states[i][0]),
        target: 0,
    })
}

/// Forced gravity pendulum `s1' = s2`, `s2' = -sin(s1) + u(t)`; output is `s1`.
pub fn solve_pendulum(u: &InputFunction, t_grid: &[f64], s0: (f64, f64)) -> Result<OdeSolution> {
    solve_pendulum_with_step(u, t_grid, s0, PENDULUM_MAX_STEP)
}

pub fn solve_pendulum_with_step(
    u: &InputFunction,
    t_grid: &[f64],
    s0: (f64, f64),
    h_max: f64,
) -> Result<OdeSolution> {
    if !(s0.0.is_finite() && s0.1.is_finite()) {
        return Err(Error::Domain("non-finite initial state".into()));
    }
    let states = rk4_integrate(
        |t, s: &[f64; 2]| [s[1], -s[0].sin() + u.eval(t)],
        [s0.0, s0.1],
        u.grid().points(),
        t_grid,
        h_max,
    )?;
    Ok(OdeSolution {
        times: t_grid.to_vec(),
        states: Array2::from_shape_fn((states.len(), 2), |(i, j)| states[i][j]),
        target: 0,
    })
}
