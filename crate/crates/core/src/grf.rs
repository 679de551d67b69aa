//! Gaussian random field inputs on a uniform sensor grid.
//!
//! Realizations are draws `L z` where `K = L Lᵀ` is the squared-exponential
//! Gram matrix of the sensor points and `z` is standard normal.

use std::io::Write;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix};
use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

pub const DEFAULT_SENSORS: usize = 100;
pub const DEFAULT_LENGTH_SCALE: f64 = 0.5;
pub const DEFAULT_JITTER: f64 = 1e-10;
pub const MAX_JITTER: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SensorGrid {
    points: Vec<f64>,
}

impl SensorGrid {
    /// `count` points uniformly spaced over `[lo, hi]`, both ends included.
    pub fn uniform(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::Argument("sensor grid needs at least one point".into()));
        }
        if !(lo.is_finite() && hi.is_finite()) || (count > 1 && hi <= lo) {
            return Err(Error::Argument(format!("invalid grid interval [{lo}, {hi}]")));
        }
        let points = if count == 1 {
            vec![lo]
        } else {
            let step = (hi - lo) / (count - 1) as f64;
            (0..count)
                .map(|i| if i == count - 1 { hi } else { lo + step * i as f64 })
                .collect()
        };
        Ok(Self { points })
    }

    /// The default 100-point grid over `[0, 1]`.
    pub fn unit(count: usize) -> Result<Self> {
        Self::uniform(0.0, 1.0, count)
    }

    /// Validates an explicit point list: strictly increasing and uniformly spaced.
    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Argument("sensor grid needs at least one point".into()));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::Domain("non-finite sensor coordinate".into()));
        }
        if points.len() > 2 {
            let span = points[points.len() - 1] - points[0];
            let step = span / (points.len() - 1) as f64;
            for w in points.windows(2) {
                let d = w[1] - w[0];
                if d <= 0.0 {
                    return Err(Error::Argument("sensor points must be strictly increasing".into()));
                }
                if ((d - step) / step).abs() > 1e-9 {
                    return Err(Error::Argument("sensor points are not uniformly spaced".into()));
                }
            }
        } else if points.len() == 2 && points[1] <= points[0] {
            return Err(Error::Argument("sensor points must be strictly increasing".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn spacing(&self) -> Option<f64> {
        (self.points.len() > 1)
            .then(|| (self.points[self.points.len() - 1] - self.points[0]) / (self.points.len() - 1) as f64)
    }

    pub fn lo(&self) -> f64 {
        self.points[0]
    }

    pub fn hi(&self) -> f64 {
        self.points[self.points.len() - 1]
    }
}

#[derive(Debug, Clone)]
pub struct GrfEnsemble {
    pub grid: SensorGrid,
    /// One realization per row, one sensor per column.
    pub realizations: Array2<f64>,
    pub length_scale: f64,
    pub seed: u64,
}

impl GrfEnsemble {
    pub fn len(&self) -> usize {
        self.realizations.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.realizations.nrows() == 0
    }

    /// Applies `f` to every sensor value, keeping grid and provenance.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> GrfEnsemble {
        GrfEnsemble {
            grid: self.grid.clone(),
            realizations: self.realizations.mapv(f),
            length_scale: self.length_scale,
            seed: self.seed,
        }
    }

    /// One realization per line, sensor values as columns, 17 significant digits.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let header: Vec<String> = (1..=self.grid.count()).map(|i| format!("u_{i}")).collect();
        writeln!(w, "{}", header.join(",")).map_err(|e| Error::io(path, e))?;
        for row in self.realizations.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn rbf_kernel(xi: f64, xj: f64, length_scale: f64) -> Result<f64> {
    if !(xi.is_finite() && xj.is_finite() && length_scale.is_finite()) {
        return Err(Error::Domain("rbf_kernel: non-finite input".into()));
    }
    if length_scale <= 0.0 {
        return Err(Error::Domain(format!("rbf_kernel: length scale {length_scale} must be positive")));
    }
    let d = xi - xj;
    Ok((-(d * d) / (2.0 * length_scale * length_scale)).exp())
}

pub fn build_covariance(grid: &SensorGrid, length_scale: f64, jitter: f64) -> Result<DMatrix<f64>> {
    if !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(Error::Domain(format!("jitter {jitter} must be a finite non-negative number")));
    }
    let n = grid.count();
    let pts = grid.points();
    let mut k = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = rbf_kernel(pts[i], pts[i], length_scale)? + jitter;
        for j in 0..i {
            let v = rbf_kernel(pts[i], pts[j], length_scale)?;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Lower Cholesky factor of the covariance, escalating the diagonal jitter by
/// ×10 from `jitter` up to [`MAX_JITTER`]. Returns the factor and the jitter used.
pub fn factor_covariance(
    grid: &SensorGrid,
    length_scale: f64,
    jitter: f64,
) -> Result<(DMatrix<f64>, f64)> {
    let mut current = jitter;
    loop {
        let k = build_covariance(grid, length_scale, current)?;
        if let Some(chol) = Cholesky::new(k) {
            return Ok((chol.l(), current));
        }
        if current >= MAX_JITTER {
            return Err(Error::Numeric(format!(
                "covariance not factorizable with jitter up to {MAX_JITTER:e}"
            )));
        }
        current = if current == 0.0 { DEFAULT_JITTER } else { (current * 10.0).min(MAX_JITTER) };
    }
}

pub fn sample_grf(grid: &SensorGrid, length_scale: f64, n: usize, seed: u64) -> Result<GrfEnsemble> {
    sample_grf_with_jitter(grid, length_scale, n, seed, DEFAULT_JITTER)
}

pub fn sample_grf_with_jitter(
    grid: &SensorGrid,
    length_scale: f64,
    n: usize,
    seed: u64,
    jitter: f64,
) -> Result<GrfEnsemble> {
    if n == 0 {
        return Err(Error::Argument("sample_grf: n must be at least 1".into()));
    }
    let (l, _) = factor_covariance(grid, length_scale, jitter)?;
    let dim = grid.count();
    let mut realizations = Array2::<f64>::zeros((n, dim));
    realizations
        .as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(dim)
        .enumerate()
        .for_each(|(row, out)| {
            let mut rng = rng::keyed(seed, Purpose::GrfRow, row as u64, 0);
            let z = rng::standard_normal_vec(&mut rng, dim);
            for i in 0..dim {
                let mut acc = 0.0;
                for (j, zj) in z.iter().enumerate().take(i + 1) {
                    acc += l[(i, j)] * zj;
                }
                out[i] = acc;
            }
        });
    Ok(GrfEnsemble {
        grid: grid.clone(),
        realizations,
        length_scale,
        seed,
    })
}
