//! Reference solvers for the four benchmark operators.

mod advection_diffusion;
mod diffusion_reaction;
mod ode;

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::grf::SensorGrid;

pub use advection_diffusion::{solve_advection_diffusion, AdvectionDiffusion, ADVD_DIFFUSIVITY};
pub use diffusion_reaction::{
    solve_diffusion_reaction, DiffusionReaction, BLOWUP_THRESHOLD, DEFAULT_DIFFUSIVITY,
    DEFAULT_REACTION,
};
pub use ode::{
    rk4_integrate, solve_antiderivative, solve_pendulum, solve_pendulum_with_step,
    PENDULUM_MAX_STEP,
};

/// An input function known at sensor points, linearly interpolated between
/// them and held constant outside the grid.
#[derive(Debug, Clone)]
pub struct InputFunction {
    grid: SensorGrid,
    samples: Vec<f64>,
}

impl InputFunction {
    pub fn new(grid: SensorGrid, samples: Vec<f64>) -> Result<Self> {
        crate::error::ensure_len("input function samples", grid.count(), samples.len())?;
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("input function has non-finite samples".into()));
        }
        Ok(Self { grid, samples })
    }

    pub fn from_fn(grid: SensorGrid, f: impl Fn(f64) -> f64) -> Result<Self> {
        let samples = grid.points().iter().map(|&x| f(x)).collect();
        Self::new(grid, samples)
    }

    pub fn grid(&self) -> &SensorGrid {
        &self.grid
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn eval(&self, x: f64) -> f64 {
        let pts = self.grid.points();
        let n = pts.len();
        if n == 1 || x <= pts[0] {
            return self.samples[0];
        }
        if x >= pts[n - 1] {
            return self.samples[n - 1];
        }
        let h = self.grid.spacing().unwrap_or(1.0);
        let mut i = (((x - pts[0]) / h).floor() as usize).min(n - 2);
        // guard against rounding at cell edges
        while i > 0 && x < pts[i] {
            i -= 1;
        }
        while i < n - 2 && x >= pts[i + 1] {
            i += 1;
        }
        if x == pts[i] {
            return self.samples[i];
        }
        let w = (x - pts[i]) / (pts[i + 1] - pts[i]);
        self.samples[i] * (1.0 - w) + self.samples[i + 1] * w
    }
}

/// Values of a solution sampled on its evaluation grid, flattened so that a
/// dataset can pick locations by index.
pub trait GridSampled {
    /// Dimension of a location `y`.
    fn location_dim(&self) -> usize;
    fn location_count(&self) -> usize;
    /// Writes location `index` into `out` (length `location_dim`).
    fn location(&self, index: usize, out: &mut [f64]);
    fn value(&self, index: usize) -> f64;
}

#[derive(Debug, Clone)]
pub struct OdeSolution {
    pub times: Vec<f64>,
    /// One row per time, one column per state component.
    pub states: Array2<f64>,
    /// State component reported as the operator output.
    pub target: usize,
}

impl OdeSolution {
    pub fn target_values(&self) -> Vec<f64> {
        self.states.column(self.target).to_vec()
    }
}

impl GridSampled for OdeSolution {
    fn location_dim(&self) -> usize {
        1
    }
    fn location_count(&self) -> usize {
        self.times.len()
    }
    fn location(&self, index: usize, out: &mut [f64]) {
        out[0] = self.times[index];
    }
    fn value(&self, index: usize) -> f64 {
        self.states[[index, self.target]]
    }
}

#[derive(Debug, Clone)]
pub struct FieldSolution {
    pub x_grid: SensorGrid,
    pub t_grid: Vec<f64>,
    /// `values[[i, j]] = s(x_i, t_j)`.
    pub values: Array2<f64>,
}

const FIELD_MAGIC: &[u8; 8] = b"VBDOFLD1";

impl FieldSolution {
    /// Row-major little-endian dump: 8-byte magic, u32 rows, u32 cols, f64 values.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let (rows, cols) = self.values.dim();
        let mut buf = Vec::with_capacity(16 + rows * cols * 8);
        buf.extend_from_slice(FIELD_MAGIC);
        buf.extend_from_slice(&(rows as u32).to_le_bytes());
        buf.extend_from_slice(&(cols as u32).to_le_bytes());
        for v in self.values.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Reads a matrix written by [`FieldSolution::write_binary`].
    pub fn read_binary_values(path: &Path) -> Result<Array2<f64>> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        if buf.len() < 16 || &buf[..8] != FIELD_MAGIC {
            return Err(Error::Format("missing VBDOFLD1 header".into()));
        }
        let rows = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
        crate::error::ensure_len("field payload bytes", rows * cols * 8, buf.len() - 16)?;
        let data = buf[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_matrix_csv(path, &self.values)
    }
}

impl GridSampled for FieldSolution {
    fn location_dim(&self) -> usize {
        2
    }
    fn location_count(&self) -> usize {
        self.values.len()
    }
    fn location(&self, index: usize, out: &mut [f64]) {
        let nt = self.t_grid.len();
        out[0] = self.x_grid.points()[index / nt];
        out[1] = self.t_grid[index % nt];
    }
    fn value(&self, index: usize) -> f64 {
        let nt = self.t_grid.len();
        self.values[[index / nt, index % nt]]
    }
}

pub(crate) fn check_times(t_grid: &[f64]) -> Result<()> {
    if t_grid.is_empty() {
        return Err(Error::Argument("time grid is empty".into()));
    }
    if t_grid.iter().any(|t| !t.is_finite()) {
        return Err(Error::Domain("non-finite time".into()));
    }
    if t_grid[0] < 0.0 {
        return Err(Error::Argument("time grid must start at or after t = 0".into()));
    }
    if t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Argument("time grid must be strictly increasing".into()));
    }
    Ok(())
}

/// `count` uniformly spaced times over `[0, 1]`.
pub fn unit_times(count: usize) -> Vec<f64> {
    SensorGrid::unit(count.max(1))
        .map(|g| g.points().to_vec())
        .unwrap_or_default()
}
