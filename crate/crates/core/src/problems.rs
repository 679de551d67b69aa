//! The four benchmark operators: data generation settings, default model
//! architectures and reference errors.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;

use crate::dataset::{assemble, assemble_dense, space_time_grid, time_grid, TripletDataset};
use crate::deeponet::DeepONetSpec;
use crate::error::{Error, Result};
use crate::grf::{sample_grf, GrfEnsemble, SensorGrid, DEFAULT_LENGTH_SCALE, DEFAULT_SENSORS};
use crate::solvers::{
    solve_advection_diffusion, solve_antiderivative, solve_diffusion_reaction, solve_pendulum, unit_times,
    DiffusionReaction, FieldSolution, InputFunction, OdeSolution,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Problem {
    /// `ds/dt = u(t)`.
    Ad,
    /// `s1' = s2`, `s2' = -sin(s1) + u(t)`.
    Pendulum,
    /// `s_t = D s_xx + k s² + u(x)`.
    Dr,
    /// `s_t + s_x - 0.1 s_xx = 0`, `s(x, 0) = sin²(2π u(x))`.
    Advd,
}

pub const ALL_PROBLEMS: [Problem; 4] = [Problem::Ad, Problem::Pendulum, Problem::Dr, Problem::Advd];

impl Problem {
    pub fn name(self) -> &'static str {
        match self {
            Problem::Ad => "ad",
            Problem::Pendulum => "pendulum",
            Problem::Dr => "dr",
            Problem::Advd => "advd",
        }
    }

    pub fn is_ode(self) -> bool {
        matches!(self, Problem::Ad | Problem::Pendulum)
    }

    pub fn y_dim(self) -> usize {
        if self.is_ode() {
            1
        } else {
            2
        }
    }

    /// `(width, depth)` of the branch and trunk nets.
    pub fn architecture(self) -> (usize, usize) {
        match self {
            Problem::Ad => (30, 3),
            Problem::Pendulum | Problem::Dr => (25, 4),
            Problem::Advd => (35, 3),
        }
    }

    pub fn spec(self, sensors: usize) -> Result<DeepONetSpec> {
        let (width, depth) = self.architecture();
        DeepONetSpec::standard(sensors, self.y_dim(), width, depth)
    }

    /// Training realizations.
    pub fn default_train_inputs(self) -> usize {
        match self {
            Problem::Ad => 3000,
            Problem::Pendulum => 3500,
            Problem::Dr => 500,
            Problem::Advd => 1000,
        }
    }

    /// Locations drawn per training realization.
    pub fn default_per_input(self) -> usize {
        if self.is_ode() {
            20
        } else {
            100
        }
    }

    /// Test realizations evaluated on the full grid.
    pub fn default_test_inputs(self) -> usize {
        if self.is_ode() {
            10_000
        } else {
            200
        }
    }

    pub fn default_epochs(self) -> u64 {
        if self.is_ode() {
            20_000
        } else {
            50_000
        }
    }

    pub fn default_normalize(self) -> bool {
        self.is_ode()
    }

    /// Reference test NMSE `(variational, deterministic)`.
    pub fn reference_nmse(self) -> (f64, f64) {
        match self {
            Problem::Ad => (0.00009, 0.00016),
            Problem::Pendulum => (0.00025, 0.00033),
            Problem::Dr => (0.00610, 0.00458),
            Problem::Advd => (0.00355, 0.00646),
        }
    }
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Problem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ALL_PROBLEMS
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Argument(format!("unknown problem '{s}' (expected ad, pendulum, dr or advd)")))
    }
}

/// Grid and solver settings shared by training and test generation.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSetup {
    pub problem: Problem,
    pub sensors: usize,
    pub length_scale: f64,
    /// Output time steps on `[0, 1]`.
    pub time_steps: usize,
    /// Output space points on `[0, 1]` (PDE problems).
    pub space_points: usize,
    pub reaction: DiffusionReaction,
    pub pendulum_initial: (f64, f64),
}

impl ProblemSetup {
    pub fn new(problem: Problem) -> Self {
        Self {
            problem,
            sensors: DEFAULT_SENSORS,
            length_scale: DEFAULT_LENGTH_SCALE,
            time_steps: 100,
            space_points: 100,
            reaction: DiffusionReaction::default(),
            pendulum_initial: (0.0, 0.0),
        }
    }

    pub fn sensor_grid(&self) -> Result<SensorGrid> {
        SensorGrid::unit(self.sensors)
    }

    pub fn times(&self) -> Vec<f64> {
        unit_times(self.time_steps)
    }

    pub fn space_grid(&self) -> Result<SensorGrid> {
        SensorGrid::unit(self.space_points)
    }

    /// Evaluation locations in the order used by the solutions.
    pub fn eval_grid(&self) -> Result<Array2<f64>> {
        if self.problem.is_ode() {
            Ok(time_grid(&self.times()))
        } else {
            Ok(space_time_grid(self.space_grid()?.points(), &self.times()))
        }
    }

    pub fn sample_inputs(&self, n: usize, seed: u64) -> Result<GrfEnsemble> {
        sample_grf(&self.sensor_grid()?, self.length_scale, n, seed)
    }

    /// Values seen by the branch net: the sampled field itself, or the
    /// initial condition `sin²(2π u)` for the advection-diffusion problem.
    pub fn branch_inputs(&self, raw: &GrfEnsemble) -> GrfEnsemble {
        match self.problem {
            Problem::Advd => raw.map_values(|v| (2.0 * std::f64::consts::PI * v).sin().powi(2)),
            _ => raw.clone(),
        }
    }

    /// Solves every realization of `branch` (the output of [`Self::branch_inputs`]).
    pub fn solve(&self, branch: &GrfEnsemble) -> Result<Solutions> {
        let grid = &branch.grid;
        let times = self.times();
        let rows: Vec<Vec<f64>> = branch.realizations.outer_iter().map(|r| r.to_vec()).collect();
        let input = |row: &Vec<f64>| InputFunction::new(grid.clone(), row.clone());
        match self.problem {
            Problem::Ad | Problem::Pendulum => {
                let sols = rows
                    .par_iter()
                    .map(|row| {
                        let u = input(row)?;
                        if self.problem == Problem::Ad {
                            solve_antiderivative(&u, &times)
                        } else {
                            solve_pendulum(&u, &times, self.pendulum_initial)
                        }
                    })
                    .collect::<Result<Vec<OdeSolution>>>()?;
                Ok(Solutions::Ode(sols))
            }
            Problem::Dr | Problem::Advd => {
                let xs = self.space_grid()?;
                let sols = rows
                    .par_iter()
                    .map(|row| {
                        let u = input(row)?;
                        if self.problem == Problem::Dr {
                            solve_diffusion_reaction(&u, self.reaction, &xs, &times)
                        } else {
                            solve_advection_diffusion(&u, &xs, &times)
                        }
                    })
                    .collect::<Result<Vec<FieldSolution>>>()?;
                Ok(Solutions::Field(sols))
            }
        }
    }

    /// Training triplets: `n` realizations with `m` random locations each.
    pub fn training_set(&self, n: usize, m: usize, seed: u64) -> Result<TripletDataset> {
        let branch = self.branch_inputs(&self.sample_inputs(n, seed)?);
        match self.solve(&branch)? {
            Solutions::Ode(s) => assemble(&branch, &s, m, seed),
            Solutions::Field(s) => assemble(&branch, &s, m, seed),
        }
    }

    /// Test triplets: `n` realizations on the full evaluation grid.
    pub fn test_set(&self, n: usize, seed: u64) -> Result<TripletDataset> {
        let branch = self.branch_inputs(&self.sample_inputs(n, seed)?);
        match self.solve(&branch)? {
            Solutions::Ode(s) => assemble_dense(&branch, &s),
            Solutions::Field(s) => assemble_dense(&branch, &s),
        }
    }
}

pub enum Solutions {
    Ode(Vec<OdeSolution>),
    Field(Vec<FieldSolution>),
}
