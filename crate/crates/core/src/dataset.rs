//! Triplet datasets `(u, y, s)` in the block layout used for operator
//! learning: `n` input realizations, each paired with `m` locations.
//!
//! In memory (and on disk) the branch inputs are stored once per realization;
//! row `r` of the expanded layout uses realization `r / m`.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::seq::index;

use crate::error::{ensure_len, Error, Result};
use crate::grf::GrfEnsemble;
use crate::io::{fmt_f64, read_file, write_csv, write_file, Decoder, Encoder};
use crate::rng::{self, Purpose};
use crate::solvers::GridSampled;

const DATASET_MAGIC: &[u8; 8] = b"VBDODS01";
pub const DATASET_VERSION: u8 = 1;

/// Z-score statistics of the training inputs and targets. `y` is not transformed.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub u_mean: Vec<f64>,
    pub u_std: Vec<f64>,
    pub s_mean: f64,
    pub s_std: f64,
}

impl NormStats {
    pub fn normalize_u(&self, u: &mut [f64]) {
        for ((v, m), s) in u.iter_mut().zip(&self.u_mean).zip(&self.u_std) {
            *v = (*v - m) / s;
        }
    }

    pub fn denormalize_u(&self, u: &mut [f64]) {
        for ((v, m), s) in u.iter_mut().zip(&self.u_mean).zip(&self.u_std) {
            *v = *v * s + m;
        }
    }

    pub fn normalize_s(&self, s: f64) -> f64 {
        (s - self.s_mean) / self.s_std
    }

    pub fn denormalize_s(&self, s: f64) -> f64 {
        s * self.s_std + self.s_mean
    }

    pub(crate) fn encode(&self, e: &mut Encoder) {
        e.f64s(&self.u_mean);
        e.f64s(&self.u_std);
        e.f64(self.s_mean);
        e.f64(self.s_std);
    }

    pub(crate) fn decode(d: &mut Decoder<'_>, sensors: usize) -> Result<Self> {
        let stats = NormStats {
            u_mean: d.f64s(sensors)?,
            u_std: d.f64s(sensors)?,
            s_mean: d.f64()?,
            s_std: d.f64()?,
        };
        if stats.u_std.iter().chain(std::iter::once(&stats.s_std)).any(|s| !(*s > 0.0)) {
            return Err(Error::Format("normalization std must be positive".into()));
        }
        Ok(stats)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletDataset {
    /// `n × sensors`, one row per input realization.
    inputs: Array2<f64>,
    /// `(n·m) × d` locations.
    y: Array2<f64>,
    /// `n·m` targets.
    s: Vec<f64>,
    per_input: usize,
    norm: Option<NormStats>,
}

impl TripletDataset {
    pub fn new(inputs: Array2<f64>, y: Array2<f64>, s: Vec<f64>, per_input: usize) -> Result<Self> {
        if per_input == 0 {
            return Err(Error::Argument("per-input sample count must be positive".into()));
        }
        let rows = inputs.nrows() * per_input;
        ensure_len("dataset y rows", rows, y.nrows())?;
        ensure_len("dataset s rows", rows, s.len())?;
        if y.ncols() == 0 {
            return Err(Error::Argument("location dimension must be positive".into()));
        }
        Ok(Self {
            inputs,
            y,
            s,
            per_input,
            norm: None,
        })
    }

    pub fn n_inputs(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn per_input(&self) -> usize {
        self.per_input
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn sensors(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn y_dim(&self) -> usize {
        self.y.ncols()
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn locations(&self) -> &Array2<f64> {
        &self.y
    }

    pub fn targets(&self) -> &[f64] {
        &self.s
    }

    pub fn norm(&self) -> Option<&NormStats> {
        self.norm.as_ref()
    }

    /// Index of the realization that row `row` belongs to.
    pub fn realization_of(&self, row: usize) -> usize {
        row / self.per_input
    }

    pub fn u_row(&self, row: usize) -> ArrayView1<'_, f64> {
        self.inputs.row(self.realization_of(row))
    }

    /// The expanded `(n·m) × sensors` matrix with each realization repeated `m` times.
    pub fn u_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), self.sensors()), |(r, c)| {
            self.inputs[[self.realization_of(r), c]]
        })
    }

    /// Query structure for the rows in `rows` (all rows if `None`).
    pub fn queries(&self, rows: Option<&[usize]>) -> QuerySet {
        let all: Vec<usize>;
        let rows = match rows {
            Some(r) => r,
            None => {
                all = (0..self.len()).collect();
                &all
            }
        };
        let mut u_index: HashMap<usize, usize> = HashMap::new();
        let mut u_rows = Vec::new();
        let mut y_index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut y_rows = Vec::new();
        let mut pairs = Vec::with_capacity(rows.len());
        for &r in rows {
            let real = self.realization_of(r);
            let ui = *u_index.entry(real).or_insert_with(|| {
                u_rows.push(real);
                u_rows.len() - 1
            });
            let key: Vec<u64> = self.y.row(r).iter().map(|v| v.to_bits()).collect();
            let yi = *y_index.entry(key).or_insert_with(|| {
                y_rows.push(r);
                y_rows.len() - 1
            });
            pairs.push((ui, yi));
        }
        let inputs = Array2::from_shape_fn((u_rows.len(), self.sensors()), |(i, c)| self.inputs[[u_rows[i], c]]);
        let locations = Array2::from_shape_fn((y_rows.len(), self.y_dim()), |(i, c)| self.y[[y_rows[i], c]]);
        QuerySet {
            inputs,
            locations,
            pairs,
        }
    }

    /// Z-scores `u` per sensor and `s` globally using this dataset's statistics.
    pub fn normalize(&self) -> Result<(TripletDataset, NormStats)> {
        if self.norm.is_some() {
            return Err(Error::Argument("dataset is already normalized".into()));
        }
        let n = self.n_inputs() as f64;
        let mut u_mean = Vec::with_capacity(self.sensors());
        let mut u_std = Vec::with_capacity(self.sensors());
        for (c, col) in self.inputs.columns().into_iter().enumerate() {
            let (mean, std) = mean_std(col.iter().copied(), n);
            if !(std > 1e-12 * mean.abs().max(1.0)) {
                return Err(Error::DegenerateFeature { sensor: c });
            }
            u_mean.push(mean);
            u_std.push(std);
        }
        let (s_mean, s_std) = mean_std(self.s.iter().copied(), self.s.len() as f64);
        if !(s_std > 1e-12 * s_mean.abs().max(1.0)) {
            return Err(Error::DegenerateTarget);
        }
        let stats = NormStats {
            u_mean,
            u_std,
            s_mean,
            s_std,
        };
        let ds = self.with_stats(&stats)?;
        Ok((ds, stats))
    }

    /// Applies externally computed statistics (e.g. training-set statistics to a test set).
    pub fn with_stats(&self, stats: &NormStats) -> Result<TripletDataset> {
        if self.norm.is_some() {
            return Err(Error::Argument("dataset is already normalized".into()));
        }
        ensure_len("normalization sensors", self.sensors(), stats.u_mean.len())?;
        let mut out = self.clone();
        for mut row in out.inputs.rows_mut() {
            stats.normalize_u(row.as_slice_mut().expect("standard layout"));
        }
        for v in out.s.iter_mut() {
            *v = stats.normalize_s(*v);
        }
        out.norm = Some(stats.clone());
        Ok(out)
    }

    pub fn denormalize(&self) -> Result<TripletDataset> {
        let stats = self.norm.as_ref().ok_or(Error::MissingNormStats)?;
        let mut out = self.clone();
        for mut row in out.inputs.rows_mut() {
            stats.denormalize_u(row.as_slice_mut().expect("standard layout"));
        }
        for v in out.s.iter_mut() {
            *v = stats.denormalize_s(*v);
        }
        out.norm = None;
        Ok(out)
    }

    /// Targets in original units.
    pub fn raw_targets(&self) -> Vec<f64> {
        match &self.norm {
            Some(st) => self.s.iter().map(|&v| st.denormalize_s(v)).collect(),
            None => self.s.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::default();
        e.bytes(DATASET_MAGIC);
        e.u8(DATASET_VERSION);
        e.u32(self.n_inputs() as u32);
        e.u32(self.per_input as u32);
        e.u32(self.sensors() as u32);
        e.u8(self.y_dim() as u8);
        e.u8(self.norm.is_some() as u8);
        e.f64s(self.inputs.iter());
        e.f64s(self.y.iter());
        e.f64s(&self.s);
        if let Some(stats) = &self.norm {
            stats.encode(&mut e);
        }
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::open(bytes, DATASET_MAGIC, "dataset", DATASET_VERSION)?;
        let n = d.u32()? as usize;
        let m = d.u32()? as usize;
        let sensors = d.u32()? as usize;
        let y_dim = d.u8()? as usize;
        let norm_flag = d.u8()?;
        if m == 0 || y_dim == 0 || norm_flag > 1 {
            return Err(Error::Format(format!("bad header: m = {m}, y-dim = {y_dim}, norm = {norm_flag}")));
        }
        let rows = n * m;
        let inputs = Array2::from_shape_vec((n, sensors), d.f64s(n * sensors)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let y = Array2::from_shape_vec((rows, y_dim), d.f64s(rows * y_dim)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let s = d.f64s(rows)?;
        let norm = if norm_flag == 1 {
            Some(NormStats::decode(&mut d, sensors)?)
        } else {
            None
        };
        d.finish()?;
        let mut ds = TripletDataset::new(inputs, y, s, m)?;
        ds.norm = norm;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    /// Expanded CSV with columns `u_1..u_S, y_1..y_d, s`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut header: Vec<String> = (1..=self.sensors()).map(|i| format!("u_{i}")).collect();
        header.extend((1..=self.y_dim()).map(|i| format!("y_{i}")));
        header.push("s".into());
        let rows = (0..self.len()).map(|r| {
            let mut cells: Vec<String> = self.u_row(r).iter().map(|v| fmt_f64(*v)).collect();
            cells.extend(self.y.row(r).iter().map(|v| fmt_f64(*v)));
            cells.push(fmt_f64(self.s[r]));
            cells
        });
        write_csv(path, &header, rows)
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone, n: f64) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Pairs each realization with `m` distinct locations of its solution, drawn
/// uniformly without replacement from the solution grid.
pub fn assemble<S: GridSampled + Sync>(
    ensemble: &GrfEnsemble,
    solutions: &[S],
    m: usize,
    seed: u64,
) -> Result<TripletDataset> {
    ensure_len("solutions per realization", ensemble.len(), solutions.len())?;
    if m == 0 {
        return Err(Error::Argument("m must be at least 1".into()));
    }
    let d = solutions.first().map_or(1, |s| s.location_dim());
    let n = ensemble.len();
    let mut y = Array2::<f64>::zeros((n * m, d));
    let mut s = vec![0.0; n * m];
    for (i, sol) in solutions.iter().enumerate() {
        let available = sol.location_count();
        if m > available {
            return Err(Error::Argument(format!(
                "m = {m} exceeds the {available} grid points of realization {i}"
            )));
        }
        ensure_len("location dimension", d, sol.location_dim())?;
        let mut rng = rng::keyed(seed, Purpose::Locations, i as u64, 0);
        let picks = index::sample(&mut rng, available, m);
        for (k, loc) in picks.iter().enumerate() {
            let row = i * m + k;
            sol.location(loc, y.row_mut(row).as_slice_mut().expect("standard layout"));
            s[row] = sol.value(loc);
        }
    }
    TripletDataset::new(ensemble.realizations.clone(), y, s, m)
}

/// Pairs each realization with every location of its solution grid, in grid
/// order. Used for test sets with known truth.
pub fn assemble_dense<S: GridSampled>(ensemble: &GrfEnsemble, solutions: &[S]) -> Result<TripletDataset> {
    ensure_len("solutions per realization", ensemble.len(), solutions.len())?;
    let first = solutions
        .first()
        .ok_or_else(|| Error::Argument("no solutions".into()))?;
    let (g, d) = (first.location_count(), first.location_dim());
    let n = ensemble.len();
    let mut y = Array2::<f64>::zeros((n * g, d));
    let mut s = vec![0.0; n * g];
    for (i, sol) in solutions.iter().enumerate() {
        ensure_len("grid size", g, sol.location_count())?;
        for loc in 0..g {
            let row = i * g + loc;
            sol.location(loc, y.row_mut(row).as_slice_mut().expect("standard layout"));
            s[row] = sol.value(loc);
        }
    }
    TripletDataset::new(ensemble.realizations.clone(), y, s, g)
}

/// Model inputs in factored form: distinct branch inputs, distinct locations,
/// and one `(input, location)` index pair per query row.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub inputs: Array2<f64>,
    pub locations: Array2<f64>,
    pub pairs: Vec<(usize, usize)>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Subset of query rows, sharing the input and location tables.
    pub fn select(&self, rows: &[usize]) -> QuerySet {
        QuerySet {
            inputs: self.inputs.clone(),
            locations: self.locations.clone(),
            pairs: rows.iter().map(|&r| self.pairs[r]).collect(),
        }
    }

    /// Applies input normalization to the branch inputs.
    pub fn normalized(&self, stats: &NormStats) -> QuerySet {
        let mut out = self.clone();
        for mut row in out.inputs.rows_mut() {
            stats.normalize_u(row.as_slice_mut().expect("standard layout"));
        }
        out
    }
}

/// Dense Cartesian query set: every realization with every grid location,
/// realization-major.
pub fn build_eval_set(ensemble: &GrfEnsemble, grid: &Array2<f64>) -> QuerySet {
    let g = grid.nrows();
    let pairs = (0..ensemble.len())
        .flat_map(|i| (0..g).map(move |j| (i, j)))
        .collect();
    QuerySet {
        inputs: ensemble.realizations.clone(),
        locations: grid.clone(),
        pairs,
    }
}

/// `G × 1` location table for ODE problems.
pub fn time_grid(times: &[f64]) -> Array2<f64> {
    Array2::from_shape_fn((times.len(), 1), |(i, _)| times[i])
}

/// `(X·T) × 2` location table `(x, t)`, x-major.
pub fn space_time_grid(xs: &[f64], ts: &[f64]) -> Array2<f64> {
    let nt = ts.len();
    Array2::from_shape_fn((xs.len() * nt, 2), |(r, c)| if c == 0 { xs[r / nt] } else { ts[r % nt] })
}
