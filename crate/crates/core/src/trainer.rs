//! Training loop: noise resampling, ELBO gradients, and first-order updates.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::dataset::{QuerySet, TripletDataset};
use crate::deeponet::{elbo_loss, DeepONetSpec, KlEstimator, Likelihood, LossConfig, DEFAULT_N_TILDE};
use crate::error::{ensure_len, Error, Result};
use crate::io::{fmt_f64, write_csv};
use crate::rng::{self, Purpose};
use crate::variational::{NoiseDraw, VariationalParams};

/// `delta` used for the deterministic baseline (`softplus(-50) ≈ 2e-22`).
pub const FROZEN_DELTA: f64 = -50.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
    Sgd,
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            OptimizerKind::Adam { .. } => 0,
            OptimizerKind::Sgd => 1,
        }
    }
}

/// Moment estimates over the stacked `[mu | delta]` vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

fn apply_update(kind: OptimizerKind, lr: f64, state: &mut OptimizerState, params: &mut [f64], grad: &[f64], frozen: impl Fn(usize) -> bool) {
    state.t += 1;
    match kind {
        OptimizerKind::Sgd => {
            for (i, (p, g)) in params.iter_mut().zip(grad).enumerate() {
                if !frozen(i) {
                    *p -= lr * g;
                }
            }
        }
        OptimizerKind::Adam { beta1, beta2, epsilon } => {
            let bc1 = 1.0 - beta1.powf(state.t as f64);
            let bc2 = 1.0 - beta2.powf(state.t as f64);
            for i in 0..params.len() {
                if frozen(i) {
                    continue;
                }
                let g = grad[i];
                state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
                state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
                let m_hat = state.m[i] / bc1;
                let v_hat = state.v[i] / bc2;
                params[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Variational,
    /// Point-estimate network: `delta` frozen at [`FROZEN_DELTA`], no
    /// complexity cost, one zero-noise draw, unit output sigma.
    Deterministic,
}

impl TrainMode {
    pub(crate) fn code(self) -> u8 {
        match self {
            TrainMode::Variational => 0,
            TrainMode::Deterministic => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(TrainMode::Variational),
            1 => Ok(TrainMode::Deterministic),
            other => Err(Error::Format(format!("unknown train mode {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSize {
    Full,
    /// Approximate rows per step; rounded to whole input realizations.
    Rows(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: u64,
    pub learning_rate: f64,
    pub n_tilde: usize,
    pub batch: BatchSize,
    pub seed: u64,
    /// Multiplier on the complexity cost before minibatch rescaling.
    pub kl_weight: f64,
    pub kl_estimator: KlEstimator,
    pub optimizer: OptimizerKind,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20_000,
            learning_rate: 1e-3,
            n_tilde: DEFAULT_N_TILDE,
            batch: BatchSize::Full,
            seed: 0,
            kl_weight: 1.0,
            kl_estimator: KlEstimator::ClosedForm,
            optimizer: OptimizerKind::adam(),
            mode: TrainMode::Variational,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument(format!("learning rate {} must be non-negative", self.learning_rate)));
        }
        if self.n_tilde == 0 {
            return Err(Error::Argument("n_tilde must be at least 1".into()));
        }
        if self.batch == BatchSize::Rows(0) {
            return Err(Error::Argument("batch size must be positive".into()));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::Argument(format!("kl weight {} must be non-negative", self.kl_weight)));
        }
        if let OptimizerKind::Adam { beta1, beta2, epsilon } = self.optimizer {
            for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
                if !(b > 0.0 && b < 1.0) {
                    return Err(Error::Argument(format!("{name} = {b} must lie in (0, 1)")));
                }
            }
            if !(epsilon > 0.0) {
                return Err(Error::Argument("epsilon must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    /// Sum of the step objectives over the epoch.
    pub total_loss: f64,
    /// Closed-form complexity cost after the last step's evaluation point.
    pub kl: f64,
    /// Likelihood cost summed over the epoch's steps.
    pub nll: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn extend(&mut self, other: TrainTrace) {
        self.records.extend(other.records);
    }

    /// `epoch,total_loss,kl,nll`. Wall time goes to [`TrainTrace::write_timing_csv`].
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let header = ["epoch", "total_loss", "kl", "nll"].map(String::from);
        write_csv(
            path,
            &header,
            self.records
                .iter()
                .map(|r| vec![r.epoch.to_string(), fmt_f64(r.total_loss), fmt_f64(r.kl), fmt_f64(r.nll)]),
        )
    }

    /// Appends rows to an existing trace file, or writes a new one with a header.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        if !path.exists() {
            return self.write_csv(path);
        }
        let rows: Vec<Vec<String>> = self
            .records
            .iter()
            .map(|r| vec![r.epoch.to_string(), fmt_f64(r.total_loss), fmt_f64(r.kl), fmt_f64(r.nll)])
            .collect();
        append_rows(path, &rows)
    }

    pub fn append_timing_csv(&self, path: &Path) -> Result<()> {
        if !path.exists() {
            return self.write_timing_csv(path);
        }
        let rows: Vec<Vec<String>> = self
            .records
            .iter()
            .map(|r| vec![r.epoch.to_string(), format!("{:.6}", r.seconds)])
            .collect();
        append_rows(path, &rows)
    }

    pub fn write_timing_csv(&self, path: &Path) -> Result<()> {
        let header = ["epoch", "seconds"].map(String::from);
        write_csv(
            path,
            &header,
            self.records.iter().map(|r| vec![r.epoch.to_string(), format!("{:.6}", r.seconds)]),
        )
    }
}

fn append_rows(path: &Path, rows: &[Vec<String>]) -> Result<()> {
    use std::io::Write;
    let io = |e| Error::io(path, e);
    let file = std::fs::OpenOptions::new().append(true).open(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    for row in rows {
        writeln!(w, "{}", row.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Everything needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: VariationalParams,
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
}

impl TrainState {
    pub fn initial(spec: &DeepONetSpec, seed: u64, mode: TrainMode) -> Self {
        let mut params = spec.init_params(seed);
        if mode == TrainMode::Deterministic {
            params.delta.iter_mut().for_each(|d| *d = FROZEN_DELTA);
        }
        let n = params.len();
        Self {
            params,
            optimizer: OptimizerState::new(2 * n),
            epoch: 0,
            step: 0,
        }
    }
}

pub struct Trainer<'a> {
    spec: DeepONetSpec,
    ds: &'a TripletDataset,
    cfg: TrainConfig,
    state: TrainState,
    full: Option<QuerySet>,
}

impl<'a> Trainer<'a> {
    pub fn new(spec: &DeepONetSpec, ds: &'a TripletDataset, cfg: &TrainConfig) -> Result<Self> {
        let state = TrainState::initial(spec, cfg.seed, cfg.mode);
        Self::from_state(spec, ds, cfg, state)
    }

    pub fn from_state(spec: &DeepONetSpec, ds: &'a TripletDataset, cfg: &TrainConfig, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        ensure_len("dataset sensors", spec.sensors(), ds.sensors())?;
        ensure_len("dataset location dimension", spec.y_dim(), ds.y_dim())?;
        ensure_len("variational parameters", spec.param_count(), state.params.len())?;
        ensure_len("optimizer moments", 2 * state.params.len(), state.optimizer.m.len())?;
        ensure_len("optimizer moments", 2 * state.params.len(), state.optimizer.v.len())?;
        if ds.is_empty() {
            return Err(Error::Argument("training dataset is empty".into()));
        }
        let full = matches!(cfg.batch, BatchSize::Full).then(|| ds.queries(None));
        Ok(Self {
            spec: spec.clone(),
            ds,
            cfg: cfg.clone(),
            state,
            full,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn spec(&self) -> &DeepONetSpec {
        &self.spec
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Snapshot of the current state, resumable with [`trainer_from_checkpoint`].
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_train_state(
            &self.spec,
            self.cfg.mode,
            self.cfg.optimizer.code(),
            &self.state,
            self.ds.norm().cloned(),
        )
    }

    fn batches(&self, epoch: u64) -> Vec<Vec<usize>> {
        let n = self.ds.n_inputs();
        let m = self.ds.per_input();
        match self.cfg.batch {
            BatchSize::Full => vec![Vec::new()],
            BatchSize::Rows(rows) => {
                let per_batch = (rows / m).clamp(1, n);
                let mut order: Vec<usize> = (0..n).collect();
                let mut r = rng::keyed(self.cfg.seed, Purpose::Shuffle, epoch, 0);
                order.shuffle(&mut r);
                order
                    .chunks(per_batch)
                    .map(|blk| blk.iter().flat_map(|&i| i * m..(i + 1) * m).collect())
                    .collect()
            }
        }
    }

    fn loss_config(&self, batch_rows: usize) -> LossConfig {
        match self.cfg.mode {
            TrainMode::Variational => LossConfig {
                kl_scale: self.cfg.kl_weight * batch_rows as f64 / self.ds.len() as f64,
                kl_estimator: self.cfg.kl_estimator,
                likelihood: Likelihood::Heteroscedastic,
            },
            TrainMode::Deterministic => LossConfig {
                kl_scale: 0.0,
                kl_estimator: KlEstimator::ClosedForm,
                likelihood: Likelihood::FixedSigma(1.0),
            },
        }
    }

    fn noises(&self, step: u64) -> Vec<NoiseDraw> {
        let p = self.spec.param_count();
        match self.cfg.mode {
            TrainMode::Variational => (0..self.cfg.n_tilde as u64)
                .map(|d| NoiseDraw::generate(p, self.cfg.seed, Purpose::TrainNoise, step, d))
                .collect(),
            TrainMode::Deterministic => vec![NoiseDraw::zeros(p)],
        }
    }

    /// Runs one epoch. On error the state is left at the previous epoch.
    pub fn epoch(&mut self) -> Result<EpochRecord> {
        let start = Instant::now();
        let epoch = self.state.epoch;
        let saved = self.state.clone();
        let p = self.spec.param_count();
        let frozen_delta = self.cfg.mode == TrainMode::Deterministic;
        let (mut total, mut nll, mut kl) = (0.0, 0.0, 0.0);
        let mut packed = vec![0.0; 2 * p];
        let mut grad = vec![0.0; 2 * p];
        for rows in self.batches(epoch) {
            let subset;
            let (queries, targets_owned, batch_rows);
            match &self.full {
                Some(q) => {
                    queries = q;
                    targets_owned = None;
                    batch_rows = q.len();
                }
                None => {
                    subset = self.ds.queries(Some(&rows));
                    queries = &subset;
                    targets_owned = Some(rows.iter().map(|&r| self.ds.targets()[r]).collect::<Vec<_>>());
                    batch_rows = rows.len();
                }
            }
            let targets = targets_owned.as_deref().unwrap_or(self.ds.targets());
            let noises = self.noises(self.state.step);
            let cfg = self.loss_config(batch_rows);
            let res = match elbo_loss(&self.spec, &self.state.params, queries, targets, &noises, &cfg) {
                Ok(r) => r,
                Err(Error::NonFiniteLoss { draw }) => {
                    self.state = saved;
                    return Err(Error::TrainingDivergence { epoch, draw });
                }
                Err(e) => {
                    self.state = saved;
                    return Err(e);
                }
            };
            total += res.loss;
            nll += res.nll;
            kl = res.kl;

            packed[..p].copy_from_slice(&self.state.params.mu);
            packed[p..].copy_from_slice(&self.state.params.delta);
            grad[..p].copy_from_slice(&res.grad_mu);
            grad[p..].copy_from_slice(&res.grad_delta);
            apply_update(
                self.cfg.optimizer,
                self.cfg.learning_rate,
                &mut self.state.optimizer,
                &mut packed,
                &grad,
                |i| frozen_delta && i >= p,
            );
            self.state.params.mu.copy_from_slice(&packed[..p]);
            self.state.params.delta.copy_from_slice(&packed[p..]);
            self.state.step += 1;
        }
        if packed.iter().any(|v| !v.is_finite()) {
            self.state = saved;
            return Err(Error::TrainingDivergence { epoch, draw: 0 });
        }
        self.state.epoch += 1;
        Ok(EpochRecord {
            epoch: self.state.epoch,
            total_loss: total,
            kl,
            nll,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Runs `epochs` epochs, calling `on_epoch` after each one.
    pub fn run(
        &mut self,
        epochs: u64,
        mut on_epoch: impl FnMut(&TrainState, &EpochRecord) -> Result<()>,
    ) -> Result<TrainTrace> {
        let mut trace = TrainTrace::default();
        for _ in 0..epochs {
            let rec = self.epoch()?;
            on_epoch(&self.state, &rec)?;
            trace.records.push(rec);
        }
        Ok(trace)
    }
}

/// Trains from a fresh initialization for `cfg.epochs` epochs.
pub fn train(spec: &DeepONetSpec, ds: &TripletDataset, cfg: &TrainConfig) -> Result<(VariationalParams, TrainTrace)> {
    let mut t = Trainer::new(spec, ds, cfg)?;
    let trace = t.run(cfg.epochs, |_, _| Ok(()))?;
    Ok((t.into_state().params, trace))
}

/// Continues training from a checkpoint for `cfg.epochs` more epochs.
pub fn resume(
    path: &Path,
    spec: &DeepONetSpec,
    ds: &TripletDataset,
    cfg: &TrainConfig,
) -> Result<(VariationalParams, TrainTrace)> {
    let ckpt = Checkpoint::load(path)?;
    let mut t = trainer_from_checkpoint(ckpt, spec, ds, cfg)?;
    let trace = t.run(cfg.epochs, |_, _| Ok(()))?;
    Ok((t.into_state().params, trace))
}

/// Validates a checkpoint against the expected spec and mode and builds a trainer.
pub fn trainer_from_checkpoint<'a>(
    ckpt: Checkpoint,
    spec: &DeepONetSpec,
    ds: &'a TripletDataset,
    cfg: &TrainConfig,
) -> Result<Trainer<'a>> {
    ckpt.check_spec(spec)?;
    if ckpt.mode != cfg.mode {
        return Err(Error::SpecMismatch(format!(
            "checkpoint was trained in {:?} mode, config requests {:?}",
            ckpt.mode, cfg.mode
        )));
    }
    let Some(state) = ckpt.state else {
        return Err(Error::Format("checkpoint carries no training state".into()));
    };
    if state.optimizer_kind != cfg.optimizer.code() {
        return Err(Error::SpecMismatch("checkpoint optimizer differs from config".into()));
    }
    Trainer::from_state(
        spec,
        ds,
        cfg,
        TrainState {
            params: ckpt.params,
            optimizer: state.optimizer,
            epoch: state.epoch,
            step: state.step,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, NetSpec};
    use crate::deeponet::MergeMode;
    use ndarray::Array2;

    fn toy() -> (DeepONetSpec, TripletDataset) {
        let spec = DeepONetSpec::new(
            NetSpec::dense(3, 4, 1, Activation::Relu).unwrap(),
            NetSpec::dense(1, 4, 1, Activation::Relu).unwrap(),
            MergeMode::Hadamard,
            1e-6,
        )
        .unwrap();
        let inputs = Array2::from_shape_fn((4, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        let y = Array2::from_shape_fn((8, 1), |(r, _)| (r % 2) as f64 * 0.5 + 0.1);
        let s: Vec<f64> = (0..8).map(|r| inputs[[r / 2, 0]] * y[[r, 0]]).collect();
        (spec, TripletDataset::new(inputs, y, s, 2).unwrap())
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 5,
            n_tilde: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (spec, ds) = toy();
        let cfg = TrainConfig { epochs: 0, ..quick_cfg() };
        let (vp, trace) = train(&spec, &ds, &cfg).unwrap();
        assert_eq!(vp, spec.init_params(cfg.seed));
        assert!(trace.is_empty());
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let (spec, ds) = toy();
        for optimizer in [OptimizerKind::adam(), OptimizerKind::Sgd] {
            let cfg = TrainConfig {
                learning_rate: 0.0,
                optimizer,
                ..quick_cfg()
            };
            let (vp, trace) = train(&spec, &ds, &cfg).unwrap();
            assert_eq!(vp, spec.init_params(cfg.seed));
            assert_eq!(trace.len(), 5);
            assert!(trace.records.iter().all(|r| r.kl >= 0.0));
        }
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let (spec, ds) = toy();
        let a = train(&spec, &ds, &quick_cfg()).unwrap();
        let b = train(&spec, &ds, &quick_cfg()).unwrap();
        assert_eq!(a.0, b.0);
        let la: Vec<u64> = a.1.records.iter().map(|r| r.total_loss.to_bits()).collect();
        let lb: Vec<u64> = b.1.records.iter().map(|r| r.total_loss.to_bits()).collect();
        assert_eq!(la, lb);
    }

    #[test]
    fn deterministic_mode_keeps_delta_frozen() {
        let (spec, ds) = toy();
        let cfg = TrainConfig {
            mode: TrainMode::Deterministic,
            ..quick_cfg()
        };
        let (vp, trace) = train(&spec, &ds, &cfg).unwrap();
        assert!(vp.delta.iter().all(|&d| d == FROZEN_DELTA));
        assert_ne!(vp.mu, spec.init_params(cfg.seed).mu);
        assert!(trace.records.iter().all(|r| r.total_loss == r.nll));
    }

    #[test]
    fn minibatches_cover_every_row_once() {
        let (spec, ds) = toy();
        let cfg = TrainConfig {
            batch: BatchSize::Rows(4),
            ..quick_cfg()
        };
        let t = Trainer::new(&spec, &ds, &cfg).unwrap();
        let batches = t.batches(3);
        assert_eq!(batches.len(), 2);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
        assert!(batches.iter().all(|b| b.len() == 4 && b[0] % 2 == 0 && b[1] == b[0] + 1));
        let (_, trace) = train(&spec, &ds, &cfg).unwrap();
        assert_eq!(trace.len(), 5);
    }

    #[test]
    fn invalid_config_rejected() {
        let (spec, ds) = toy();
        for cfg in [
            TrainConfig { n_tilde: 0, ..quick_cfg() },
            TrainConfig { learning_rate: -1.0, ..quick_cfg() },
            TrainConfig { batch: BatchSize::Rows(0), ..quick_cfg() },
            TrainConfig {
                optimizer: OptimizerKind::Adam { beta1: 1.0, beta2: 0.999, epsilon: 1e-8 },
                ..quick_cfg()
            },
        ] {
            assert!(matches!(Trainer::new(&spec, &ds, &cfg), Err(Error::Argument(_))));
        }
        let other = DeepONetSpec::standard(5, 1, 4, 1).unwrap();
        assert!(matches!(Trainer::new(&other, &ds, &quick_cfg()), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn divergence_rolls_back_epoch() {
        let (spec, ds) = toy();
        let cfg = TrainConfig {
            learning_rate: 1e200,
            optimizer: OptimizerKind::Sgd,
            epochs: 50,
            ..quick_cfg()
        };
        let mut t = Trainer::new(&spec, &ds, &cfg).unwrap();
        let mut last_good = None;
        let err = t.run(50, |s, _| {
            last_good = Some(s.clone());
            Ok(())
        });
        assert!(matches!(err, Err(Error::TrainingDivergence { .. })));
        let state = t.state();
        assert!(state.params.mu.iter().all(|v| v.is_finite()));
        if let Some(good) = last_good {
            assert_eq!(&good, state);
        }
    }

    #[test]
    fn adam_step_matches_hand_computation() {
        let mut st = OptimizerState::new(2);
        let mut p = vec![1.0, -2.0];
        apply_update(OptimizerKind::adam(), 0.1, &mut st, &mut p, &[0.5, -3.0], |_| false);
        // first bias-corrected step is lr * g / (|g| + eps')
        assert!((p[0] - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((p[1] - (-2.0 + 0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(st.t, 1);
        apply_update(OptimizerKind::Sgd, 0.5, &mut st, &mut p, &[2.0, 0.0], |i| i == 1);
        assert!((p[0] - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8) - 1.0)).abs() < 1e-15);
    }
}
