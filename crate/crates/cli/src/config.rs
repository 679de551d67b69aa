//! Run configuration: a TOML file layered over a problem preset.
//!
//! Every field has a preset value, so a config file only needs the keys it
//! changes. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vbdo_core::deeponet::{DeepONetSpec, KlEstimator, MergeMode, DEFAULT_N_TILDE, DEFAULT_SIGMA_FLOOR};
use vbdo_core::nn::{Activation, NetSpec};
use vbdo_core::predictor::{CiMethod, DEFAULT_SAMPLES};
use vbdo_core::problems::{Problem, ProblemSetup};
use vbdo_core::solvers::DiffusionReaction;
use vbdo_core::trainer::{BatchSize, OptimizerKind, TrainConfig, TrainMode};

use crate::CliError;

const TEST_SEED_SALT: u64 = 0x7E57_0000_0000_0001;
const PDF_SEED_SALT: u64 = 0x9DF0_0000_0000_0002;
/// TOML integers are signed 64-bit, so derived seeds stay below 2^63.
const SEED_MASK: u64 = i64::MAX as u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeChoice {
    Hadamard,
    Dot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlChoice {
    ClosedForm,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerChoice {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CiChoice {
    Moments,
    Empirical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub sensors: usize,
    pub length_scale: f64,
    pub time_steps: usize,
    /// Spatial output points (PDE problems).
    pub space_points: usize,
    pub train_inputs: usize,
    /// Random locations kept per training realization.
    pub per_input: usize,
    pub test_inputs: usize,
    pub normalize: bool,
    /// Defaults to the global seed.
    pub train_seed: Option<u64>,
    /// Defaults to a value derived from the global seed.
    pub test_seed: Option<u64>,
    pub diffusivity: f64,
    pub reaction: f64,
    pub pendulum_initial: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub depth: usize,
    pub merge: MergeChoice,
    pub sigma_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: u64,
    pub learning_rate: f64,
    pub n_tilde: usize,
    /// Rows per minibatch; 0 trains on the full set.
    pub batch_rows: usize,
    pub kl_weight: f64,
    pub kl_estimator: KlChoice,
    pub optimizer: OptimizerChoice,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Checkpoint cadence in epochs; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Progress line cadence in epochs; 0 disables progress output.
    pub progress_every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictSection {
    pub samples: usize,
    pub ci_method: CiChoice,
    pub ci_level: f64,
    pub coverage_levels: Vec<f64>,
    /// Test realizations exported as per-realization CSVs.
    pub export_realizations: usize,
    pub pdf_realizations: usize,
    pub pdf_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(with = "problem_name")]
    pub problem: Problem,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub predict: PredictSection,
}

impl RunConfig {
    pub fn preset(problem: Problem) -> Self {
        let setup = ProblemSetup::new(problem);
        let (width, depth) = problem.architecture();
        let adam = OptimizerKind::adam();
        let OptimizerKind::Adam { beta1, beta2, epsilon } = adam else {
            unreachable!("adam() returns the Adam variant")
        };
        let lr = TrainConfig::default().learning_rate;
        Self {
            problem,
            seed: 0,
            data: DataConfig {
                sensors: setup.sensors,
                length_scale: setup.length_scale,
                time_steps: setup.time_steps,
                space_points: setup.space_points,
                train_inputs: problem.default_train_inputs(),
                per_input: problem.default_per_input(),
                test_inputs: problem.default_test_inputs(),
                normalize: problem.default_normalize(),
                train_seed: None,
                test_seed: None,
                diffusivity: setup.reaction.diffusivity,
                reaction: setup.reaction.reaction,
                pendulum_initial: [setup.pendulum_initial.0, setup.pendulum_initial.1],
            },
            model: ModelConfig {
                width,
                depth,
                merge: MergeChoice::Hadamard,
                sigma_floor: DEFAULT_SIGMA_FLOOR,
            },
            train: TrainSection {
                epochs: problem.default_epochs(),
                learning_rate: lr,
                n_tilde: DEFAULT_N_TILDE,
                batch_rows: 0,
                kl_weight: 1.0,
                kl_estimator: KlChoice::ClosedForm,
                optimizer: OptimizerChoice::Adam,
                beta1,
                beta2,
                epsilon,
                checkpoint_every: 1000,
                progress_every: 100,
            },
            predict: PredictSection {
                samples: DEFAULT_SAMPLES,
                ci_method: CiChoice::Moments,
                ci_level: 0.95,
                coverage_levels: vec![0.68, 0.95, 0.99],
                export_realizations: 3,
                pdf_realizations: 10_000,
                pdf_seed: None,
            },
        }
    }

    /// Preset for the file's `problem` (or `problem_override`) with the file's keys merged on top.
    pub fn from_toml(text: &str, problem_override: Option<Problem>) -> Result<Self, CliError> {
        let file: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("config is not valid TOML: {e}")))?;
        let problem = match (problem_override, file.get("problem")) {
            (Some(p), _) => p,
            (None, Some(toml::Value::String(s))) => s.parse().map_err(|e| CliError::Usage(format!("{e}")))?,
            (None, Some(_)) => return Err(CliError::Usage("config key 'problem' must be a string".into())),
            (None, None) => return Err(CliError::Usage("no problem given: set 'problem' or pass --preset".into())),
        };
        let mut merged = toml::Table::try_from(Self::preset(problem)).expect("presets serialize");
        merge_tables(&mut merged, file);
        merged.insert("problem".into(), toml::Value::String(problem.name().into()));
        let cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, problem_override: Option<Problem>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
        Self::from_toml(&text, problem_override)
    }

    /// Fills derived seeds so the dumped config pins every value.
    pub fn resolve(&mut self) {
        self.data.train_seed.get_or_insert(self.seed);
        self.data.test_seed.get_or_insert(self.test_seed());
        self.predict.pdf_seed.get_or_insert(self.pdf_seed());
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        let seeds = [Some(self.seed), self.data.train_seed, self.data.test_seed, self.predict.pdf_seed];
        if seeds.into_iter().flatten().any(|s| s > SEED_MASK) {
            return usage(format!("seeds must not exceed {SEED_MASK}"));
        }
        let d = &self.data;
        if d.sensors < 2 || d.time_steps < 2 || d.space_points < 2 {
            return usage("sensors, time_steps and space_points must be at least 2".into());
        }
        if d.train_inputs == 0 || d.test_inputs == 0 || d.per_input == 0 {
            return usage("train_inputs, test_inputs and per_input must be positive".into());
        }
        let grid = if self.problem.is_ode() { d.time_steps } else { d.time_steps * d.space_points };
        if d.per_input > grid {
            return usage(format!("per_input {} exceeds the {grid} grid locations", d.per_input));
        }
        if !(d.length_scale > 0.0) {
            return usage("length_scale must be positive".into());
        }
        if self.model.width == 0 || self.model.depth == 0 {
            return usage("model width and depth must be positive".into());
        }
        let p = &self.predict;
        if p.samples < 2 {
            return usage("predict.samples must be at least 2".into());
        }
        for level in p.coverage_levels.iter().chain(std::iter::once(&p.ci_level)) {
            if !(*level > 0.0 && *level < 1.0) {
                return usage(format!("confidence level {level} must lie in (0, 1)"));
            }
        }
        self.train_config(TrainMode::Variational)
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn setup(&self) -> ProblemSetup {
        ProblemSetup {
            problem: self.problem,
            sensors: self.data.sensors,
            length_scale: self.data.length_scale,
            time_steps: self.data.time_steps,
            space_points: self.data.space_points,
            reaction: DiffusionReaction {
                diffusivity: self.data.diffusivity,
                reaction: self.data.reaction,
            },
            pendulum_initial: (self.data.pendulum_initial[0], self.data.pendulum_initial[1]),
        }
    }

    pub fn spec(&self) -> Result<DeepONetSpec, CliError> {
        let m = &self.model;
        let merge = match m.merge {
            MergeChoice::Hadamard => MergeMode::Hadamard,
            MergeChoice::Dot => MergeMode::Dot,
        };
        let build = || -> vbdo_core::Result<DeepONetSpec> {
            DeepONetSpec::new(
                NetSpec::dense(self.data.sensors, m.width, m.depth, Activation::Relu)?,
                NetSpec::dense(self.problem.y_dim(), m.width, m.depth, Activation::Relu)?,
                merge,
                m.sigma_floor,
            )
        };
        build().map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn train_config(&self, mode: TrainMode) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            n_tilde: t.n_tilde,
            batch: if t.batch_rows == 0 { BatchSize::Full } else { BatchSize::Rows(t.batch_rows) },
            seed: self.seed,
            kl_weight: t.kl_weight,
            kl_estimator: match t.kl_estimator {
                KlChoice::ClosedForm => KlEstimator::ClosedForm,
                KlChoice::Sampled => KlEstimator::Sampled,
            },
            optimizer: match t.optimizer {
                OptimizerChoice::Adam => OptimizerKind::Adam {
                    beta1: t.beta1,
                    beta2: t.beta2,
                    epsilon: t.epsilon,
                },
                OptimizerChoice::Sgd => OptimizerKind::Sgd,
            },
            mode,
        }
    }

    pub fn ci_method(&self) -> CiMethod {
        match self.predict.ci_method {
            CiChoice::Moments => CiMethod::Moments,
            CiChoice::Empirical => CiMethod::Empirical,
        }
    }

    pub fn train_seed(&self) -> u64 {
        self.data.train_seed.unwrap_or(self.seed)
    }

    pub fn test_seed(&self) -> u64 {
        self.data.test_seed.unwrap_or((self.seed ^ TEST_SEED_SALT) & SEED_MASK)
    }

    pub fn pdf_seed(&self) -> u64 {
        self.predict.pdf_seed.unwrap_or((self.seed ^ PDF_SEED_SALT) & SEED_MASK)
    }
}

mod problem_name {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};
    use vbdo_core::problems::Problem;

    pub fn serialize<S: Serializer>(p: &Problem, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(p.name())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Problem, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}

/// Recursive merge; scalar and array values in `over` replace those in `base`.
fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Output file locations inside the run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn config(&self) -> PathBuf {
        self.file("config.toml")
    }

    pub fn train_data(&self) -> PathBuf {
        self.file("train.vbds")
    }

    pub fn test_data(&self) -> PathBuf {
        self.file("test.vbds")
    }

    pub fn checkpoint(&self, tag: &str) -> PathBuf {
        self.file(&format!("{tag}.ckpt"))
    }
}
