//! Subcommand implementations. Each returns its main artifact so the
//! commands can be driven from tests without going through argument parsing.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use vbdo_core::checkpoint::Checkpoint;
use vbdo_core::dataset::{QuerySet, TripletDataset};
use vbdo_core::io::{payload_crc32, fmt_f64, write_csv, write_matrix_csv};
use vbdo_core::predictor::{
    coverage, kde, nmse, pdf_estimate, predict, sample_outputs, trapezoid, CiMethod, PdfCurve, PredictOptions,
    PredictiveEnsemble, PDF_MIN_VALUES,
};
use vbdo_core::problems::Solutions;
use vbdo_core::solvers::GridSampled;
use vbdo_core::trainer::{trainer_from_checkpoint, EpochRecord, TrainMode, TrainTrace, Trainer};
use vbdo_core::Error;

use crate::config::{RunConfig, RunPaths};
use crate::{CliError, Command};

pub type CliResult<T> = Result<T, CliError>;

pub fn dispatch(cmd: &Command, cfg: &RunConfig, paths: &RunPaths) -> CliResult<()> {
    create_dir(paths)?;
    write_text(&paths.file(&format!("{}_config.toml", cmd.name())), &cfg.to_toml())?;
    match cmd {
        Command::GenData => gen_data(cfg, paths).map(|m| println!("{}", m.describe())),
        Command::Train { baseline, epochs } => train(cfg, paths, *baseline, *epochs).map(|s| println!("{s}")),
        Command::Resume { baseline, epochs } => resume(cfg, paths, *baseline, *epochs).map(|s| println!("{s}")),
        Command::Evaluate {
            baseline,
            samples,
            oracle,
        } => evaluate(cfg, paths, *baseline, *samples, *oracle).map(|m| println!("{}", m.describe())),
        Command::Predict {
            baseline,
            samples,
            inputs,
        } => predict_grid(cfg, paths, *baseline, *samples, inputs.as_deref())
            .map(|p| println!("wrote {}", p.display())),
        Command::Pdf {
            baseline,
            samples,
            t_index,
            x_index,
            realizations,
        } => pdf(cfg, paths, *baseline, *samples, *t_index, *x_index, *realizations).map(|(p, curve)| {
            println!(
                "wrote {} (density integral {:.6})",
                p.display(),
                trapezoid(&curve.support, &curve.mean)
            )
        }),
        Command::Report => report(paths, cfg).map(|text| print!("{text}")),
    }
}

pub fn tag(baseline: bool) -> &'static str {
    if baseline {
        "baseline"
    } else {
        "vb"
    }
}

fn mode(baseline: bool) -> TrainMode {
    if baseline {
        TrainMode::Deterministic
    } else {
        TrainMode::Variational
    }
}

fn mode_name(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::Variational => "variational",
        TrainMode::Deterministic => "deterministic",
    }
}

fn create_dir(paths: &RunPaths) -> CliResult<()> {
    std::fs::create_dir_all(&paths.root).map_err(|e| CliError::Io(paths.root.clone(), e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn remove_if_present(path: &Path) -> CliResult<()> {
    match std::fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(CliError::Io(path.to_path_buf(), e)),
        _ => Ok(()),
    }
}

fn location_names(cfg: &RunConfig) -> Vec<String> {
    if cfg.problem.is_ode() {
        vec!["t".into()]
    } else {
        vec!["x".into(), "t".into()]
    }
}

// ---------------------------------------------------------------- gen-data

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub file: String,
    pub seed: u64,
    pub inputs: usize,
    pub per_input: usize,
    pub rows: usize,
    pub bytes: u64,
    pub crc32: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenManifest {
    pub problem: String,
    pub seed: u64,
    pub train: DatasetEntry,
    pub test: DatasetEntry,
}

impl GenManifest {
    fn describe(&self) -> String {
        format!(
            "{}: {} training rows ({} x {}), {} test rows ({} x {})",
            self.problem,
            self.train.rows,
            self.train.inputs,
            self.train.per_input,
            self.test.rows,
            self.test.inputs,
            self.test.per_input
        )
    }
}

fn dataset_entry(path: &Path, ds: &TripletDataset, seed: u64) -> CliResult<DatasetEntry> {
    let bytes = std::fs::metadata(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?.len();
    Ok(DatasetEntry {
        file: path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        seed,
        inputs: ds.n_inputs(),
        per_input: ds.per_input(),
        rows: ds.len(),
        bytes,
        crc32: format!("{:08x}", payload_crc32(path)?),
    })
}

pub fn gen_data(cfg: &RunConfig, paths: &RunPaths) -> CliResult<GenManifest> {
    create_dir(paths)?;
    let setup = cfg.setup();
    let d = &cfg.data;
    let train = setup.training_set(d.train_inputs, d.per_input, cfg.train_seed())?;
    let test = setup.test_set(d.test_inputs, cfg.test_seed())?;
    train.save(&paths.train_data())?;
    test.save(&paths.test_data())?;
    let manifest = GenManifest {
        problem: cfg.problem.name().into(),
        seed: cfg.seed,
        train: dataset_entry(&paths.train_data(), &train, cfg.train_seed())?,
        test: dataset_entry(&paths.test_data(), &test, cfg.test_seed())?,
    };
    write_text(
        &paths.file("gen_manifest.toml"),
        &toml::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    write_text(&paths.config(), &cfg.to_toml())?;
    Ok(manifest)
}

// ---------------------------------------------------------------- train / resume

fn load_train_set(cfg: &RunConfig, paths: &RunPaths) -> CliResult<TripletDataset> {
    let raw = TripletDataset::load(&paths.train_data())?;
    if raw.sensors() != cfg.data.sensors || raw.y_dim() != cfg.problem.y_dim() {
        return Err(CliError::Usage(format!(
            "training set has {} sensors and location dimension {}, config expects {} and {}",
            raw.sensors(),
            raw.y_dim(),
            cfg.data.sensors,
            cfg.problem.y_dim()
        )));
    }
    Ok(raw)
}

/// Loads a checkpoint and checks it against the config's architecture and the requested mode.
pub fn load_checkpoint(cfg: &RunConfig, paths: &RunPaths, baseline: bool) -> CliResult<Checkpoint> {
    let ckpt = Checkpoint::load(&paths.checkpoint(tag(baseline)))?;
    ckpt.check_spec(&cfg.spec()?)?;
    if ckpt.mode != mode(baseline) {
        return Err(Error::SpecMismatch(format!(
            "checkpoint holds a {} model, expected {}",
            mode_name(ckpt.mode),
            mode_name(mode(baseline))
        ))
        .into());
    }
    Ok(ckpt)
}

fn trace_paths(paths: &RunPaths, tag: &str) -> (PathBuf, PathBuf) {
    (paths.file(&format!("{tag}_trace.csv")), paths.file(&format!("{tag}_timing.csv")))
}

/// Runs epochs, flushing the trace alongside every checkpoint. A diverged
/// epoch leaves the last good state on disk and returns the error.
fn run_epochs(t: &mut Trainer<'_>, epochs: u64, cfg: &RunConfig, paths: &RunPaths, tag: &str) -> CliResult<Option<EpochRecord>> {
    let ckpt_path = paths.checkpoint(tag);
    let (trace_path, timing_path) = trace_paths(paths, tag);
    let mut pending = TrainTrace::default();
    let flush = |t: &Trainer<'_>, pending: &mut TrainTrace| -> CliResult<()> {
        t.checkpoint().save(&ckpt_path)?;
        pending.append_csv(&trace_path)?;
        pending.append_timing_csv(&timing_path)?;
        pending.records.clear();
        Ok(())
    };
    let start = Instant::now();
    let mut last = None;
    for _ in 0..epochs {
        let rec = match t.epoch() {
            Ok(r) => r,
            Err(e) => {
                flush(t, &mut pending)?;
                return Err(e.into());
            }
        };
        let every = cfg.train.progress_every;
        if every > 0 && rec.epoch % every == 0 {
            eprintln!(
                "epoch {:>7}  loss {:>14.6e}  kl {:>12.5e}  nll {:>14.6e}  elapsed {:>8.1}s",
                rec.epoch,
                rec.total_loss,
                rec.kl,
                rec.nll,
                start.elapsed().as_secs_f64()
            );
        }
        last = Some(rec.clone());
        pending.records.push(rec);
        let every = cfg.train.checkpoint_every;
        if every > 0 && t.state().epoch % every == 0 {
            flush(t, &mut pending)?;
        }
    }
    flush(t, &mut pending)?;
    Ok(last)
}

fn summary(cfg: &RunConfig, t: &Trainer<'_>, last: Option<&EpochRecord>, seconds: f64) -> String {
    let mut s = format!(
        "problem: {}\nmode: {}\nparameters: {}\nepochs: {}\nsteps: {}\nwall_seconds: {seconds:.3}\n",
        cfg.problem,
        mode_name(t.config().mode),
        t.spec().param_count(),
        t.state().epoch,
        t.state().step,
    );
    if let Some(r) = last {
        s += &format!("final_total_loss: {:e}\nfinal_kl: {:e}\nfinal_nll: {:e}\n", r.total_loss, r.kl, r.nll);
    }
    s
}

/// Trains from scratch and returns the human-readable summary.
pub fn train(cfg: &RunConfig, paths: &RunPaths, baseline: bool, epochs: Option<u64>) -> CliResult<String> {
    let raw = load_train_set(cfg, paths)?;
    let ds = if cfg.data.normalize { raw.normalize()?.0 } else { raw };
    let spec = cfg.spec()?;
    let mut tc = cfg.train_config(mode(baseline));
    if let Some(e) = epochs {
        tc.epochs = e;
    }
    let tag = tag(baseline);
    let (trace_path, timing_path) = trace_paths(paths, tag);
    remove_if_present(&trace_path)?;
    remove_if_present(&timing_path)?;
    let start = Instant::now();
    let mut t = Trainer::new(&spec, &ds, &tc)?;
    let last = run_epochs(&mut t, tc.epochs, cfg, paths, tag)?;
    let text = summary(cfg, &t, last.as_ref(), start.elapsed().as_secs_f64());
    write_text(&paths.file(&format!("{tag}_summary.txt")), &text)?;
    Ok(text)
}

/// Continues from `<tag>.ckpt` for `epochs` more epochs, appending to the trace.
pub fn resume(cfg: &RunConfig, paths: &RunPaths, baseline: bool, epochs: u64) -> CliResult<String> {
    let ckpt = load_checkpoint(cfg, paths, baseline)?;
    let raw = load_train_set(cfg, paths)?;
    let ds = match &ckpt.norm {
        Some(n) => raw.with_stats(n)?,
        None => raw,
    };
    let spec = cfg.spec()?;
    let mut tc = cfg.train_config(mode(baseline));
    tc.epochs = epochs;
    let tag = tag(baseline);
    let start = Instant::now();
    let mut t = trainer_from_checkpoint(ckpt, &spec, &ds, &tc)?;
    let last = run_epochs(&mut t, epochs, cfg, paths, tag)?;
    let text = summary(cfg, &t, last.as_ref(), start.elapsed().as_secs_f64());
    write_text(&paths.file(&format!("{tag}_summary.txt")), &text)?;
    Ok(text)
}

// ---------------------------------------------------------------- evaluate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub level: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub problem: String,
    pub model: String,
    pub samples: usize,
    pub queries: usize,
    pub nmse: f64,
    /// Published full-scale NMSE for this problem and model.
    pub reference_nmse: f64,
    pub mean_std_total: f64,
    pub mean_std_epistemic: f64,
    pub mean_std_aleatoric: f64,
    pub coverage: Vec<CoverageRow>,
}

impl Metrics {
    fn describe(&self) -> String {
        let mut s = format!(
            "{} {}: NMSE {:.6e} (reference {:.5}) over {} queries, {} samples\n",
            self.problem, self.model, self.nmse, self.reference_nmse, self.queries, self.samples
        );
        for c in &self.coverage {
            s += &format!("  coverage@{:.2}: {:.4}\n", c.level, c.fraction);
        }
        s
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        toml::from_str(&read_text(path)?)
            .map_err(|e| CliError::Core(Error::Format(format!("{}: {e}", path.display()))))
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn ensemble_rows(
    ens: &PredictiveEnsemble,
    lo: &[f64],
    hi: &[f64],
    r: usize,
) -> [String; 6] {
    [
        fmt_f64(ens.mean[r]),
        fmt_f64(ens.total_var[r].sqrt()),
        fmt_f64(ens.epistemic_var[r].sqrt()),
        fmt_f64(ens.aleatoric_var[r].sqrt()),
        fmt_f64(lo[r]),
        fmt_f64(hi[r]),
    ]
}

const ENSEMBLE_COLUMNS: [&str; 6] = ["mean", "std_total", "std_epistemic", "std_aleatoric", "ci_lo", "ci_hi"];

fn predict_options(cfg: &RunConfig, ckpt: &Checkpoint, samples: Option<usize>, keep: bool) -> PredictOptions {
    PredictOptions {
        samples: samples.unwrap_or(cfg.predict.samples),
        seed: cfg.seed,
        keep_samples: keep,
        deterministic: ckpt.mode == TrainMode::Deterministic,
        require_norm: cfg.data.normalize,
    }
}

/// Scores a checkpoint (or, with `oracle`, the truth itself) on the test set.
pub fn evaluate(
    cfg: &RunConfig,
    paths: &RunPaths,
    baseline: bool,
    samples: Option<usize>,
    oracle: bool,
) -> CliResult<Metrics> {
    let test = TripletDataset::load(&paths.test_data())?;
    let truth = test.targets().to_vec();
    let q = test.queries(None);
    let (tag, ens, method) = if oracle {
        let zeros = vec![0.0; truth.len()];
        let ens = PredictiveEnsemble {
            samples: 0,
            mean: truth.clone(),
            epistemic_var: zeros.clone(),
            aleatoric_var: zeros.clone(),
            total_var: zeros,
            sample_mu: None,
            sample_sigma: None,
        };
        ("oracle", ens, CiMethod::Moments)
    } else {
        let ckpt = load_checkpoint(cfg, paths, baseline)?;
        let method = cfg.ci_method();
        let opts = predict_options(cfg, &ckpt, samples, method == CiMethod::Empirical);
        let ens = predict(&ckpt.spec, &ckpt.params, &q, ckpt.norm.as_ref(), &opts)?;
        (tag(baseline), ens, method)
    };
    let (lo, hi) = ens.interval(cfg.predict.ci_level, method)?;

    let mut levels = cfg.predict.coverage_levels.clone();
    levels.sort_by(f64::total_cmp);
    let coverage_rows = levels
        .iter()
        .map(|&level| Ok(CoverageRow { level, fraction: coverage(&ens, &truth, level)? }))
        .collect::<vbdo_core::Result<Vec<_>>>()?;
    let (ref_vb, ref_det) = cfg.problem.reference_nmse();
    let metrics = Metrics {
        problem: cfg.problem.name().into(),
        model: tag.into(),
        samples: ens.samples,
        queries: ens.len(),
        nmse: nmse(&ens.mean, &truth)?,
        reference_nmse: if baseline { ref_det } else { ref_vb },
        mean_std_total: mean(ens.total_var.iter().map(|v| v.sqrt())),
        mean_std_epistemic: mean(ens.epistemic_var.iter().map(|v| v.sqrt())),
        mean_std_aleatoric: mean(ens.aleatoric_var.iter().map(|v| v.sqrt())),
        coverage: coverage_rows,
    };
    write_text(
        &paths.file(&format!("{tag}_metrics.toml")),
        &toml::to_string_pretty(&metrics).expect("metrics serialize"),
    )?;
    write_csv(
        &paths.file(&format!("{tag}_coverage.csv")),
        &["level".to_string(), "coverage".to_string()],
        metrics.coverage.iter().map(|c| vec![format!("{}", c.level), fmt_f64(c.fraction)]),
    )?;

    let locs = location_names(cfg);
    let header = |lead: &[&str]| -> Vec<String> {
        lead.iter()
            .map(|s| s.to_string())
            .chain(locs.iter().cloned())
            .chain(std::iter::once("truth".to_string()))
            .chain(ENSEMBLE_COLUMNS.iter().map(|s| s.to_string()))
            .collect()
    };
    let row = |r: usize| -> Vec<String> {
        let (_, yi) = q.pairs[r];
        q.locations
            .row(yi)
            .iter()
            .map(|v| fmt_f64(*v))
            .chain(std::iter::once(fmt_f64(truth[r])))
            .chain(ensemble_rows(&ens, &lo, &hi, r))
            .collect()
    };
    write_csv(
        &paths.file(&format!("{tag}_predictions.csv")),
        &header(&["realization"]),
        (0..ens.len()).map(|r| {
            let mut cells = vec![test.realization_of(r).to_string()];
            cells.extend(row(r));
            cells
        }),
    )?;

    let g = test.per_input();
    let nt = cfg.data.time_steps;
    for k in 0..cfg.predict.export_realizations.min(test.n_inputs()) {
        let rows = k * g..(k + 1) * g;
        write_csv(&paths.file(&format!("{tag}_ci_r{k}.csv")), &header(&[]), rows.clone().map(row))?;
        if !cfg.problem.is_ode() && g % nt == 0 {
            let nx = g / nt;
            let grid = |f: &dyn Fn(usize) -> f64| Array2::from_shape_fn((nx, nt), |(i, j)| f(k * g + i * nt + j));
            let fields: [(&str, Array2<f64>); 4] = [
                ("truth", grid(&|r| truth[r])),
                ("mean", grid(&|r| ens.mean[r])),
                ("abs_error", grid(&|r| (ens.mean[r] - truth[r]).abs())),
                ("std", grid(&|r| ens.total_var[r].sqrt())),
            ];
            for (name, m) in fields {
                write_matrix_csv(&paths.file(&format!("{tag}_field_r{k}_{name}.csv")), &m)?;
            }
        }
    }
    Ok(metrics)
}

// ---------------------------------------------------------------- predict

fn read_inputs_csv(path: &Path, sensors: usize) -> CliResult<Array2<f64>> {
    let text = read_text(path)?;
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Usage(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if row.len() != sensors {
            return Err(CliError::Usage(format!(
                "{}:{}: expected {sensors} sensor values, found {}",
                path.display(),
                i + 1,
                row.len()
            )));
        }
        values.extend(row);
        rows += 1;
    }
    if rows == 0 {
        return Err(CliError::Usage(format!("{} holds no input rows", path.display())));
    }
    Ok(Array2::from_shape_vec((rows, sensors), values).expect("row lengths checked"))
}

/// Predicts every input on the full evaluation grid and writes `<tag>_predict.csv`.
pub fn predict_grid(
    cfg: &RunConfig,
    paths: &RunPaths,
    baseline: bool,
    samples: Option<usize>,
    inputs: Option<&Path>,
) -> CliResult<PathBuf> {
    let ckpt = load_checkpoint(cfg, paths, baseline)?;
    let u = match inputs {
        Some(p) => read_inputs_csv(p, cfg.data.sensors)?,
        None => TripletDataset::load(&paths.test_data())?.inputs().clone(),
    };
    let locations = cfg.setup().eval_grid()?;
    let g = locations.nrows();
    let pairs = (0..u.nrows()).flat_map(|i| (0..g).map(move |j| (i, j))).collect();
    let q = QuerySet {
        inputs: u,
        locations,
        pairs,
    };
    let method = cfg.ci_method();
    let opts = predict_options(cfg, &ckpt, samples, method == CiMethod::Empirical);
    let ens = predict(&ckpt.spec, &ckpt.params, &q, ckpt.norm.as_ref(), &opts)?;
    let (lo, hi) = ens.interval(cfg.predict.ci_level, method)?;
    let header: Vec<String> = std::iter::once("realization".to_string())
        .chain(location_names(cfg))
        .chain(ENSEMBLE_COLUMNS.iter().map(|s| s.to_string()))
        .collect();
    let path = paths.file(&format!("{}_predict.csv", tag(baseline)));
    write_csv(
        &path,
        &header,
        (0..ens.len()).map(|r| {
            let (ui, yi) = q.pairs[r];
            std::iter::once(ui.to_string())
                .chain(q.locations.row(yi).iter().map(|v| fmt_f64(*v)))
                .chain(ensemble_rows(&ens, &lo, &hi, r))
                .collect::<Vec<_>>()
        }),
    )?;
    Ok(path)
}

// ---------------------------------------------------------------- pdf

/// Grid row and file name for 1-based `(x, t)` indices.
pub fn pdf_location(cfg: &RunConfig, t_index: usize, x_index: Option<usize>) -> CliResult<(usize, String)> {
    let nt = cfg.data.time_steps;
    if !(1..=nt).contains(&t_index) {
        return Err(CliError::Usage(format!("time index {t_index} is outside 1..={nt}")));
    }
    if cfg.problem.is_ode() {
        if x_index.is_some() {
            return Err(CliError::Usage(format!("--x-index does not apply to the {} problem", cfg.problem)));
        }
        return Ok((t_index - 1, format!("pdf_t{t_index}.csv")));
    }
    let nx = cfg.data.space_points;
    let x = x_index.ok_or_else(|| CliError::Usage(format!("--x-index is required for the {} problem", cfg.problem)))?;
    if !(1..=nx).contains(&x) {
        return Err(CliError::Usage(format!("space index {x} is outside 1..={nx}")));
    }
    Ok(((x - 1) * nt + (t_index - 1), format!("pdf_x{x}_t{t_index}.csv")))
}

/// Density of the predicted solution at one location over fresh input realizations.
pub fn pdf(
    cfg: &RunConfig,
    paths: &RunPaths,
    baseline: bool,
    samples: Option<usize>,
    t_index: usize,
    x_index: Option<usize>,
    realizations: Option<usize>,
) -> CliResult<(PathBuf, PdfCurve)> {
    let (row, name) = pdf_location(cfg, t_index, x_index)?;
    let n = realizations.unwrap_or(cfg.predict.pdf_realizations);
    if n < PDF_MIN_VALUES {
        return Err(CliError::Usage(format!("need at least {PDF_MIN_VALUES} realizations, got {n}")));
    }
    let ckpt = load_checkpoint(cfg, paths, baseline)?;
    let setup = cfg.setup();
    let seed = cfg.pdf_seed();
    let branch = setup.branch_inputs(&setup.sample_inputs(n, seed)?);
    let truth: Vec<f64> = match setup.solve(&branch)? {
        Solutions::Ode(s) => s.iter().map(|x| x.value(row)).collect(),
        Solutions::Field(s) => s.iter().map(|x| x.value(row)).collect(),
    };
    let grid = setup.eval_grid()?;
    let q = QuerySet {
        inputs: branch.realizations,
        locations: grid.select(ndarray::Axis(0), &[row]),
        pairs: (0..n).map(|i| (i, 0)).collect(),
    };
    let ens = predict(&ckpt.spec, &ckpt.params, &q, ckpt.norm.as_ref(), &predict_options(cfg, &ckpt, samples, true))?;
    let values = sample_outputs(&ens, seed)?;
    let curve = pdf_estimate(values.view(), None)?;
    let (truth_density, _) = kde(&truth, &curve.support)?;
    let prefix = if baseline { "baseline_" } else { "" };
    let path = paths.file(&format!("{prefix}{name}"));
    write_csv(
        &path,
        &["support", "mean_density", "band_lo", "band_hi", "truth_density"].map(String::from),
        (0..curve.support.len()).map(|i| {
            [curve.support[i], curve.mean[i], curve.band_lo[i], curve.band_hi[i], truth_density[i]].map(fmt_f64)
        }),
    )?;
    Ok((path, curve))
}

// ---------------------------------------------------------------- report

/// Collects the evaluation metrics of both models into `report.csv` and `report.md`.
pub fn report(paths: &RunPaths, cfg: &RunConfig) -> CliResult<String> {
    let mut found = Vec::new();
    for t in ["vb", "baseline"] {
        let p = paths.file(&format!("{t}_metrics.toml"));
        if p.exists() {
            found.push(Metrics::load(&p)?);
        }
    }
    if found.is_empty() {
        let p = paths.file("vb_metrics.toml");
        return Err(CliError::Io(
            p,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no metrics found; run evaluate first"),
        ));
    }
    let levels: Vec<f64> = found[0].coverage.iter().map(|c| c.level).collect();
    let mut header: Vec<String> = ["problem", "model", "nmse", "reference_nmse"].map(String::from).to_vec();
    header.extend(levels.iter().map(|l| format!("coverage_{l}")));
    let cover = |m: &Metrics, l: f64| {
        m.coverage
            .iter()
            .find(|c| c.level == l)
            .map(|c| c.fraction)
            .unwrap_or(f64::NAN)
    };
    write_csv(
        &paths.file("report.csv"),
        &header,
        found.iter().map(|m| {
            let mut cells = vec![m.problem.clone(), m.model.clone(), fmt_f64(m.nmse), fmt_f64(m.reference_nmse)];
            cells.extend(levels.iter().map(|&l| fmt_f64(cover(m, l))));
            cells
        }),
    )?;
    let mut md = format!("# {} results\n\n| model | NMSE | reference NMSE |", cfg.problem);
    for l in &levels {
        md += &format!(" coverage {l} |");
    }
    md += "\n|---|---|---|";
    md += &"---|".repeat(levels.len());
    md += "\n";
    for m in &found {
        md += &format!("| {} | {:.6} | {:.5} |", m.model, m.nmse, m.reference_nmse);
        for &l in &levels {
            md += &format!(" {:.4} |", cover(m, l));
        }
        md += "\n";
    }
    write_text(&paths.file("report.md"), &md)?;
    Ok(md)
}
