//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::Array2;
use vbdo_cli::commands::{load_checkpoint, Metrics};
use vbdo_cli::{run, RunConfig, RunPaths, EXIT_OK};
use vbdo_core::dataset::{QuerySet, TripletDataset};
use vbdo_core::deeponet::{elbo_loss, DeepONetSpec, LossConfig, MergeMode};
use vbdo_core::grf::SensorGrid;
use vbdo_core::nn::{self, Activation, NetSpec};
use vbdo_core::predictor::{predict, PredictOptions};
use vbdo_core::rng::{keyed, standard_normal_vec, Purpose};
use vbdo_core::solvers::{
    rk4_integrate, solve_advection_diffusion, solve_diffusion_reaction, unit_times, DiffusionReaction, InputFunction,
};
use vbdo_core::variational::{complexity_cost, sample_params, softplus_inv, NoiseDraw, VariationalParams};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Check {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn uniform(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    use rand::Rng;
    let mut r = keyed(seed, Purpose::Init, 4242, 0);
    (0..n).map(|_| lo + (hi - lo) * r.random::<f64>()).collect()
}

// ------------------------------------------------------------ criterion 1

fn relu_pattern(spec: &DeepONetSpec, vp: &VariationalParams, noises: &[NoiseDraw], q: &QuerySet) -> Vec<bool> {
    let (b, t, _) = spec.ranges();
    let mut out = Vec::new();
    for n in noises {
        let theta = sample_params(vp, n).unwrap();
        for (net, range, x) in [(&spec.branch, b.clone(), &q.inputs), (&spec.trunk, t.clone(), &q.locations)] {
            let cache = nn::forward_batch(net, &theta[range], x.view()).unwrap();
            out.extend(cache.pre_activations().iter().flat_map(|a| a.iter().map(|v| *v > 0.0)));
        }
    }
    out
}

fn gradient_check() -> Check {
    const H: f64 = 1e-5;
    let spec = DeepONetSpec::new(
        NetSpec::dense(5, 4, 2, Activation::Relu).unwrap(),
        NetSpec::dense(1, 4, 2, Activation::Relu).unwrap(),
        MergeMode::Hadamard,
        1e-6,
    )
    .unwrap();
    let p = spec.param_count();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    for case in 0..5u64 {
        let seed = 100 + 10 * case;
        let q = QuerySet {
            inputs: Array2::from_shape_vec((4, 5), uniform(seed, 20, -1.0, 1.0)).unwrap(),
            locations: Array2::from_shape_vec((3, 1), uniform(seed + 1, 3, 0.0, 1.0)).unwrap(),
            pairs: vec![(0, 0), (1, 1), (2, 2), (3, 0), (0, 2), (2, 1), (3, 1), (1, 2)],
        };
        let s = uniform(seed + 2, q.len(), -1.0, 1.0);
        let mu = uniform(seed + 3, p, -0.8, 0.8);
        let delta = uniform(seed + 4, p, -3.5, -0.5);
        let vp = VariationalParams::new(mu, delta).unwrap();
        let noises: Vec<NoiseDraw> = (0..3).map(|d| NoiseDraw::generate(p, seed, Purpose::TrainNoise, 0, d)).collect();
        let cfg = LossConfig::default();
        let res = elbo_loss(&spec, &vp, &q, &s, &noises, &cfg).unwrap();
        let base = relu_pattern(&spec, &vp, &noises, &q);
        let loss = |v: &VariationalParams| elbo_loss(&spec, v, &q, &s, &noises, &cfg).unwrap().loss;
        for i in 0..p {
            for which in 0..2 {
                let (mut plus, mut minus) = (vp.clone(), vp.clone());
                let (a, b) = if which == 0 {
                    (&mut plus.mu[i], &mut minus.mu[i])
                } else {
                    (&mut plus.delta[i], &mut minus.delta[i])
                };
                *a += H;
                *b -= H;
                if relu_pattern(&spec, &plus, &noises, &q) != base || relu_pattern(&spec, &minus, &noises, &q) != base {
                    skipped += 1;
                    continue;
                }
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * H);
                let analytic = if which == 0 { res.grad_mu[i] } else { res.grad_delta[i] };
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    ensure(
        worst <= 1e-4 && skipped * 50 <= checked,
        format!("max relative error {worst:.2e} over {checked} coordinates ({skipped} kink crossings skipped)"),
    )
}

// ------------------------------------------------------------ criterion 2

fn kl_check() -> Check {
    let mut worst: f64 = 0.0;
    for case in 0..20u64 {
        let mu = uniform(500 + case, 3, -1.5, 1.5);
        let delta = uniform(600 + case, 3, 0.1, 2.0).into_iter().map(softplus_inv).collect();
        let vp = VariationalParams::new(mu, delta).unwrap();
        let sigma = vp.sigma();
        let mut r = keyed(700 + case, Purpose::KlSample, 0, 0);
        let n = 1_000_000;
        let mut total = 0.0;
        for _ in 0..n {
            let z = standard_normal_vec(&mut r, 3);
            for i in 0..3 {
                let theta = vp.mu[i] + sigma[i] * z[i];
                total += -sigma[i].ln() - 0.5 * z[i] * z[i] + 0.5 * theta * theta;
            }
        }
        let mc = total / n as f64;
        let exact = complexity_cost(&vp);
        worst = worst.max((mc - exact).abs() / exact);
    }
    ensure(worst <= 0.01, format!("max relative gap {worst:.3e} over 20 random posteriors"))
}

// ------------------------------------------------------------ criterion 3

fn solver_check() -> Check {
    let end_state = |h: f64| {
        rk4_integrate(|t, s: &[f64; 2]| [s[1], -s[0].sin() + 0.3 + 0.8 * t], [0.5, 0.0], &[], &[1.0], h).unwrap()[0][0]
    };
    let reference = end_state(1e-4);
    let errors: Vec<f64> = [0.1, 0.05, 0.025, 0.0125].iter().map(|&h| (end_state(h) - reference).abs()).collect();
    let order = errors.windows(2).map(|w| (w[0] / w[1]).log2()).fold(f64::INFINITY, f64::min);

    let grid = SensorGrid::unit(101).unwrap();
    let k = 2.0 * PI;
    let ic = InputFunction::from_fn(grid.clone(), |x| (k * x).sin()).unwrap();
    let times = unit_times(21);
    let advd = solve_advection_diffusion(&ic, &grid, &times).unwrap();
    let mut advd_err: f64 = 0.0;
    for (i, &x) in grid.points().iter().enumerate() {
        for (j, &t) in times.iter().enumerate() {
            let exact = (-0.1 * k * k * t).exp() * (k * (x - t)).sin();
            advd_err = advd_err.max((advd.values[[i, j]] - exact).abs());
        }
    }

    let d = 0.01;
    let modes = [(1.0, 1.0), (2.0, -0.6), (3.0, 0.3)];
    let sensors = SensorGrid::unit(100).unwrap();
    let source = InputFunction::from_fn(sensors.clone(), |x| {
        modes.iter().map(|(m, a)| a * (m * PI * x).sin()).sum()
    })
    .unwrap();
    let t = unit_times(100);
    let dr = solve_diffusion_reaction(&source, DiffusionReaction { diffusivity: d, reaction: 0.0 }, &sensors, &t).unwrap();
    let (mut dr_err, mut dr_ref): (f64, f64) = (0.0, 0.0);
    for (i, &x) in sensors.points().iter().enumerate() {
        for (j, &tj) in t.iter().enumerate() {
            let exact: f64 = modes
                .iter()
                .map(|(m, a)| {
                    let lambda = d * m * m * PI * PI;
                    a * (1.0 - (-lambda * tj).exp()) / lambda * (m * PI * x).sin()
                })
                .sum();
            dr_err = dr_err.max((dr.values[[i, j]] - exact).abs());
            dr_ref = dr_ref.max(exact.abs());
        }
    }
    let dr_rel = dr_err / dr_ref;
    ensure(
        order >= 3.8 && advd_err < 1e-10 && dr_rel <= 0.02,
        format!("RK4 order {order:.3}; advection-diffusion max error {advd_err:.2e}; diffusion-reaction relative error {dr_rel:.2e}"),
    )
}

// ------------------------------------------------------------ criteria 4-6

const DESK_CONFIG: &str = "problem = \"ad\"\nseed = 0\n\
[data]\ntrain_inputs = 300\nper_input = 10\ntest_inputs = 500\n\
[train]\nepochs = 5000\ncheckpoint_every = 0\nprogress_every = 1000\n";

struct DeskRun {
    dir: PathBuf,
    vb: Metrics,
    baseline: Metrics,
    vb_train: Duration,
    report: String,
}

fn cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let mut all = vec!["vbdo", "--out", dir.to_str().unwrap()];
    all.extend_from_slice(args);
    match run(all.clone()) {
        EXIT_OK => Ok(()),
        code => Err(format!("`{}` exited with {code}", all.join(" "))),
    }
}

fn desk_run() -> &'static Result<DeskRun, String> {
    static RUN: OnceLock<Result<DeskRun, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = std::env::temp_dir().join(format!("vbdo-acceptance-{}", std::process::id()));
        std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        let cfg = dir.join("desk.toml");
        std::fs::write(&cfg, DESK_CONFIG).map_err(|e| e.to_string())?;
        cli(&dir, &["gen-data", "--config", cfg.to_str().unwrap()])?;
        let start = Instant::now();
        cli(&dir, &["train"])?;
        let vb_train = start.elapsed();
        cli(&dir, &["train", "--baseline"])?;
        cli(&dir, &["evaluate"])?;
        cli(&dir, &["evaluate", "--baseline"])?;
        cli(&dir, &["report"])?;
        let load = |name: &str| Metrics::load(&dir.join(name)).map_err(|e| e.to_string());
        Ok(DeskRun {
            vb: load("vb_metrics.toml")?,
            baseline: load("baseline_metrics.toml")?,
            report: std::fs::read_to_string(dir.join("report.csv")).map_err(|e| e.to_string())?,
            vb_train,
            dir,
        })
    })
}

fn desk() -> Result<&'static DeskRun, String> {
    desk_run().as_ref().map_err(Clone::clone)
}

fn desk_vb_check() -> Check {
    let r = desk()?;
    let minutes = r.vb_train.as_secs_f64() / 60.0;
    ensure(
        r.vb.nmse <= 0.01 && r.vb.queries == 50_000 && minutes < 15.0,
        format!(
            "VB NMSE {:.5} (bound 0.01, full-scale reference {:.5}) on {} queries; training {minutes:.1} min",
            r.vb.nmse, r.vb.reference_nmse, r.vb.queries
        ),
    )
}

fn desk_baseline_check() -> Check {
    let r = desk()?;
    let model_rows = |m: &str| r.report.lines().filter(|l| l.split(',').nth(1) == Some(m)).count();
    let both_reported = model_rows("vb") == 1 && model_rows("baseline") == 1;
    ensure(
        r.vb.nmse <= 0.02 && r.baseline.nmse <= 0.02 && both_reported,
        format!(
            "VB NMSE {:.5} vs deterministic NMSE {:.5} (bound 0.02 each; full-scale {:.5} vs {:.5})",
            r.vb.nmse, r.baseline.nmse, r.vb.reference_nmse, r.baseline.reference_nmse
        ),
    )
}

fn calibration_check() -> Check {
    let r = desk()?;
    let c = &r.vb.coverage;
    let levels: Vec<f64> = c.iter().map(|x| x.level).collect();
    let monotone = levels == [0.68, 0.95, 0.99] && c.windows(2).all(|w| w[0].fraction <= w[1].fraction);

    let cfg = RunConfig::load(&r.dir.join("config.toml"), None).map_err(|e| e.to_string())?;
    let paths = RunPaths::new(&r.dir);
    let ckpt = load_checkpoint(&cfg, &paths, false).map_err(|e| e.to_string())?;
    let test = TripletDataset::load(&paths.test_data()).map_err(|e| e.to_string())?;
    let rows: Vec<usize> = (0..50 * test.per_input()).collect();
    let q = test.queries(Some(&rows));
    let opts = PredictOptions {
        samples: cfg.predict.samples,
        seed: cfg.seed,
        keep_samples: true,
        deterministic: false,
        require_norm: true,
    };
    let ens = predict(&ckpt.spec, &ckpt.params, &q, ckpt.norm.as_ref(), &opts).map_err(|e| e.to_string())?;
    let (mu, sigma) = (ens.sample_mu.as_ref().unwrap(), ens.sample_sigma.as_ref().unwrap());
    let s = mu.nrows() as f64;
    let mut worst: f64 = 0.0;
    for i in 0..ens.len() {
        let col = mu.column(i);
        let m = col.sum() / s;
        let epi = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / s;
        let ale = sigma.column(i).iter().map(|v| v * v).sum::<f64>() / s;
        let gap = (ens.total_var[i] - (epi + ale)).abs().max((ens.total_var[i] - ens.epistemic_var[i] - ens.aleatoric_var[i]).abs());
        worst = worst.max(gap);
    }
    ensure(
        monotone && worst <= 1e-12,
        format!(
            "coverage 0.68/0.95/0.99 = {:.4}/{:.4}/{:.4}; variance decomposition gap {worst:.2e}",
            c[0].fraction, c[1].fraction, c[2].fraction
        ),
    )
}

// ------------------------------------------------------------ criterion 7

fn determinism_check() -> Check {
    let root = std::env::temp_dir().join(format!("vbdo-determinism-{}", std::process::id()));
    let config = "problem = \"ad\"\nseed = 17\n[data]\ntrain_inputs = 40\nper_input = 10\ntest_inputs = 5\n\
                  [train]\nepochs = 40\nn_tilde = 5\ncheckpoint_every = 15\nprogress_every = 0\n";
    let mut files = Vec::new();
    for k in 0..2 {
        let dir = root.join(format!("run{k}"));
        std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        let cfg = dir.join("cfg.toml");
        std::fs::write(&cfg, config).map_err(|e| e.to_string())?;
        cli(&dir, &["--threads", "1", "gen-data", "--config", cfg.to_str().unwrap()])?;
        cli(&dir, &["--threads", "1", "train"])?;
        cli(&dir, &["--threads", "1", "train", "--baseline"])?;
        let read = |name: &str| std::fs::read(dir.join(name)).map_err(|e| e.to_string());
        files.push([read("vb.ckpt")?, read("vb_trace.csv")?, read("baseline.ckpt")?, read("baseline_trace.csv")?]);
    }
    let _ = std::fs::remove_dir_all(&root);
    let same = files[0] == files[1];
    let bytes: usize = files[0].iter().map(Vec::len).sum();
    ensure(same, format!("checkpoints and traces of two single-threaded runs identical: {same} ({bytes} bytes compared)"))
}

fn main() {
    let criteria: [(u32, &str, Duration, fn() -> Check); 7] = [
        (1, "gradient vs finite differences", Duration::from_secs(10), gradient_check),
        (2, "closed-form KL vs Monte Carlo", Duration::from_secs(30), kl_check),
        (3, "solver oracles", Duration::from_secs(60), solver_check),
        (4, "desk-scale AD training", Duration::MAX, desk_vb_check),
        (5, "desk-scale baseline comparison", Duration::MAX, desk_baseline_check),
        (6, "calibration structure", Duration::MAX, calibration_check),
        (7, "determinism", Duration::MAX, determinism_check),
    ];
    let mut failed = 0;
    for (id, name, limit, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if elapsed <= limit => (true, d),
            Ok(d) => (false, format!("{d}; exceeded {:.0} s", limit.as_secs_f64())),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        println!(
            "criterion {id} [{}] {name}: {detail} ({:.1} s)",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    if let Ok(r) = desk_run() {
        let _ = std::fs::remove_dir_all(&r.dir);
    }
    println!("{} of 7 criteria passed", 7 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
