use ndarray::Array2;
use vbdo_core::checkpoint::Checkpoint;
use vbdo_core::dataset::TripletDataset;
use vbdo_core::deeponet::{DeepONetSpec, MergeMode};
use vbdo_core::nn::{Activation, LayerSpec, NetSpec};
use vbdo_core::problems::{Problem, ProblemSetup};
use vbdo_core::rng::{keyed, standard_normal_vec, Purpose};
use vbdo_core::trainer::{resume, train, trainer_from_checkpoint, BatchSize, TrainConfig, Trainer};
use vbdo_core::Error;

fn small_problem() -> (DeepONetSpec, TripletDataset) {
    let mut setup = ProblemSetup::new(Problem::Ad);
    setup.sensors = 20;
    setup.time_steps = 25;
    let ds = setup.training_set(12, 5, 4).unwrap().normalize().unwrap().0;
    (DeepONetSpec::standard(20, 1, 8, 2).unwrap(), ds)
}

fn cfg(epochs: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        n_tilde: 4,
        seed: 21,
        ..TrainConfig::default()
    }
}

fn save_state(t: &Trainer<'_>, path: &std::path::Path) {
    t.checkpoint().save(path).unwrap();
}

#[test]
fn resume_is_bit_identical_to_uninterrupted_training() {
    let (spec, ds) = small_problem();
    for batch in [BatchSize::Full, BatchSize::Rows(20)] {
        let full_cfg = TrainConfig { batch, ..cfg(100) };
        let (straight, trace_a) = train(&spec, &ds, &full_cfg).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("half.ckpt");
        let half_cfg = TrainConfig { batch, ..cfg(50) };
        let mut t = Trainer::new(&spec, &ds, &half_cfg).unwrap();
        let first = t.run(50, |_, _| Ok(())).unwrap();
        save_state(&t, &path);
        let (resumed, second) = resume(&path, &spec, &ds, &half_cfg).unwrap();

        assert_eq!(resumed, straight);
        let joined: Vec<u64> = first.records.iter().chain(&second.records).map(|r| r.total_loss.to_bits()).collect();
        let direct: Vec<u64> = trace_a.records.iter().map(|r| r.total_loss.to_bits()).collect();
        assert_eq!(joined, direct);
        assert_eq!(second.records[0].epoch, 51);
    }
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let (spec, ds) = small_problem();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    let mut t = Trainer::new(&spec, &ds, &cfg(3)).unwrap();
    t.run(3, |_, _| Ok(())).unwrap();
    save_state(&t, &path);
    let mut bytes = std::fs::read(&path).unwrap();
    let i = bytes.len() / 3;
    bytes[i] ^= 0x11;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(resume(&path, &spec, &ds, &cfg(1)), Err(Error::Checksum { .. })));
}

#[test]
fn resume_with_different_spec_is_rejected() {
    let (spec, ds) = small_problem();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    let mut t = Trainer::new(&spec, &ds, &cfg(2)).unwrap();
    t.run(2, |_, _| Ok(())).unwrap();
    save_state(&t, &path);
    let wider = DeepONetSpec::standard(20, 1, 9, 2).unwrap();
    assert!(matches!(resume(&path, &wider, &ds, &cfg(1)), Err(Error::SpecMismatch(_))));
    let dot = spec.clone().with_merge(MergeMode::Dot);
    let ckpt = Checkpoint::load(&path).unwrap();
    assert!(matches!(trainer_from_checkpoint(ckpt, &dot, &ds, &cfg(1)), Err(Error::SpecMismatch(_))));
}

#[test]
fn checkpoint_bytes_are_reproducible() {
    let (spec, ds) = small_problem();
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for k in 0..2 {
        let path = dir.path().join(format!("{k}.ckpt"));
        let mut t = Trainer::new(&spec, &ds, &cfg(10)).unwrap();
        t.run(10, |_, _| Ok(())).unwrap();
        save_state(&t, &path);
        files.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn thread_count_does_not_change_results() {
    let (spec, ds) = small_problem();
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = one.install(|| train(&spec, &ds, &cfg(20)).unwrap());
    let b = four.install(|| train(&spec, &ds, &cfg(20)).unwrap());
    assert_eq!(a.0, b.0);
}

#[test]
fn toy_regression_recovers_least_squares_slope() {
    // s = 1.5 u + noise with a single sensor; the location is constant.
    let n = 200;
    let mut r = keyed(5, Purpose::GrfRow, 0, 0);
    let u = standard_normal_vec(&mut r, n);
    let eps = standard_normal_vec(&mut r, n);
    let s: Vec<f64> = u.iter().zip(&eps).map(|(u, e)| 1.5 * u + 0.1 * e).collect();
    let ds = TripletDataset::new(
        Array2::from_shape_vec((n, 1), u.clone()).unwrap(),
        Array2::zeros((n, 1)),
        s.clone(),
        1,
    )
    .unwrap();
    let mean_u = u.iter().sum::<f64>() / n as f64;
    let mean_s = s.iter().sum::<f64>() / n as f64;
    let slope_ls = u.iter().zip(&s).map(|(a, b)| (a - mean_u) * (b - mean_s)).sum::<f64>()
        / u.iter().map(|a| (a - mean_u) * (a - mean_u)).sum::<f64>();

    let linear = |i, o| NetSpec::new(vec![LayerSpec::new(i, o, Activation::Linear)]).unwrap();
    let spec = DeepONetSpec::new(linear(1, 1), linear(1, 1), MergeMode::Hadamard, 1e-6).unwrap();
    let config = TrainConfig {
        epochs: 2000,
        learning_rate: 1e-2,
        n_tilde: 10,
        seed: 8,
        ..TrainConfig::default()
    };
    let (vp, _) = train(&spec, &ds, &config).unwrap();
    let mean_at = |x: f64| {
        vbdo_core::deeponet::model_forward(&spec, &vp.mu, &[x], &[0.0]).unwrap().0.mu
    };
    let slope = mean_at(1.0) - mean_at(0.0);
    assert!(
        ((slope - slope_ls) / slope_ls).abs() < 0.05,
        "trained slope {slope}, least squares {slope_ls}"
    );
}

#[test]
fn desk_scale_loss_decreases_over_first_epochs() {
    let setup = ProblemSetup::new(Problem::Ad);
    let ds = setup.training_set(300, 10, 1).unwrap().normalize().unwrap().0;
    let spec = Problem::Ad.spec(100).unwrap();
    let (_, trace) = train(&spec, &ds, &TrainConfig { epochs: 200, seed: 3, ..TrainConfig::default() }).unwrap();
    let losses: Vec<f64> = trace.records.iter().map(|r| r.total_loss).collect();
    let ma: Vec<f64> = losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    let down = ma.windows(2).filter(|w| w[1] < w[0]).count();
    let frac = down as f64 / (ma.len() - 1) as f64;
    assert!(frac >= 0.8, "moving average decreased in {frac:.3} of windows");
    assert!(trace.records.iter().all(|r| r.kl >= 0.0));
}
