use downscale_core::diffusion::EdmConfig;
use downscale_core::grid::{Channel, Field, Grid};
use downscale_core::net::train::write_loss_trace;
use downscale_core::net::{train, Example, NetConfig, Objective, TrainConfig, UNet};
use downscale_core::rng::{normals, stream};

fn random_field(grid: &Grid, names: &[&str], seed: u64) -> Field {
    let nc = names.len();
    let coef = normals(&mut stream(seed), 6 * nc);
    let mut data = vec![0.0; grid.len() * nc];
    for i in 0..grid.height {
        for j in 0..grid.width {
            let (y, x) = (i as f64 / grid.height as f64, j as f64 / grid.width as f64);
            for c in 0..nc {
                let k = &coef[6 * c..6 * c + 6];
                let tau = std::f64::consts::TAU;
                data[(i * grid.width + j) * nc + c] = k[0] + k[1] * (tau * x).sin() + k[2] * (tau * y).cos()
                    + k[3] * (tau * (x + y)).sin() + 0.5 * k[4] * (2.0 * tau * x).cos() + 0.5 * k[5] * (2.0 * tau * y).sin();
            }
        }
    }
    let ch = names.iter().map(|n| Channel::new(*n, "1")).collect();
    Field::new(grid.clone(), ch, data).unwrap()
}

/// The overfit sanity check runs at a raised learning rate: at 1e-4 two
/// hundred steps are not enough to memorize a single instance.
fn overfit_config(steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        steps,
        overfit_one: true,
        fixed_sigma: Some(0.5),
        ..TrainConfig::default()
    };
    cfg.optimizer.lr_max = 1e-3;
    cfg.optimizer.lr_min = 1e-4;
    cfg
}

fn smooth_example() -> Example {
    let g = Grid::new(50.0, 0.0, -0.25, 0.25, 16, 16).unwrap();
    Example {
        coarse: random_field(&g, &["t2m", "u10", "v10", "msl"], 1),
        statics: Some(random_field(&g, &["z", "lsm"], 2)),
        target: random_field(&g, &["t2m", "u10", "v10", "msl"], 3),
    }
}

#[test]
fn overfitting_one_pair_at_fixed_sigma() {
    let mut net = UNet::new(NetConfig::default(), 4).unwrap();
    let trace = train(&mut net, &[smooth_example()], &EdmConfig::default(), &overfit_config(200), 5).unwrap();
    let first = trace[0].loss;
    let last = trace.last().unwrap().loss;
    assert!(last < 0.1 * first, "{first} -> {last}");
    assert!(trace.iter().all(|r| r.sigma == 0.5));
}

#[test]
fn regression_objective_trains() {
    let mut net = UNet::new(NetConfig::default(), 4).unwrap();
    let cfg = TrainConfig {
        objective: Objective::Regression,
        ..overfit_config(100)
    };
    let trace = train(&mut net, &[smooth_example()], &EdmConfig::default(), &cfg, 5).unwrap();
    assert!(trace.iter().all(|r| r.sigma == 0.0));
    assert!(trace.last().unwrap().loss < 0.5 * trace[0].loss);
}

#[test]
fn loss_trace_csv_has_expected_header() {
    let mut net = UNet::new(NetConfig::default(), 4).unwrap();
    let trace = train(&mut net, &[smooth_example()], &EdmConfig::default(), &overfit_config(3), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss.csv");
    write_loss_trace(&path, &trace).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,sigma,alpha,loss,lr"));
    assert_eq!(lines.count(), 3);
}
