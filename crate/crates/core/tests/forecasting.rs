mod common;

use nalgebra::{DMatrix, DVector};
use wishart_vi::checkpoint::InputGrid;
use wishart_vi::diagnostics::{generate_synthetic, SyntheticSpec};
use wishart_vi::forecast::{forecast_covariance, identity_baseline_scores, score_forecast};
use wishart_vi::inference::train::{fresh_start, train};
use wishart_vi::inference::{StopRule, TrainConfig, TrainData};
use wishart_vi::kernels::KernelSpec;
use wishart_vi::likelihoods::{ModelConfig, Variant};
use wishart_vi::model::{Model, ModelParams};
use wishart_vi::rng::{rng_for, stream};

use common::{dense_logpdf, normal_matrix, normal_vector};

#[test]
fn scores_match_the_dense_oracle() {
    assert!((score_forecast(&DMatrix::identity(1, 1), &DVector::zeros(1)).unwrap()
        + 0.5 * (2.0 * std::f64::consts::PI).ln())
    .abs()
        < 1e-14);
    let two = score_forecast(&DMatrix::identity(2, 2), &DVector::from_element(2, 1.0)).unwrap();
    assert!((two + (2.0 * std::f64::consts::PI).ln() + 1.0).abs() < 1e-14);

    let mut rng = rng_for(5, 0, 0);
    for _ in 0..20 {
        let b = normal_matrix(&mut rng, 4, 6, 1.0);
        let sigma = &b * b.transpose() + DMatrix::identity(4, 4) * 0.1;
        let y = normal_vector(&mut rng, 4, 1.0);
        let got = score_forecast(&sigma, &y).unwrap();
        assert!((got - dense_logpdf(&sigma, &y)).abs() < 1e-10);
    }
    let y = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 0.0]);
    let base = identity_baseline_scores(&y);
    assert!((base[0] - two).abs() < 1e-14);
}

#[test]
fn small_and_large_sample_forecasts_agree() {
    let syn = generate_synthetic(&SyntheticSpec::correlated_pair(2)).unwrap();
    let ds = syn.dataset;
    let (kernel, kp) = KernelSpec::default_composite();
    let model = Model {
        config: ModelConfig::new(Variant::NoisyWp, 2).unwrap(),
        kernel,
    };
    let cfg = TrainConfig {
        num_inducing: 6,
        batch_size: 30,
        max_steps: 200,
        patience: None,
        checkpoint_window: 0,
        mean_from_data: true,
        factor_scale: 0.5,
        ..Default::default()
    };
    let params = ModelParams::init(&model, kp, &cfg.init_options(), Some(&ds.y), &mut rng_for(0, stream::INIT, 0)).unwrap();
    let data = TrainData {
        x: &ds.x,
        y: &ds.y,
        validation: None,
    };
    let out = train(&model, fresh_start(params, &cfg), &data, &cfg, StopRule::FixedSteps(200), None).unwrap();
    let x_star = InputGrid::from_inputs(&ds.x).unwrap().extend(3);

    let big = forecast_covariance(&model, &out.params, &x_star, 100_000, 1, true).unwrap();
    let small = forecast_covariance(&model, &out.params, &x_star, 300, 2, true).unwrap();
    assert_eq!(big.dropped + small.dropped, 0);
    let entry_std = |draws: &[Vec<DMatrix<f64>>], t: usize, i: usize, j: usize| {
        let v: Vec<f64> = draws.iter().map(|d| d[t][(i, j)]).collect();
        common::mean_std(&v).1
    };
    let (bd, sd) = (big.draws.as_ref().unwrap(), small.draws.as_ref().unwrap());
    for t in 0..3 {
        for i in 0..2 {
            for j in 0..=i {
                let se_s = entry_std(sd, t, i, j) / (300f64).sqrt();
                let se_b = entry_std(bd, t, i, j) / (100_000f64).sqrt();
                let diff = (small.covariances[t][(i, j)] - big.covariances[t][(i, j)]).abs();
                assert!(
                    diff <= 4.0 * (se_s * se_s + se_b * se_b).sqrt(),
                    "h{} ({i},{j}): {diff} vs SE {se_s}",
                    t + 1
                );
            }
        }
        assert_eq!(big.covariances[t], big.covariances[t].transpose());
    }
}
