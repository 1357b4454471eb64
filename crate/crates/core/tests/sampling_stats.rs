mod common;

use bdlab::network::{Geometry, NetworkModel};
use bdlab::sampling::{propose, sample_learning_rate, ProposalKind, ProposalSpec, RngStream};
use bdlab::tensor::ConvMode;
use bdlab::trainer::sample_freeze_mask;

use common::{ks_critical, ks_statistic, mean_std};

const N: usize = 100_000;

#[test]
fn ks_critical_matches_table_value() {
    assert!((ks_critical(1) - 1.9495).abs() < 1e-4);
}

#[test]
fn normal_proposals_center_on_weight() {
    let w = 0.37;
    let eta = 0.001;
    let spec = ProposalSpec::new(ProposalKind::NormalCentered, eta).unwrap();
    let out = propose(&vec![w; N], &spec, &mut RngStream::new(101));
    let (mean, std) = mean_std(&out);
    let se = eta / (N as f64).sqrt();
    assert!((mean - w).abs() < 5.0 * se, "mean {mean} vs {w}");
    assert!((std - eta).abs() < 0.05 * eta, "std {std}");
}

#[test]
fn uniform_deltas_bounded_and_centered() {
    let w = -0.2;
    let eta = 0.01;
    let spec = ProposalSpec::new(ProposalKind::UniformAdditive, eta).unwrap();
    let out = propose(&vec![w; N], &spec, &mut RngStream::new(202));
    let deltas: Vec<f64> = out.iter().map(|v| v - w).collect();
    // one ulp of w of slack for the subtraction
    let slack = 1e-15;
    assert!(deltas.iter().all(|d| d.abs() <= eta + slack));
    let (mean, std) = mean_std(&deltas);
    let sigma = eta / 3f64.sqrt();
    assert!(mean.abs() < 5.0 * sigma / (N as f64).sqrt(), "mean {mean}");
    assert!((std - sigma).abs() < 0.05 * sigma, "std {std}");
    let d = ks_statistic(deltas, |x| ((x + eta) / (2.0 * eta)).clamp(0.0, 1.0));
    assert!(d < ks_critical(N), "KS {d}");
}

#[test]
fn unit_uniform_ignores_current_weights() {
    let spec = ProposalSpec::new(ProposalKind::ZeroMeanUnitUniform, 0.0).unwrap();
    let a: Vec<f64> = propose(&vec![5.0; N], &spec, &mut RngStream::new(303));
    let b = propose(&vec![-5.0; N], &spec, &mut RngStream::new(303));
    assert_eq!(a, b);
    assert!(a.iter().all(|v| v.abs() < 1.0));
    let (mean, std) = mean_std(&a);
    let sigma = 1.0 / 3f64.sqrt();
    assert!(mean.abs() < 5.0 * sigma / (N as f64).sqrt());
    assert!((std - sigma).abs() < 0.05 * sigma);
}

#[test]
fn log_learning_rate_is_uniform() {
    let mut rng = RngStream::new(404);
    let logs: Vec<f64> = (0..N).map(|_| sample_learning_rate(&mut rng).log10()).collect();
    assert!(logs.iter().all(|&u| (-6.0..=1.0).contains(&u)));
    let d = ks_statistic(logs, |u| ((u + 6.0) / 7.0).clamp(0.0, 1.0));
    assert!(d < ks_critical(N), "KS {d} >= {}", ks_critical(N));
}

#[test]
fn ks_rejects_skewed_learning_rates() {
    let mut rng = RngStream::new(405);
    // squaring the unit draw skews toward small exponents
    let logs: Vec<f64> = (0..N).map(|_| -6.0 + 7.0 * rng.unit().powi(2)).collect();
    let d = ks_statistic(logs, |u| ((u + 6.0) / 7.0).clamp(0.0, 1.0));
    assert!(d > ks_critical(N));
}

#[test]
fn random_filter_frozen_count_is_binomial() {
    let model = NetworkModel::<f64>::three_layer(ConvMode::ChannelSum, Geometry::MNIST, 10, [16, 16]).unwrap();
    assert_eq!(model.num_filters(), 42);
    let gamma = 0.75;
    let batches = 1000;
    let mut rng = RngStream::new(505);
    let total: usize = (0..batches)
        .map(|_| sample_freeze_mask(&model, gamma, &mut rng).iter().flatten().filter(|&&f| f).count())
        .sum();
    let mean = total as f64 / batches as f64;
    let expected = 42.0 * gamma;
    assert_eq!(expected, 31.5);
    let se = (42.0 * gamma * (1.0 - gamma) / batches as f64).sqrt();
    assert!((mean - expected).abs() < 5.0 * se, "mean frozen {mean}");
}

#[test]
fn proposal_streams_replay() {
    let spec = ProposalSpec::new(ProposalKind::NormalCentered, 0.5).unwrap();
    let w = vec![0.1; 64];
    assert_eq!(propose(&w, &spec, &mut RngStream::new(9)), propose(&w, &spec, &mut RngStream::new(9)));
    assert_ne!(propose(&w, &spec, &mut RngStream::new(9)), propose(&w, &spec, &mut RngStream::new(10)));
}
