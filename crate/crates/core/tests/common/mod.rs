//! Property definitions shared by the invariant suite and the acceptance run.

#![allow(dead_code)]

use std::collections::HashSet;

use loko::baselines::{AdaGradConfig, AdamWConfig};
use loko::data::{encode_idx_images, encode_idx_labels, epoch_order, load_mnist_idx, Dataset, Stream};
use loko::dense_ekf::DenseState;
use loko::harness::{self, Arch, DataSpec, Datasets, ExperimentConfig, ModelSpec, OptimizerSpec, OutputSpec, Seeds};
use loko::linalg::{diag_of_triple, row_scale, spd_solve, Matrix};
use loko::metrics::{argmax, in_top_k, MovingLoss, OnlineMetrics, StateSummary};
use loko::model::{Activation, InitScheme, ParamMode};
use loko::optimizer::{init_state, innovation_dim, kalman_gain, LokoConfig, P0Init, RMethod};
use nalgebra::DMatrix;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CASES: u32 = 100;

pub fn runner() -> TestRunner {
    let config = Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn random_spd(rng: &mut ChaCha8Rng, m: usize) -> Matrix {
    let a = random_matrix(rng, m, m);
    a.matmul(&a.transpose())
        .unwrap()
        .add(&Matrix::identity(m).scale(0.1))
        .unwrap()
}

pub fn positive_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.01..1.0)).collect()
}

pub fn probabilities(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(b).max(f64::MIN_POSITIVE)
}

fn to_dense(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// One diagonal-filter step and one dense-filter step from `P = diag(p)`;
/// returns the relative errors of the parameters and variances.
pub fn equivalence_instance(seed: u64, n: usize, m: usize, method: RMethod) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p = positive_vec(&mut rng, n);
    let h = random_matrix(&mut rng, m, n);
    let r_prev = random_spd(&mut rng, m);
    let pred = probabilities(&mut rng, m);
    let target = loko::data::one_hot(rng.random_range(0..m), m);
    let beta = rng.random_range(0.5..0.99);
    let config = LokoConfig {
        beta,
        r_method: method,
        p0: P0Init::Constant { value: 1.0 },
    };
    let mut diag = init_state(theta.clone(), m, config, 0).unwrap();
    diag.p_hat = p.clone();
    diag.r = r_prev.clone();
    diag.step = 3;
    diag.step_with(&pred, &h, &target).unwrap();

    let mut dense = DenseState::from_diagonal(theta, &p, m).unwrap();
    dense.r = to_dense(&r_prev);
    dense.step = 3;
    dense.step_with(&pred, &h, &target, method, beta).unwrap();
    (
        rel_err(&diag.theta, &dense.theta()),
        rel_err(&diag.p_hat, &dense.diag()),
    )
}

pub fn prop_diagonal_dense_equivalence() -> Result<(), String> {
    runner()
        .run(
            &(any::<u64>(), 0usize..=45, 1usize..=5, 0usize..5),
            |(seed, extra, m, k)| {
                let (et, ep) = equivalence_instance(seed, m + extra, m, RMethod::ALL[k]);
                prop_assert!(et <= 1e-10 && ep <= 1e-10, "theta {et:e}, p {ep:e}");
                Ok(())
            },
        )
        .map_err(|e| e.to_string())
}

pub fn prop_khatri_rao_dense() -> Result<(), String> {
    runner()
        .run(&(any::<u64>(), 1usize..=40, 1usize..=6), |(seed, n, m)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = positive_vec(&mut rng, n);
            let ht = random_matrix(&mut rng, n, m);
            let fast = row_scale(&p, &ht).unwrap();
            let dense = Matrix::from_diag(&p).matmul(&ht).unwrap();
            prop_assert!(fast.max_abs_diff(&dense) <= 1e-15);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn prop_einstein_contraction_dense() -> Result<(), String> {
    runner()
        .run(&(any::<u64>(), 1usize..=40, 1usize..=6), |(seed, n, m)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = positive_vec(&mut rng, n);
            let k = random_matrix(&mut rng, n, m);
            let h = random_matrix(&mut rng, m, n);
            let fast = diag_of_triple(&k, &h, &p).unwrap();
            let dense = k.matmul(&h).unwrap().matmul(&Matrix::from_diag(&p)).unwrap().diag();
            prop_assert!(rel_err(&fast, &dense) <= 1e-12);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn prop_ema_r_psd() -> Result<(), String> {
    runner()
        .run(
            &(any::<u64>(), 1usize..=6, 1usize..=20, any::<bool>()),
            |(seed, m, steps, with_hph)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = 12;
                let method = if with_hph {
                    RMethod::EmaResidualPlusHph
                } else {
                    RMethod::EmaResidual
                };
                let config = LokoConfig {
                    beta: rng.random_range(0.05..0.999),
                    r_method: method,
                    p0: P0Init::Constant { value: 1.0 },
                };
                let mut s = init_state(vec![0.0; n], m, config, 0).unwrap();
                for _ in 0..steps {
                    let residual: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
                    let h = random_matrix(&mut rng, m, n);
                    let p = positive_vec(&mut rng, n);
                    let hph = h
                        .matmul(&Matrix::from_diag(&p))
                        .unwrap()
                        .matmul(&h.transpose())
                        .unwrap();
                    let mut fresh = loko::linalg::outer(&residual, &residual).unwrap();
                    if with_hph {
                        fresh = fresh.add(&hph).unwrap();
                    }
                    let prev_trace = s.r.trace();
                    let r = s.estimate_r(&residual, &vec![0.0; m], Some(&hph)).unwrap().clone();
                    let tr = r.trace();
                    prop_assert!(tr <= prev_trace.max(fresh.trace()) * (1.0 + 1e-12) + 1e-15);
                    prop_assert!(r.max_abs_diff(&r.transpose()) == 0.0);
                    let eig = to_dense(&r).symmetric_eigen();
                    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
                    prop_assert!(min >= -1e-10 * tr.max(f64::MIN_POSITIVE), "min eigenvalue {min:e}");
                }
                Ok(())
            },
        )
        .map_err(|e| e.to_string())
}

pub fn prop_variances_non_increasing() -> Result<(), String> {
    runner()
        .run(
            &(any::<u64>(), 1usize..=60, 1usize..=5, 0usize..5, 1usize..=5),
            |(seed, n, m, k, steps)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let config = LokoConfig {
                    beta: 0.9,
                    r_method: RMethod::ALL[k],
                    p0: P0Init::Uniform { upper_bound: 1.0 },
                };
                let mut s = init_state(vec![0.0; n], m, config, seed).unwrap();
                for _ in 0..steps {
                    let h = random_matrix(&mut rng, m, n);
                    let pred = probabilities(&mut rng, m);
                    let target = loko::data::one_hot(rng.random_range(0..m), m);
                    let prior = s.p_hat.clone();
                    s.step_with(&pred, &h, &target).unwrap();
                    for (a, b) in s.p_hat.iter().zip(&prior) {
                        prop_assert!(*a <= b + 1e-12 && *a > 0.0);
                    }
                }
                Ok(())
            },
        )
        .map_err(|e| e.to_string())
}

pub fn prop_gain_is_m_by_m() -> Result<(), String> {
    runner()
        .run(&(any::<u64>(), 1usize..=300, 1usize..=6), |(seed, n, m)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_matrix(&mut rng, m, n);
            let p = positive_vec(&mut rng, n);
            let r = random_spd(&mut rng, m);
            prop_assert_eq!(innovation_dim(&h), m);
            let k = kalman_gain(&p, &h, &r).unwrap();
            prop_assert_eq!(k.shape(), (n, m));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn prop_scalar_scale_consistency() -> Result<(), String> {
    runner()
        .run(&(0.01f64..10.0, -5.0f64..5.0, 0.01f64..10.0), |(p, h, r)| {
            let hm = Matrix::from_rows(&[&[h]]);
            let k1 = kalman_gain(&[p], &hm, &Matrix::from_rows(&[&[r]])).unwrap()[(0, 0)];
            let k2 = kalman_gain(&[2.0 * p], &hm, &Matrix::from_rows(&[&[2.0 * r]])).unwrap()[(0, 0)];
            prop_assert!((k1 - k2).abs() <= 1e-12 * k1.abs().max(1e-300));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn prop_dense_symmetric_trace() -> Result<(), String> {
    runner()
        .run(&(any::<u64>(), 4usize..=20, 1usize..=4), |(seed, n, m)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p0 = loko::dense_ekf::random_spd(n, n as f64 * 0.5, seed);
            let mut s = DenseState::new(vec![0.0; n], p0, m, 2000).unwrap();
            for _ in 0..5 {
                let h = random_matrix(&mut rng, m, n);
                let pred = positive_vec(&mut rng, m);
                let target = positive_vec(&mut rng, m);
                let before = s.p.trace();
                s.step_with(&pred, &h, &target, RMethod::EmaResidualPlusHph, 0.9)
                    .unwrap();
                prop_assert!((&s.p - s.p.transpose()).norm() == 0.0);
                prop_assert!(s.p.trace() <= before * (1.0 + 1e-12));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn prop_spd_solve_residual() -> Result<(), String> {
    runner()
        .run(&(any::<u64>(), 1usize..=8, 1usize..=10), |(seed, m, cols)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_spd(&mut rng, m);
            let b = random_matrix(&mut rng, m, cols);
            let x = spd_solve(&s, &b).unwrap();
            let res = s.matmul(&x).unwrap().max_abs_diff(&b);
            prop_assert!(res <= 1e-10 * (1.0 + b.frobenius_norm()));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn prop_metrics_recount() -> Result<(), String> {
    runner()
        .run(&(any::<u64>(), 1usize..=300, 2usize..=12), |(seed, steps, classes)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut metrics = OnlineMetrics::new(classes, usize::MAX);
            let mut window = MovingLoss::new(usize::MAX);
            let mut log: Vec<(Vec<f64>, usize)> = Vec::new();
            let mut losses = Vec::new();
            for _ in 0..steps {
                // coarse values so ties occur
                let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0..4) as f64 + 0.5).collect();
                let total: f64 = raw.iter().sum();
                let pred: Vec<f64> = raw.iter().map(|v| v / total).collect();
                let label = rng.random_range(0..classes);
                let target = loko::data::one_hot(label, classes);
                let row = metrics.record(&pred, &target, StateSummary::NONE).unwrap();
                log.push((pred.clone(), label));
                losses.push(row.loss_l1);
                window.push(row.loss_l1);
                let k = log.len() as f64;
                let top1 = log.iter().filter(|(p, l)| argmax(p) == *l).count() as f64;
                let top5 = log.iter().filter(|(p, l)| in_top_k(p, *l, 5)).count() as f64;
                prop_assert!((row.acc_top1 - top1 / k).abs() < 1e-15);
                prop_assert!((row.acc_top5 - top5 / k).abs() < 1e-15);
                prop_assert!(row.acc_top5 >= row.acc_top1);
                let mean = losses.iter().sum::<f64>() / k;
                prop_assert!((row.moving_loss - mean).abs() <= 1e-12 * mean.max(1.0));
                prop_assert!((window.value().unwrap() - mean).abs() <= 1e-12 * mean.max(1.0));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn random_dataset(rng: &mut ChaCha8Rng, count: usize, rows: usize, cols: usize) -> Dataset {
    let pixels = (0..count * rows * cols).map(|_| rng.random::<u8>()).collect();
    let labels = (0..count).map(|_| rng.random_range(0..10u8)).collect();
    Dataset::new(rows, cols, pixels, labels, 10).unwrap()
}

pub fn prop_idx_roundtrip() -> Result<(), String> {
    runner()
        .run(
            &(any::<u64>(), 0usize..=40, 1usize..=9, 1usize..=9),
            |(seed, count, rows, cols)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let ds = random_dataset(&mut rng, count, rows, cols);
                let dir = tempfile::tempdir().unwrap();
                let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
                let images = encode_idx_images(&ds);
                let labels = encode_idx_labels(&ds);
                std::fs::write(&ip, &images).unwrap();
                std::fs::write(&lp, &labels).unwrap();
                let back = load_mnist_idx(&ip, &lp).unwrap();
                prop_assert_eq!(&back, &ds);
                prop_assert_eq!(encode_idx_images(&back), images);
                prop_assert_eq!(encode_idx_labels(&back), labels);
                for i in 0..back.len() {
                    prop_assert!(back.image(i).iter().all(|v| (0.0..=1.0).contains(v)));
                }
                Ok(())
            },
        )
        .map_err(|e| e.to_string())
}

pub fn prop_stream_epochs() -> Result<(), String> {
    runner()
        .run(&(any::<u64>(), 1usize..=60, 1u64..=3), |(seed, count, epochs)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ds = random_dataset(&mut rng, count, 2, 2);
            let samples: Vec<_> = Stream::new(&ds, seed, epochs).collect();
            prop_assert_eq!(samples.len() as u64, epochs * count as u64);
            for (e, chunk) in samples.chunks(count).enumerate() {
                let seen: HashSet<usize> = chunk.iter().map(|s| s.index).collect();
                prop_assert_eq!(seen.len(), count);
                let order: Vec<usize> = chunk.iter().map(|s| s.index).collect();
                prop_assert_eq!(order, epoch_order(count, seed, e as u64));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// A tiny config over 6×6 synthetic images.
pub fn tiny_config(seed: u64, optimizer: OptimizerSpec) -> ExperimentConfig {
    ExperimentConfig {
        schema_version: harness::SCHEMA_VERSION,
        name: "tiny".into(),
        seeds: Seeds::all(seed),
        model: ModelSpec {
            arch: Arch::Mlp,
            activation: Activation::Tanh,
            init: InitScheme::XavierUniform,
            input_pool: 2,
            hidden: vec![4],
            conv: ParamMode::Full,
            dense: ParamMode::Lora { rank: 1, sigma: 0.1 },
            head: ParamMode::Full,
            weights: None,
            fresh_head: false,
        },
        optimizer,
        data: DataSpec {
            dir: "unused".into(),
            labels: None,
            test_labels: None,
            train_limit: None,
            subset_seed: 0,
            test_limit: None,
            epochs: 2,
            max_steps: None,
            evaluate: true,
        },
        output: OutputSpec::default(),
    }
}

pub fn prop_run_determinism() -> Result<(), String> {
    runner()
        .run(&(any::<u64>(), 0usize..3, 5usize..=20), |(seed, kind, count)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = Datasets {
                train: random_dataset(&mut rng, count, 6, 6),
                test: Some(random_dataset(&mut rng, 5, 6, 6)),
            };
            let optimizer = match kind {
                0 => OptimizerSpec::Loko(LokoConfig::default()),
                1 => OptimizerSpec::Adamw(AdamWConfig::default()),
                _ => OptimizerSpec::Adagrad(AdaGradConfig::default()),
            };
            let cfg = tiny_config(seed % 1000, optimizer);
            let dir = tempfile::tempdir().unwrap();
            let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
            harness::run(&cfg, &data, Some(&a)).unwrap();
            harness::run(&cfg, &data, Some(&b)).unwrap();
            let replayed = harness::manifest_config(&a.join("manifest.toml")).unwrap();
            prop_assert_eq!(&replayed, &cfg);
            harness::run(&replayed, &data, Some(&c)).unwrap();
            let csv_a = std::fs::read(a.join("metrics.csv")).unwrap();
            prop_assert_eq!(csv_a.iter().filter(|&&c| c == b'\n').count(), 2 * count + 1);
            prop_assert_eq!(&csv_a, &std::fs::read(b.join("metrics.csv")).unwrap());
            prop_assert_eq!(&csv_a, &std::fs::read(c.join("metrics.csv")).unwrap());
            prop_assert_eq!(
                std::fs::read(a.join("weights.bin")).unwrap(),
                std::fs::read(c.join("weights.bin")).unwrap()
            );
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub type Property = (&'static str, fn() -> Result<(), String>);

pub const PROPERTIES: &[Property] = &[
    ("khatri_rao_matches_dense", prop_khatri_rao_dense),
    ("einstein_contraction_matches_dense", prop_einstein_contraction_dense),
    ("diagonal_step_matches_dense_filter", prop_diagonal_dense_equivalence),
    ("ema_noise_estimate_is_psd", prop_ema_r_psd),
    ("variances_never_increase", prop_variances_non_increasing),
    ("factored_matrix_is_m_by_m", prop_gain_is_m_by_m),
    ("scalar_gain_scale_invariant", prop_scalar_scale_consistency),
    (
        "dense_covariance_symmetric_trace_non_increasing",
        prop_dense_symmetric_trace,
    ),
    ("spd_solve_residual", prop_spd_solve_residual),
    ("metrics_match_recount", prop_metrics_recount),
    ("idx_parser_roundtrip", prop_idx_roundtrip),
    ("stream_visits_each_sample_once_per_epoch", prop_stream_epochs),
    ("runs_replay_byte_identical", prop_run_determinism),
];
