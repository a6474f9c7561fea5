mod common;

use common::{dot, logistic_hessian_oracle, norm, random_vec, rel_err, synthetic};
use fairdp::nn::hessian::quadratic_form;
use fairdp::nn::{
    hutchinson_trace, hvp, max_eigenvalue, Architecture, GradientField, HvpMethod, Model,
    ModelObjective, ParamVector, QuadraticObjective,
};
use fairdp::Error;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_mlp() -> Architecture {
    // 4*5 + 5 + 5*3 + 3 = 43 parameters
    Architecture::Mlp {
        inputs: 4,
        hidden: vec![5],
        outputs: 3,
    }
}

fn small_cnn() -> Architecture {
    Architecture::Cnn {
        channels: 2,
        height: 7,
        width: 6,
        conv1: 3,
        conv2: 2,
        kernel: 3,
        stride: 1,
        outputs: 3,
    }
}

fn fd_gradient(model: &Model, x: &[f64], y: u32) -> Vec<f64> {
    let p = model.params().to_vec();
    (0..p.len())
        .map(|j| {
            let h = 1e-6 * (1.0 + p[j].abs());
            let mut plus = p.clone();
            plus[j] += h;
            let mut minus = p.clone();
            minus[j] -= h;
            let lp = Model::from_params(model.architecture().clone(), ParamVector::from_vec(plus))
                .unwrap()
                .sample_loss(x, y);
            let lm = Model::from_params(model.architecture().clone(), ParamVector::from_vec(minus))
                .unwrap()
                .sample_loss(x, y);
            (lp - lm) / (2.0 * h)
        })
        .collect()
}

fn check_fd(arch: Architecture, classes: usize, points: u64) {
    let dim = arch.input_dim();
    let data = synthetic(points as usize, dim, classes, 11);
    for seed in 0..points {
        let model = Model::new(arch.clone(), seed).unwrap();
        let i = seed as usize;
        let mut g = vec![0.0; model.num_params()];
        model.sample_gradient(data.row(i), data.label(i), &mut g);
        let fd = fd_gradient(&model, data.row(i), data.label(i));
        let e = rel_err(&g, &fd);
        assert!(e < 1e-4, "{arch:?} point {seed}: relative error {e}");
    }
}

#[test]
fn gradient_matches_finite_differences_logistic() {
    check_fd(
        Architecture::Logistic {
            inputs: 6,
            outputs: 1,
        },
        2,
        20,
    );
    check_fd(
        Architecture::Logistic {
            inputs: 6,
            outputs: 2,
        },
        2,
        20,
    );
}

#[test]
fn gradient_matches_finite_differences_mlp() {
    check_fd(small_mlp(), 3, 20);
}

#[test]
fn gradient_matches_finite_differences_cnn() {
    check_fd(small_cnn(), 3, 20);
}

#[test]
fn logistic_gradient_at_origin() {
    let arch = Architecture::Logistic {
        inputs: 3,
        outputs: 1,
    };
    let model = Model::from_params(arch, ParamVector::zeros(4)).unwrap();
    let mut g = vec![1.0; 4];
    model.sample_gradient(&[0.0, 0.0, 0.0], 1, &mut g);
    assert_eq!(&g[..3], &[0.0, 0.0, 0.0]);
    assert!((g[3] + 0.5).abs() < 1e-15);
}

#[test]
fn duplicate_samples_give_identical_gradients() {
    let data = synthetic(5, 4, 3, 2);
    let model = Model::new(small_mlp(), 3).unwrap();
    let gs = model.per_sample_gradients(&data, &[2, 2]).unwrap();
    assert_eq!(gs[0], gs[1]);
}

#[test]
fn dimension_mismatch_is_rejected() {
    let data = synthetic(5, 3, 3, 2);
    let model = Model::new(small_mlp(), 3).unwrap();
    assert!(matches!(
        model.per_sample_gradients(&data, &[0]),
        Err(Error::Config(_))
    ));
}

#[test]
fn mean_gradient_matches_direct_summation() {
    let data = synthetic(300, 4, 3, 5);
    let model = Model::new(small_mlp(), 1).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    let mean = model.mean_gradient(&data, &idx).unwrap();
    let mut sum = vec![0.0; model.num_params()];
    let mut g = vec![0.0; model.num_params()];
    for i in 0..data.len() {
        model.sample_gradient(data.row(i), data.label(i), &mut g);
        for (s, v) in sum.iter_mut().zip(&g) {
            *s += v;
        }
    }
    let direct: Vec<f64> = sum.iter().map(|s| s / data.len() as f64).collect();
    assert!(rel_err(&mean, &direct) < 1e-10);
    let per = model.per_sample_gradients(&data, &idx).unwrap();
    let from_list: Vec<f64> = (0..model.num_params())
        .map(|j| per.iter().map(|p| p[j]).sum::<f64>() / per.len() as f64)
        .collect();
    assert!(rel_err(&mean, &from_list) < 1e-10);
}

#[test]
fn mean_gradient_matches_gradient_of_mean_loss() {
    let data = synthetic(40, 4, 3, 8);
    let model = Model::new(small_mlp(), 4).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    let mean = model.mean_gradient(&data, &idx).unwrap();
    let p = model.params().to_vec();
    let fd: Vec<f64> = (0..p.len())
        .map(|j| {
            let h = 1e-6;
            let eval = |delta: f64| {
                let mut q = p.clone();
                q[j] += delta;
                Model::from_params(small_mlp(), ParamVector::from_vec(q))
                    .unwrap()
                    .mean_loss(&data, &idx)
                    .unwrap()
            };
            (eval(h) - eval(-h)) / (2.0 * h)
        })
        .collect();
    assert!(rel_err(&mean, &fd) < 1e-6);
}

#[test]
fn group_means_combine_to_overall_mean() {
    let data = synthetic(200, 4, 3, 9);
    let model = Model::new(small_mlp(), 2).unwrap();
    let counts = data.group_counts();
    let (na, nb) = (counts[&0] as f64, counts[&1] as f64);
    let ga = model.group_mean_gradient(&data, Some(0)).unwrap();
    let gb = model.group_mean_gradient(&data, Some(1)).unwrap();
    let g = model.group_mean_gradient(&data, None).unwrap();
    let combined: Vec<f64> = ga
        .iter()
        .zip(gb.iter())
        .map(|(a, b)| (na * a + nb * b) / (na + nb))
        .collect();
    assert!(rel_err(&g, &combined) < 1e-12);
}

#[test]
fn group_mean_of_single_sample_is_its_gradient() {
    let data = synthetic(1, 4, 3, 9);
    let model = Model::new(small_mlp(), 2).unwrap();
    let mut g = vec![0.0; model.num_params()];
    model.sample_gradient(data.row(0), data.label(0), &mut g);
    let m = model.group_mean_gradient(&data, None).unwrap();
    assert!(rel_err(&m, &g) < 1e-15);
}

#[test]
fn missing_group_is_an_error() {
    let data = synthetic(20, 4, 3, 9);
    let model = Model::new(small_mlp(), 2).unwrap();
    assert!(matches!(
        model.group_mean_gradient(&data, Some(7)),
        Err(Error::EmptyGroup(7))
    ));
}

#[test]
fn reductions_do_not_depend_on_thread_count() {
    let data = synthetic(1000, 4, 3, 10);
    let model = Model::new(small_mlp(), 2).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| model.mean_gradient(&data, &idx).unwrap())
    };
    let a = run(1);
    let b = run(3);
    assert!(a
        .iter()
        .zip(b.iter())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

/// Gradient-only view of another field, which forces the finite-difference
/// product.
struct GradientOnly<'a, F: GradientField>(&'a F);

impl<F: GradientField> GradientField for GradientOnly<'_, F> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn point(&self) -> &[f64] {
        self.0.point()
    }
    fn gradient_at(&self, theta: &[f64]) -> Vec<f64> {
        self.0.gradient_at(theta)
    }
}

#[test]
fn logistic_hvp_matches_analytic_hessian() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for outputs in [1, 2] {
        let data = synthetic(120, 9, 2, 3);
        let model = Model::new(Architecture::Logistic { inputs: 9, outputs }, 5).unwrap();
        let oracle = logistic_hessian_oracle(&model, &data);
        let obj = ModelObjective::new(&model, &data, data.all_indices()).unwrap();
        for _ in 0..5 {
            let v = random_vec(model.num_params(), &mut rng);
            let expected = &oracle * DVector::from_column_slice(&v);
            let r = hvp(&obj, &v).unwrap();
            assert_eq!(r.method, HvpMethod::Analytic);
            assert!(rel_err(&r.vector, expected.as_slice()) < 1e-6);
            let fd = hvp(&GradientOnly(&obj), &v).unwrap();
            assert_eq!(fd.method, HvpMethod::CentralFiniteDifference);
            assert!(rel_err(&fd.vector, expected.as_slice()) < 1e-6);
        }
    }
}

#[test]
fn quadratic_hvp_recovers_matrix_action() {
    let a = vec![4.0, 1.0, 0.0, 1.0, 3.0, -0.5, 0.0, -0.5, 2.0];
    let q = QuadraticObjective::new(3, a.clone(), vec![0.3, -0.2, 0.7]).unwrap();
    let v = [1.0, -2.0, 0.5];
    let av: Vec<f64> = (0..3).map(|i| dot(&a[3 * i..3 * i + 3], &v)).collect();
    let r = hvp(&q, &v).unwrap();
    assert!(rel_err(&r.vector, &av) < 1e-7);
    assert!((quadratic_form(&q, &v).unwrap() - dot(&v, &av)).abs() < 1e-6);
}

#[test]
fn zero_direction_is_rejected() {
    let q = QuadraticObjective::diagonal(&[1.0, 2.0]);
    assert!(matches!(
        hvp(&q, &[0.0, 0.0]),
        Err(Error::DegenerateDirection(_))
    ));
}

#[test]
fn hutchinson_on_identity() {
    let q = QuadraticObjective::diagonal(&[1.0; 20]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = hutchinson_trace(&q, 10_000, &mut rng).unwrap();
    assert!((t.mean - 20.0).abs() <= 0.02 * 20.0);
    let one = hutchinson_trace(&q, 1, &mut rng).unwrap();
    assert!(one.mean.is_finite());
    assert_eq!(one.probes, 1);
}

#[test]
fn hutchinson_matches_unit_vector_trace() {
    let data = synthetic(200, 14, 2, 6);
    let model = Model::new(
        Architecture::Logistic {
            inputs: 14,
            outputs: 2,
        },
        1,
    )
    .unwrap();
    // 14*2 + 2 = 30 parameters
    assert_eq!(model.num_params(), 30);
    let obj = ModelObjective::new(&model, &data, data.all_indices()).unwrap();
    let exact: f64 = (0..30)
        .map(|i| {
            let mut e = vec![0.0; 30];
            e[i] = 1.0;
            hvp(&obj, &e).unwrap().vector[i]
        })
        .sum();
    assert!((exact - logistic_hessian_oracle(&model, &data).trace()).abs() < 1e-10);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t = hutchinson_trace(&obj, 400, &mut rng).unwrap();
    assert!(
        (t.mean - exact).abs() <= 3.0 * t.std_error,
        "{} vs {exact} (se {})",
        t.mean,
        t.std_error
    );
}

#[test]
fn power_iteration_on_diagonal_and_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let e = max_eigenvalue(
        &QuadraticObjective::diagonal(&[1.0, 2.0, 5.0]),
        100,
        &mut rng,
    )
    .unwrap();
    assert!((e.value - 5.0).abs() < 1e-3);
    assert_eq!(e.history.len(), 100);
    let id = max_eigenvalue(&QuadraticObjective::diagonal(&[1.0; 6]), 3, &mut rng).unwrap();
    assert!((id.value - 1.0).abs() < 1e-6);
}

#[test]
fn power_iteration_matches_dense_eigensolver() {
    let data = synthetic(150, 14, 2, 12);
    let model = Model::new(
        Architecture::Logistic {
            inputs: 14,
            outputs: 2,
        },
        3,
    )
    .unwrap();
    let obj = ModelObjective::new(&model, &data, data.all_indices()).unwrap();
    let eig = logistic_hessian_oracle(&model, &data).symmetric_eigen();
    let top = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let est = max_eigenvalue(&obj, 300, &mut rng).unwrap();
    assert!(
        (est.value - top).abs() < 1e-3 * top.max(1.0),
        "{} vs {top}",
        est.value
    );
    // Rayleigh quotients of a PSD matrix under power iteration never decrease
    for w in est.history.windows(2) {
        assert!(w[1] >= w[0] - 1e-12 * top);
    }
}

#[test]
fn parameter_counts() {
    assert_eq!(
        Architecture::Logistic {
            inputs: 59,
            outputs: 2
        }
        .num_params(),
        120
    );
    assert_eq!(
        Architecture::Mlp {
            inputs: 98,
            hidden: vec![256, 256],
            outputs: 2
        }
        .num_params(),
        91_650
    );
    assert_eq!(Architecture::mnist_cnn().num_params(), 10_714);
}

#[test]
fn probabilities_are_valid() {
    let data = synthetic(30, 84, 3, 1);
    let model = Model::new(small_cnn(), 6).unwrap();
    for i in 0..data.len() {
        let p = model.predict_proba(data.row(i));
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn hvp_is_symmetric(seed in 0u64..1_000_000) {
        let data = synthetic(30, 4, 3, 21);
        let model = Model::new(small_mlp(), 21).unwrap();
        let obj = ModelObjective::new(&model, &data, data.all_indices()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_vec(model.num_params(), &mut rng);
        let v = random_vec(model.num_params(), &mut rng);
        let hu = hvp(&obj, &u).unwrap().vector;
        let hv = hvp(&obj, &v).unwrap().vector;
        prop_assert!((dot(&u, &hv) - dot(&v, &hu)).abs() <= 1e-5 * norm(&u) * norm(&v));
    }
}
