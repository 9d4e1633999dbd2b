use approx::assert_relative_eq;
use guided_admm::guidance::{GuidanceModel, LinearGaussianGuidance, LinearOperator, Waypoint, WaypointGuidance};
use guided_admm::numeric::{finite_diff_grad, Matrix, Vector};
use guided_admm::schedule::{make_linear_schedule, NoiseSchedule};
use guided_admm::scores::{tweedie_denoise, GaussianScoreModel, MixtureScoreModel, ScoreModel};
use proptest::prelude::*;

// Error-free product (Dekker) so the reference cumulative product carries
// roughly twice the working precision.
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

fn dd_cumprod(factors: &[f64]) -> Vec<f64> {
    let (mut hi, mut lo) = (1.0f64, 0.0f64);
    factors
        .iter()
        .map(|&f| {
            let (p, e) = two_prod(hi, f);
            let e = e + lo * f;
            hi = p + e;
            lo = e - (hi - p);
            hi
        })
        .collect()
}

#[test]
fn alpha_bar_matches_double_double_product() {
    let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
    let reference = dd_cumprod(s.alphas());
    for t in 1..=1000 {
        assert_relative_eq!(s.alpha_bar(t), reference[t - 1], max_relative = 1e-12);
    }
    assert_relative_eq!(s.beta(1), 1e-4, max_relative = 1e-15);
    assert_relative_eq!(s.beta(1000), 0.02, max_relative = 1e-15);
    assert_eq!(s.alpha_bar_prev(1), 1.0);
}

#[test]
fn reverse_variance_formula() {
    let s = make_linear_schedule(10, 0.01, 0.2).unwrap();
    for t in 2..=10 {
        let expect = s.beta(t) * (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t));
        assert_relative_eq!(s.reverse_variance(t), expect, max_relative = 1e-14);
    }
}

#[test]
fn invalid_betas_rejected() {
    assert!(NoiseSchedule::from_betas(vec![]).is_err());
    assert!(NoiseSchedule::from_betas(vec![0.1, 1.0]).is_err());
    assert!(NoiseSchedule::from_betas(vec![-0.1]).is_err());
    assert!(make_linear_schedule(0, 1e-4, 0.02).is_err());
}

#[test]
fn gaussian_tweedie_is_posterior_mean() {
    // x0 ~ N(m, v), x = √ᾱ x0 + √(1-ᾱ) ε, E[x0|x] by Gaussian conditioning.
    let m = Vector::from_vec(vec![0.5, -1.0]);
    let var = 2.0;
    let model = GaussianScoreModel::new(m.clone(), var).unwrap();
    let x = Vector::from_vec(vec![0.3, 0.9]);
    for abar in [0.9f64, 0.5, 0.05] {
        let gain = abar.sqrt() * var / (abar * var + 1.0 - abar);
        let expect = &m + (&x - &m * abar.sqrt()) * gain;
        let got = tweedie_denoise(&model, &x, abar).unwrap();
        assert_relative_eq!(got, expect, max_relative = 1e-12);
    }
}

fn mixture() -> MixtureScoreModel {
    MixtureScoreModel::new(
        vec![0.3, 0.7],
        vec![
            Vector::from_vec(vec![1.0, -0.5, 0.0]),
            Vector::from_vec(vec![-1.0, 0.5, 0.4]),
        ],
        vec![0.4, 0.9],
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mixture_score_is_gradient_of_log_density(
        x in proptest::collection::vec(-3.0f64..3.0, 3),
        abar in 0.01f64..1.0,
    ) {
        let m = mixture();
        let x = Vector::from_vec(x);
        let fd = finite_diff_grad(|p| m.log_density(p, abar).unwrap(), &x, 1e-5);
        let s = m.score(&x, abar).unwrap();
        prop_assert!((fd - &s).norm() <= 1e-6 * (1.0 + s.norm()));
    }

    #[test]
    fn mixture_hessian_matches_score_jacobian(
        x in proptest::collection::vec(-2.0f64..2.0, 3),
        abar in 0.05f64..1.0,
    ) {
        let m = mixture();
        let x = Vector::from_vec(x);
        let h = m.neg_log_hessian(&x, abar);
        let eps = 1e-5;
        for j in 0..3 {
            let mut p = x.clone();
            let mut q = x.clone();
            p[j] += eps;
            q[j] -= eps;
            let col = -(m.score(&p, abar).unwrap() - m.score(&q, abar).unwrap()) / (2.0 * eps);
            for i in 0..3 {
                prop_assert!((h[(i, j)] - col[i]).abs() <= 1e-5 * (1.0 + h[(i, j)].abs()));
            }
        }
    }

    #[test]
    fn guidance_gradient_matches_finite_differences(
        entries in proptest::collection::vec(-1.0f64..1.0, 12),
        y in proptest::collection::vec(-1.0f64..1.0, 3),
        z in proptest::collection::vec(-2.0f64..2.0, 4),
        sigma in 0.2f64..2.0,
    ) {
        let a = Matrix::from_row_slice(3, 4, &entries);
        let g = LinearGaussianGuidance::new(LinearOperator::dense(&a), Vector::from_vec(y), sigma).unwrap();
        let z = Vector::from_vec(z);
        let fd = finite_diff_grad(|p| g.log_c(p).unwrap(), &z, 1e-5);
        let grad = g.grad_log_c(&z).unwrap();
        prop_assert!((fd - &grad).norm() <= 1e-6 * (1.0 + grad.norm()));
    }

    #[test]
    fn operator_adjoint_identity(
        u in proptest::collection::vec(-2.0f64..2.0, 12),
        w_seed in proptest::collection::vec(-2.0f64..2.0, 12),
        which in 0usize..3,
    ) {
        let op = match which {
            0 => LinearOperator::Mask { dim: 12, indices: vec![1, 4, 5, 11] },
            1 => LinearOperator::Decimate { dim: 12, factor: 3 },
            _ => LinearOperator::CircularConv { dim: 12, kernel: vec![0.2, 0.5, 0.3] },
        };
        let u = Vector::from_vec(u);
        let w = Vector::from_iterator(op.out_dim(), w_seed.into_iter().take(op.out_dim()));
        let lhs = op.apply(&u).unwrap().dot(&w);
        let rhs = u.dot(&op.adjoint(&w).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        let dense = op.to_dense();
        prop_assert!((dense * &u - op.apply(&u).unwrap()).norm() <= 1e-12);
    }
}

#[test]
fn waypoint_guidance_equals_its_linear_gaussian_form() {
    let g = WaypointGuidance::new(
        8,
        2,
        vec![0, 1],
        vec![
            Waypoint {
                index: 0,
                target: vec![0.5, -0.5],
            },
            Waypoint {
                index: 3,
                target: vec![1.0, 2.0],
            },
        ],
        0.7,
    )
    .unwrap();
    let lg = g.as_linear_gaussian().unwrap();
    let z = Vector::from_fn(8, |i, _| (i as f64 * 0.37).sin());
    let offset = g.log_c(&z).unwrap() - lg.log_c(&z).unwrap();
    let z2 = Vector::from_fn(8, |i, _| (i as f64 * 1.3).cos());
    assert_relative_eq!(g.log_c(&z2).unwrap() - lg.log_c(&z2).unwrap(), offset, epsilon = 1e-12);
    assert_relative_eq!(g.grad_log_c(&z).unwrap(), lg.grad_log_c(&z).unwrap(), epsilon = 1e-12);
}
