mod common;

use common::*;
use multiway::gmm::{
    cell_moment_sums, gmm_fit_with, gmm_jhat_numeric, Column, FnMoments, LinearIv, MeanMoment, WeightChoice,
};
use multiway::nalgebra::{DMatrix, DVector};
use multiway::simulation::mean_sd;
use multiway::{
    generate, gmm_fit, gmm_hhat, gmm_jhat, gmm_objective, gmm_variance, load_sample, probit_score_moments,
    quantile_estimate, quantile_iv_moments, ratio_estimate, ClusteredSample, Coordinate, DgpSpec, Dimensions, EcdfSpec,
    MomentModel, OptimizerConfig, ThetaBox, WeightMatrix,
};
use rand::Rng;

fn random_spd(r: &mut multiway::rng::StreamRng, l: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(l, l, |_, _| normal(r));
    &a * a.transpose() + DMatrix::identity(l, l) * 0.5
}

/// Units `(y, x, z)` with `x` endogenous and `z` a valid instrument.
fn iv_sample(r: &mut multiway::rng::StreamRng, dims: &Dimensions) -> ClusteredSample {
    let mut recs = Vec::new();
    for lin in 0..dims.pi_c() {
        for _ in 0..r.random_range(1..3) {
            let z = normal(r);
            let v = normal(r);
            let x = z + v;
            let y = 0.5 + 1.5 * x + v + normal(r);
            recs.push((dims.coords(lin).0, vec![y, x, z, normal(r)]));
        }
    }
    load_sample(&recs, dims).unwrap()
}

#[test]
fn objective_matches_direct_composition() {
    let mut r = rng(20);
    let dims = Dimensions::new(vec![4, 3]).unwrap();
    let sample = iv_sample(&mut r, &dims);
    let f = |y: &[f64], t: &[f64]| vec![y[0] - t[0] * y[1], t[1].sin() * y[2] - y[3] * y[3], t[0] * t[1] - y[0]];
    let model = MomentModel::new(FnMoments::new(2, 3, f), ThetaBox::symmetric(2, 5.0)).unwrap();
    for _ in 0..10 {
        let xi = random_spd(&mut r, 3);
        let theta = [r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)];
        let mut mbar = DVector::zeros(3);
        for (_, y) in sample.units() {
            mbar += DVector::from_vec(f(y, &theta));
        }
        mbar /= dims.pi_c() as f64;
        let chol = xi.clone().cholesky().unwrap();
        let expected = (chol.l().transpose() * mbar).norm();
        let got = gmm_objective(&sample, &model, &WeightMatrix::new(xi).unwrap(), &theta).unwrap();
        assert!((got - expected).abs() <= 1e-10 * expected);
    }
}

#[test]
fn mean_moment_reproduces_the_ratio_mean() {
    let mut r = rng(21);
    let dims = Dimensions::new(vec![5, 4]).unwrap();
    let sample = iv_sample(&mut r, &dims);
    let model = MomentModel::new(MeanMoment { coordinate: 0 }, ThetaBox::symmetric(1, 50.0)).unwrap();
    let fit = gmm_fit(&sample, &model, &WeightMatrix::identity(1), &OptimizerConfig::default()).unwrap();
    let ratio = ratio_estimate(&sample, &Coordinate(0)).unwrap();
    assert!((fit.theta[0] - ratio.theta[0]).abs() <= 1e-8 * ratio.theta[0].abs());
    let jhat = gmm_jhat(&sample, &model, &fit.theta).unwrap();
    let expected = -(sample.total_units() as f64) / dims.pi_c() as f64;
    assert!((jhat[(0, 0)] - expected).abs() < 1e-12);
    // V̂ = Ĥ/Ĵ² equals V̂₁ of the T̂ scores, which carry the 1/E(N) factor
    let v = fit.vhat.unwrap()[(0, 0)];
    let scores = ratio.scores.unwrap();
    let v_ratio = multiway::vhat1(&scores).matrix[(0, 0)];
    assert!((v - v_ratio).abs() <= 1e-8 * v_ratio);
}

#[test]
fn just_identified_iv_is_two_stage_least_squares() {
    let mut r = rng(22);
    let dims = Dimensions::new(vec![6, 5]).unwrap();
    let sample = iv_sample(&mut r, &dims);
    let iv = LinearIv {
        outcome: 0,
        x: vec![Column::One, Column::Obs(1)],
        z: vec![Column::One, Column::Obs(2)],
    };
    let model = MomentModel::new(iv, ThetaBox::symmetric(2, 100.0)).unwrap();
    let fit = gmm_fit(&sample, &model, &WeightMatrix::identity(2), &OptimizerConfig::default()).unwrap();
    let mut zx = DMatrix::zeros(2, 2);
    let mut zy = DVector::zeros(2);
    for (_, y) in sample.units() {
        let (x, z) = ([1.0, y[1]], [1.0, y[2]]);
        zx += outer(&z, &x);
        zy += DVector::from_column_slice(&z) * y[0];
    }
    let closed = zx.clone().lu().solve(&zy).unwrap();
    for c in 0..2 {
        assert!((fit.theta[c] - closed[c]).abs() <= 1e-8 * closed[c].abs().max(1.0));
    }
    let jhat = fit.jhat.as_ref().unwrap();
    assert!(rel(jhat, &(-zx / dims.pi_c() as f64)) < 1e-12);
    // just identified with identity weight: Ĵ⁻¹ĤĴ⁻¹'
    let j_inv = jhat.clone().try_inverse().unwrap();
    let v = &j_inv * &fit.hhat * j_inv.transpose();
    assert!(rel(fit.vhat.as_ref().unwrap(), &v) < 1e-10);
}

#[test]
fn hhat_matches_pair_oracle_and_is_psd() {
    let mut r = rng(23);
    let dims = Dimensions::new(vec![4, 3, 2]).unwrap();
    let sample = iv_sample(&mut r, &dims);
    let iv = LinearIv {
        outcome: 0,
        x: vec![Column::One, Column::Obs(1)],
        z: vec![Column::One, Column::Obs(2), Column::Obs(3)],
    };
    let model = MomentModel::new(iv, ThetaBox::symmetric(2, 10.0)).unwrap();
    for _ in 0..5 {
        let theta = [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)];
        let h = gmm_hhat(&sample, &model, &theta).unwrap();
        let sums = cell_moment_sums(&sample, &model, &theta).unwrap();
        assert!(rel(&h, &oracle_v1(&sums)) < 1e-12);
        let min = h.clone().symmetric_eigen().eigenvalues.min();
        assert!(min >= -1e-10 * h.trace());
    }
}

#[test]
fn variance_composition() {
    let mut r = rng(24);
    for (l, p) in [(2, 2), (4, 2), (3, 1)] {
        let j = DMatrix::from_fn(l, p, |_, _| normal(&mut r));
        let h = random_spd(&mut r, l);
        let xi = random_spd(&mut r, l);
        let bread = (j.transpose() * &xi * &j).try_inverse().unwrap();
        let expected = &bread * j.transpose() * &xi * &h * &xi * &j * &bread;
        let got = gmm_variance(&j, &h, &WeightMatrix::new(xi).unwrap()).unwrap();
        assert!(rel(&got, &expected) < 1e-12);
        assert_eq!(got, got.transpose());
    }
    let i = DMatrix::identity(2, 2);
    let h = random_spd(&mut r, 2);
    assert!(rel(&gmm_variance(&i, &h, &WeightMatrix::identity(2)).unwrap(), &h) < 1e-14);
    let singular = DMatrix::zeros(2, 2);
    assert!(gmm_variance(&singular, &h, &WeightMatrix::identity(2)).is_err());
}

#[test]
fn probit_jacobian_matches_finite_differences() {
    let dims = Dimensions::new(vec![10, 10]).unwrap();
    let (sample, _) = generate(&DgpSpec::ProbitDesign(Default::default()), &dims, 3).unwrap();
    let model = MomentModel::new(probit_score_moments(0, 1), ThetaBox::symmetric(2, 10.0)).unwrap();
    let mut r = rng(25);
    for _ in 0..10 {
        let beta = [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)];
        let a = gmm_jhat(&sample, &model, &beta).unwrap();
        let n = gmm_jhat_numeric(&sample, &model, &beta).unwrap();
        assert!(rel(&a, &n) < 1e-5, "{a} vs {n}");
    }
}

#[test]
fn probit_recovers_beta() {
    let dims = Dimensions::new(vec![20, 20]).unwrap();
    let dgp = DgpSpec::ProbitDesign(Default::default());
    let model = MomentModel::new(probit_score_moments(0, 1), ThetaBox::symmetric(2, 10.0)).unwrap();
    let fits: Vec<Vec<f64>> = (0..30)
        .map(|s| {
            let (sample, _) = generate(&dgp, &dims, s).unwrap();
            gmm_fit(&sample, &model, &WeightMatrix::identity(2), &OptimizerConfig::default())
                .unwrap()
                .theta
        })
        .collect();
    for (c, truth) in [0.0, 1.0].into_iter().enumerate() {
        let xs: Vec<f64> = fits.iter().map(|t| t[c]).collect();
        let (mean, sd) = mean_sd(&xs);
        assert!((xs[0] - truth).abs() <= 3.0 * sd);
        assert!((mean - truth).abs() <= 3.0 * sd / (xs.len() as f64).sqrt() + 0.02);
    }
}

fn median_sample(seed: u64, n_units: usize) -> ClusteredSample {
    let mut r = rng(seed);
    let dims = Dimensions::new(vec![3, 2]).unwrap();
    let recs: Vec<_> = (0..n_units)
        .map(|u| (dims.coords(u % 6).0, vec![normal(&mut r) * 2.0 + 1.0]))
        .collect();
    load_sample(&recs, &dims).unwrap()
}

#[test]
fn quantile_iv_with_constants_is_the_median() {
    let sample = median_sample(26, 40);
    let qiv = quantile_iv_moments(0.5, 0, vec![Column::One], vec![Column::One]).unwrap();
    let model = MomentModel::new(qiv, ThetaBox::symmetric(1, 10.0)).unwrap();
    let fit = gmm_fit(&sample, &model, &WeightMatrix::identity(1), &OptimizerConfig::default()).unwrap();
    let med = quantile_estimate(&sample, &EcdfSpec::scalar(0), 0.5).unwrap().theta[0];
    assert!(
        (fit.theta[0] - med).abs() <= 1e-8 * (1.0 + med.abs()),
        "{} vs {med}",
        fit.theta[0]
    );
    assert_eq!(fit.objective_value, 0.0);
    assert!(fit.jhat.is_none() && fit.vhat.is_none());
    assert_eq!(fit.optimizer_trace.method, "grid-refine");
}

#[test]
fn optimizer_audit_grid() {
    let sample = median_sample(27, 31);
    let models = [
        MomentModel::new(
            quantile_iv_moments(0.3, 0, vec![Column::One], vec![Column::One]).unwrap(),
            ThetaBox::symmetric(1, 5.0),
        )
        .unwrap(),
        MomentModel::new(MeanMoment { coordinate: 0 }, ThetaBox::symmetric(1, 5.0)).unwrap(),
    ];
    for model in &models {
        let xi = WeightMatrix::identity(1);
        let fit = gmm_fit(&sample, model, &xi, &OptimizerConfig::default()).unwrap();
        for g in 0..100 {
            let t = -5.0 + 10.0 * g as f64 / 99.0;
            let v = gmm_objective(&sample, model, &xi, &[t]).unwrap();
            assert!(fit.objective_value <= v + 1e-12);
        }
    }
}

#[test]
fn quantile_iv_recovers_slope() {
    // y = θ₀ x + u with u independent of x, median zero, and cluster effects
    let theta0 = 0.7;
    let dims = Dimensions::new(vec![30, 30]).unwrap();
    let qiv = quantile_iv_moments(0.5, 0, vec![Column::Obs(1)], vec![Column::Obs(1)]).unwrap();
    let model = MomentModel::new(qiv, ThetaBox::symmetric(1, 5.0)).unwrap();
    let fits: Vec<f64> = (0..20)
        .map(|s| {
            let mut r = rng(100 + s);
            let a: Vec<f64> = (0..30).map(|_| normal(&mut r)).collect();
            let b: Vec<f64> = (0..30).map(|_| normal(&mut r)).collect();
            let recs: Vec<_> = (0..dims.pi_c())
                .map(|lin| {
                    let j = dims.coords(lin).0;
                    let x = 1.0 + normal(&mut r).abs();
                    let u = a[j[0]] + b[j[1]] + normal(&mut r);
                    (j, vec![theta0 * x + u, x])
                })
                .collect();
            let sample = load_sample(&recs, &dims).unwrap();
            gmm_fit(&sample, &model, &WeightMatrix::identity(1), &OptimizerConfig::default())
                .unwrap()
                .theta[0]
        })
        .collect();
    let (mean, sd) = mean_sd(&fits);
    assert!((fits[0] - theta0).abs() <= 3.0 * sd);
    assert!(
        (mean - theta0).abs() <= 3.0 * sd / (fits.len() as f64).sqrt() + 0.02,
        "{mean} {sd}"
    );
}

#[test]
fn overidentified_fit_is_scale_invariant_and_two_step_runs() {
    let mut r = rng(28);
    let dims = Dimensions::new(vec![8, 6]).unwrap();
    let sample = iv_sample(&mut r, &dims);
    let iv = LinearIv {
        outcome: 0,
        x: vec![Column::One, Column::Obs(1)],
        z: vec![Column::One, Column::Obs(2), Column::Obs(3)],
    };
    let model = MomentModel::new(iv, ThetaBox::symmetric(2, 100.0)).unwrap();
    let xi = WeightMatrix::new(random_spd(&mut r, 3)).unwrap();
    let cfg = OptimizerConfig::default();
    let a = gmm_fit(&sample, &model, &xi, &cfg).unwrap();
    let b = gmm_fit(&sample, &model, &xi.scaled(4.0).unwrap(), &cfg).unwrap();
    for c in 0..2 {
        assert!((a.theta[c] - b.theta[c]).abs() < 1e-8 * (1.0 + a.theta[c].abs()));
    }
    assert!((b.objective_value - 2.0 * a.objective_value).abs() < 1e-8 * b.objective_value);
    let two = gmm_fit_with(&sample, &model, WeightChoice::TwoStep, &cfg).unwrap();
    assert!(two.vhat.is_some());
    assert!(two.optimizer_trace.starts.len() == 5);
}

#[test]
fn weight_matrix_must_be_positive_definite() {
    let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
    assert!(WeightMatrix::new(m).is_err());
}
