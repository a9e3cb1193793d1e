//! Acceptance suite: one PASS/FAIL line per criterion. Runs as a plain binary
//! (`harness = false`) and exits non-zero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use multiway::bootstrap::replicate_weights;
use multiway::estimators::ols_fit;
use multiway::gmm::{gmm_fit, gmm_jhat, gmm_jhat_numeric, Column, MomentSpec};
use multiway::nalgebra::{DMatrix, DVector};
use multiway::rng::{self, StreamRng};
use multiway::simulation::{AdditiveParams, CellSizeLaw, McConfig, McEstimator, McMethod};
use multiway::{
    analytic_asymptotic_variance, load_sample, ols_sandwich, ratio_estimate, run_coverage, variance, Adjustment,
    CellSums, CenteredScores, ClusteredSample, Coordinate, DgpSpec, Dimensions, LinearModelSpec, OptimizerConfig,
    ThetaBox, VarianceKind, WeightMatrix,
};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}

fn rng(tag: u64) -> StreamRng {
    rng::stream(20_240_601, &[tag])
}

fn normal(r: &mut StreamRng) -> f64 {
    StandardNormal.sample(r)
}

fn random_dims(r: &mut StreamRng, k: usize, max_cells: usize) -> Dimensions {
    loop {
        let c: Vec<usize> = (0..k).map(|_| r.random_range(2..=8)).collect();
        if c.iter().product::<usize>() <= max_cells {
            return Dimensions::new(c).unwrap();
        }
    }
}

fn random_scores(r: &mut StreamRng, dims: &Dimensions, m: usize) -> CenteredScores {
    let vals = (0..dims.pi_c() * m).map(|_| normal(r)).collect();
    CenteredScores::new(CellSums::new(dims.clone(), m, vals).unwrap())
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// `Σ D_j D_j'` over ordered cell pairs whose agreement pattern satisfies `keep`,
/// and the number of such pairs.
fn pair_sum(sums: &CellSums, keep: impl Fn(&[bool]) -> bool) -> (DMatrix<f64>, usize) {
    let dims = sums.dims();
    let m = sums.out_dim();
    let mut acc = DMatrix::zeros(m, m);
    let mut n = 0;
    for a in 0..dims.pi_c() {
        let ja = dims.coords(a).0;
        for b in 0..dims.pi_c() {
            let jb = dims.coords(b).0;
            let agree: Vec<bool> = ja.iter().zip(&jb).map(|(x, y)| x == y).collect();
            if keep(&agree) {
                let da = DVector::from_column_slice(sums.get(a));
                let db = DVector::from_column_slice(sums.get(b));
                acc += da * db.transpose();
                n += 1;
            }
        }
    }
    (acc, n)
}

fn scale(dims: &Dimensions) -> f64 {
    dims.c_min() as f64 / (dims.pi_c() as f64).powi(2)
}

fn oracle_v1(s: &CellSums) -> DMatrix<f64> {
    let k = s.dims().k();
    (0..k)
        .map(|i| pair_sum(s, |a| a[i]).0)
        .fold(DMatrix::zeros(s.out_dim(), s.out_dim()), |x, y| x + y)
        * scale(s.dims())
}

fn oracle_v2(s: &CellSums) -> DMatrix<f64> {
    let dims = s.dims();
    let mut v = DMatrix::zeros(s.out_dim(), s.out_dim());
    for i in 0..dims.k() {
        let (p, n) = pair_sum(s, |a| a.iter().enumerate().all(|(t, &x)| x == (t == i)));
        v += p * (dims.c_min() as f64 / dims.count(i) as f64 / n as f64);
    }
    v
}

fn oracle_cgm(s: &CellSums) -> DMatrix<f64> {
    pair_sum(s, |a| a.iter().any(|&x| x)).0 * scale(s.dims())
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let k = 1 + case % 3;
        let m = 1 + (case / 3) % 3;
        let dims = random_dims(&mut r, k, 64);
        let s = random_scores(&mut r, &dims, m);
        let pairs = [
            (VarianceKind::V1, oracle_v1(s.sums())),
            (VarianceKind::V2, oracle_v2(s.sums())),
            (VarianceKind::Cgm, oracle_cgm(s.sums())),
        ];
        for (kind, oracle) in pairs {
            let got = variance(&s, kind, Adjustment::Unit).unwrap().matrix;
            worst = worst.max(rel(&got, &oracle));
        }
    }
    let t = t0.elapsed();
    outcome(
        worst <= 1e-12 && t < Duration::from_secs(10),
        format!("200 instances, max rel err {worst:.2e}, {}", secs(t)),
    )
}

fn criterion_2() -> Outcome {
    let mut r = rng(2);
    let mut worst2: f64 = 0.0;
    for case in 0..100 {
        let dims = random_dims(&mut r, 2, 64);
        let s = random_scores(&mut r, &dims, 1 + case % 3);
        let v1 = variance(&s, VarianceKind::V1, Adjustment::Unit).unwrap().matrix;
        let cgm = variance(&s, VarianceKind::Cgm, Adjustment::Unit).unwrap().matrix;
        let same_cell = pair_sum(s.sums(), |a| a.iter().all(|&x| x)).0 * scale(&dims);
        worst2 = worst2.max(rel(&(cgm + same_cell), &v1));
    }
    let mut worst3: f64 = 0.0;
    for case in 0..100 {
        let dims = if case == 0 {
            Dimensions::new(vec![2, 2, 2]).unwrap()
        } else {
            random_dims(&mut r, 3, 64)
        };
        let s = random_scores(&mut r, &dims, 1 + case % 3);
        let pi2 = (dims.pi_c() as f64).powi(2);
        let c = dims.c_min() as f64;
        let sigma = |u: &[usize]| pair_sum(s.sums(), |a| u.iter().all(|&i| a[i])).0 / pi2;
        let v1 = variance(&s, VarianceKind::V1, Adjustment::Unit).unwrap().matrix;
        let expansion = &v1 - (sigma(&[0, 1]) + sigma(&[1, 2]) + sigma(&[0, 2])) * c + sigma(&[0, 1, 2]) * c;
        let cgm = variance(&s, VarianceKind::Cgm, Adjustment::Unit).unwrap().matrix;
        worst3 = worst3.max(rel(&cgm, &expansion));
    }
    outcome(
        worst2 <= 1e-12 && worst3 <= 1e-12,
        format!("k=2 max rel err {worst2:.2e}, k=3 max rel err {worst3:.2e}"),
    )
}

fn criterion_3() -> Outcome {
    let mut r = rng(3);
    let mut worst: f64 = f64::INFINITY;
    for case in 0..1000 {
        let dims = random_dims(&mut r, 1 + case % 3, 64);
        let s = random_scores(&mut r, &dims, 1 + case % 3);
        let v = variance(&s, VarianceKind::V1, Adjustment::Unit).unwrap();
        worst = worst.min(v.min_eigenvalue() / v.trace());
    }
    // Scores with opposite signs across each row and column.
    let dims = Dimensions::new(vec![2, 2]).unwrap();
    let s = CenteredScores::new(CellSums::scalar(dims, vec![1.0, -1.0, -1.0, 1.0]).unwrap());
    let v2 = variance(&s, VarianceKind::V2, Adjustment::Unit).unwrap();
    let neg = v2.min_eigenvalue();
    outcome(
        worst >= -1e-10 && neg < 0.0,
        format!("min eig/trace of V1 over 1000 instances {worst:.2e}; constructed V2 eigenvalue {neg}"),
    )
}

fn criterion_4() -> Outcome {
    let t0 = Instant::now();
    let dims = Dimensions::new(vec![5, 7]).unwrap();
    let n = 200_000u64;
    let mut totals_ok = true;
    let mut s1: Vec<Vec<f64>> = dims.counts().iter().map(|&c| vec![0.0; c]).collect();
    let mut s2: Vec<Vec<f64>> = dims.counts().iter().map(|&c| vec![0.0; c]).collect();
    let mut p1: Vec<Vec<f64>> = dims.counts().iter().map(|&c| vec![0.0; c * c]).collect();
    let mut p2: Vec<Vec<f64>> = dims.counts().iter().map(|&c| vec![0.0; c * c]).collect();
    for b in 0..n {
        let w = replicate_weights(&dims, 4, b);
        totals_ok &= w.cell_weights().iter().sum::<u64>() == dims.pi_c() as u64;
        for (i, counts) in w.per_dim_counts().iter().enumerate() {
            let c = counts.len();
            for j in 0..c {
                let x = counts[j] as f64;
                s1[i][j] += x;
                s2[i][j] += x * x;
                for jp in 0..c {
                    let y = x * counts[jp] as f64;
                    p1[i][j * c + jp] += y;
                    p2[i][j * c + jp] += y * y;
                }
            }
        }
    }
    let nf = n as f64;
    let z = |sum: f64, sq: f64, target: f64| {
        let mean = sum / nf;
        let var = (sq / nf - mean * mean) * nf / (nf - 1.0);
        (mean - target).abs() / (var / nf).sqrt()
    };
    let mut worst: f64 = 0.0;
    for (i, &c) in dims.counts().iter().enumerate() {
        for j in 0..c {
            worst = worst.max(z(s1[i][j], s2[i][j], 1.0));
            for jp in 0..c {
                let target = f64::from(u8::from(j == jp)) + 1.0 - 1.0 / c as f64;
                worst = worst.max(z(p1[i][j * c + jp], p2[i][j * c + jp], target));
            }
        }
    }
    let t = t0.elapsed();
    outcome(
        totals_ok && worst <= 3.0 && t < Duration::from_secs(30),
        format!(
            "totals exact: {totals_ok}, max |z| {worst:.2} over first and second moments, {}",
            secs(t)
        ),
    )
}

fn additive_unit(n_units: usize) -> DgpSpec {
    let mut p = AdditiveParams::unit_variance(2);
    p.cell_size = CellSizeLaw::Fixed { n: n_units };
    DgpSpec::AdditiveEffects(p)
}

fn mc_config(dims: &[usize], estimator: McEstimator, reps: usize, b: usize, methods: Vec<McMethod>) -> McConfig {
    McConfig {
        dgp: additive_unit(1),
        dims: Dimensions::new(dims.to_vec()).unwrap(),
        estimator,
        replications: reps,
        bootstrap_b: b,
        alpha: 0.05,
        methods,
        adjustment: Adjustment::Unit,
        seed: 2024,
    }
}

fn criterion_5() -> Outcome {
    let t0 = Instant::now();
    let cfg = mc_config(&[100, 100], McEstimator::Mean, 200, 0, vec![McMethod::WaldV1]);
    let target = analytic_asymptotic_variance(&cfg.dgp, &cfg.dims).unwrap()[(0, 0)];
    let report = run_coverage(&cfg).unwrap();
    let med = report.median_vhat1.unwrap();
    let dev = (med / target - 1.0).abs();
    let t = t0.elapsed();
    outcome(
        dev <= 0.10 && t < Duration::from_secs(60),
        format!(
            "median V1 {med:.4} vs {target:.4} ({:.1}% off), {}",
            dev * 100.0,
            secs(t)
        ),
    )
}

fn criterion_6() -> Outcome {
    let t0 = Instant::now();
    let cfg = mc_config(
        &[20, 20],
        McEstimator::Mean,
        2000,
        500,
        vec![McMethod::WaldV1, McMethod::BootSymAbs],
    );
    let report = run_coverage(&cfg).unwrap();
    let cov: Vec<(String, f64)> = report
        .methods
        .iter()
        .map(|m| (m.method.name().to_string(), m.coverage))
        .collect();
    let pass = cov.iter().all(|(_, c)| (0.925..=0.975).contains(c));
    let detail = cov
        .iter()
        .map(|(n, c)| format!("{n} {c:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, format!("{detail}, {}", secs(t0.elapsed())))
}

fn random_regression(r: &mut StreamRng, dims: &Dimensions, p: usize) -> ClusteredSample {
    let mut recs = Vec::new();
    for lin in 0..dims.pi_c() {
        let n = r.random_range(1..=3);
        for _ in 0..n {
            let x: Vec<f64> = (0..p).map(|_| normal(r)).collect();
            let y = x.iter().sum::<f64>() + normal(r) * (1.0 + x[0].abs());
            let mut obs = vec![y];
            obs.extend(x);
            recs.push((dims.coords(lin).0, obs));
        }
    }
    load_sample(&recs, dims).unwrap()
}

/// Units as (cell, x with intercept, y).
fn design(sample: &ClusteredSample, p: usize) -> Vec<(usize, DVector<f64>, f64)> {
    sample
        .units()
        .map(|(lin, y)| {
            let mut x = vec![1.0];
            x.extend_from_slice(&y[1..=p]);
            (lin, DVector::from_vec(x), y[0])
        })
        .collect()
}

fn direct_ols(units: &[(usize, DVector<f64>, f64)]) -> (DMatrix<f64>, DVector<f64>) {
    let q = units[0].1.len();
    let mut xx = DMatrix::zeros(q, q);
    let mut xy = DVector::zeros(q);
    for (_, x, y) in units {
        xx += x * x.transpose();
        xy += x * *y;
    }
    let beta = xx.clone().try_inverse().unwrap() * xy;
    (xx, beta)
}

fn criterion_7() -> Outcome {
    let mut r = rng(7);
    let p = 2;
    let spec = LinearModelSpec {
        outcome_index: 0,
        regressor_indices: (1..=p).collect(),
        intercept: true,
    };
    let mut worst1: f64 = 0.0;
    for _ in 0..20 {
        let dims = Dimensions::new(vec![r.random_range(5..=15)]).unwrap();
        let sample = random_regression(&mut r, &dims, p);
        let units = design(&sample, p);
        let (xx, beta) = direct_ols(&units);
        let bread = xx.try_inverse().unwrap();
        let mut meat = DMatrix::zeros(p + 1, p + 1);
        for g in 0..dims.pi_c() {
            let mut s = DVector::zeros(p + 1);
            for (_, x, y) in units.iter().filter(|u| u.0 == g) {
                s += x * (y - x.dot(&beta));
            }
            meat += &s * s.transpose();
        }
        let crve = &bread * meat * &bread;
        let fit = ols_fit(&sample, &spec).unwrap();
        let v = ols_sandwich(&fit, VarianceKind::V1, Adjustment::Unit).unwrap().matrix / dims.c_min() as f64;
        worst1 = worst1.max(rel(&v, &crve));
    }
    let mut worst2: f64 = 0.0;
    for _ in 0..20 {
        let dims = random_dims(&mut r, 2, 40);
        let sample = random_regression(&mut r, &dims, p);
        let units = design(&sample, p);
        let (xx, beta) = direct_ols(&units);
        let pi = dims.pi_c() as f64;
        let j_inv = (xx / pi).try_inverse().unwrap();
        let mut d = vec![0.0; dims.pi_c() * (p + 1)];
        for (lin, x, y) in &units {
            let s = x * (y - x.dot(&beta));
            for c in 0..=p {
                d[lin * (p + 1) + c] += s[c];
            }
        }
        let sums = CellSums::new(dims.clone(), p + 1, d).unwrap();
        let fit = ols_fit(&sample, &spec).unwrap();
        for (kind, h) in [
            (VarianceKind::V1, oracle_v1(&sums)),
            (VarianceKind::V2, oracle_v2(&sums)),
            (VarianceKind::Cgm, oracle_cgm(&sums)),
        ] {
            let oracle = &j_inv * h * &j_inv;
            let got = ols_sandwich(&fit, kind, Adjustment::Unit).unwrap().matrix;
            worst2 = worst2.max(rel(&got, &oracle));
        }
    }
    outcome(
        worst1 <= 1e-10 && worst2 <= 1e-10,
        format!("one-way CRVE max rel err {worst1:.2e}, two-way sandwich max rel err {worst2:.2e}"),
    )
}

fn criterion_8() -> Outcome {
    let mut r = rng(8);
    let dims = Dimensions::new(vec![6, 5]).unwrap();
    let mut recs = Vec::new();
    for lin in 0..dims.pi_c() {
        for _ in 0..r.random_range(1..=4) {
            let z = normal(&mut r);
            let u = normal(&mut r);
            let x = 0.8 * z + 0.5 * u + 0.3 * normal(&mut r);
            let y = 1.0 - 0.5 * x + u;
            let b = f64::from(u8::from(0.2 + 0.7 * z + normal(&mut r) > 0.0));
            recs.push((dims.coords(lin).0, vec![y, x, z, b]));
        }
    }
    let sample = load_sample(&recs, &dims).unwrap();
    let cfg = OptimizerConfig::default();

    let mean = MomentSpec::Mean { coordinate: 0 }
        .build(ThetaBox::symmetric(1, 50.0))
        .unwrap();
    let g = gmm_fit(&sample, &mean, &WeightMatrix::identity(1), &cfg).unwrap();
    let ratio = ratio_estimate(&sample, &Coordinate(0)).unwrap().theta[0];
    let err_mean = (g.theta[0] - ratio).abs() / ratio.abs().max(1.0);

    let iv = MomentSpec::LinearIv {
        outcome: 0,
        x: vec![Column::One, Column::Obs(1)],
        z: vec![Column::One, Column::Obs(2)],
    }
    .build(ThetaBox::symmetric(2, 50.0))
    .unwrap();
    let g = gmm_fit(&sample, &iv, &WeightMatrix::identity(2), &cfg).unwrap();
    let mut zx = DMatrix::zeros(2, 2);
    let mut zy = DVector::zeros(2);
    for (_, o) in sample.units() {
        let x = DVector::from_vec(vec![1.0, o[1]]);
        let z = DVector::from_vec(vec![1.0, o[2]]);
        zx += &z * x.transpose();
        zy += z * o[0];
    }
    let tsls = zx.try_inverse().unwrap() * zy;
    let err_iv = (DVector::from_vec(g.theta.clone()) - &tsls).norm() / tsls.norm();

    let probit = MomentSpec::Probit { outcome: 3, x: 2 }
        .build(ThetaBox::symmetric(2, 5.0))
        .unwrap();
    let mut err_j: f64 = 0.0;
    for theta in [[0.0, 0.0], [0.2, 0.7], [-1.0, 1.5], [0.5, -2.0]] {
        let a = gmm_jhat(&sample, &probit, &theta).unwrap();
        let n = gmm_jhat_numeric(&sample, &probit, &theta).unwrap();
        err_j = err_j.max(rel(&n, &a));
    }
    outcome(
        err_mean <= 1e-8 && err_iv <= 1e-8 && err_j <= 1e-5,
        format!(
            "mean vs ratio {err_mean:.2e}, IV vs 2SLS {err_iv:.2e}, probit Jacobian analytic vs numeric {err_j:.2e}"
        ),
    )
}

fn criterion_9() -> Outcome {
    let t0 = Instant::now();
    let cfg = mc_config(&[30, 30], McEstimator::Median, 200, 300, vec![McMethod::BootSymAbs]);
    let report = run_coverage(&cfg).unwrap();
    let se = report.mean_bootstrap_se.unwrap();
    let ratio = se / report.theta_sd;
    outcome(
        (0.8..=1.25).contains(&ratio),
        format!(
            "mean bootstrap SE {se:.4}, MC SD {:.4}, ratio {ratio:.3}, {}",
            report.theta_sd,
            secs(t0.elapsed())
        ),
    )
}

fn run(bin: &Path, dir: &Path, workers: usize, args: &[&str]) {
    let out = Command::new(bin)
        .current_dir(dir)
        .args(["--workers", &workers.to_string(), "--seed", "11"])
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(dir: &Path, names: &[&str]) -> Vec<Vec<u8>> {
    names.iter().map(|n| std::fs::read(dir.join(n)).unwrap()).collect()
}

fn criterion_10() -> Outcome {
    let bin = Path::new(env!("CARGO_BIN_EXE_multiway"));
    let tmp = tempfile::tempdir().unwrap();
    let gmm = r#"{"model":{"family":"linear_iv","outcome":1,"x":["const",1],"z":["const",1]}}"#;
    let mc = r#"{"dgp":{"variant":"additive_effects","sigma":[1,1]},"dims":[8,8],"replications":40,
        "bootstrap_b":40,"methods":["wald-v1","wald-v2","wald-cgm","boot-symabs","boot-percentile"]}"#;
    let mut outputs = Vec::new();
    for workers in [1, 8] {
        let dir = tmp.path().join(format!("w{workers}"));
        std::fs::create_dir(&dir).unwrap();
        std::fs::write(dir.join("gmm.json"), gmm).unwrap();
        std::fs::write(dir.join("mc.json"), mc).unwrap();
        run(
            bin,
            &dir,
            workers,
            &["simulate", "--dims", "12,9", "--poisson-mu", "2", "-o", "d.csv"],
        );
        run(
            bin,
            &dir,
            workers,
            &["estimate", "-i", "d.csv", "--variance", "v1,v2,cgm", "-o", "est.json"],
        );
        run(
            bin,
            &dir,
            workers,
            &[
                "estimate",
                "-i",
                "d.csv",
                "--estimator",
                "gmm",
                "--gmm-config",
                "gmm.json",
                "-o",
                "gmm.json.out",
            ],
        );
        run(
            bin,
            &dir,
            workers,
            &[
                "bootstrap",
                "-i",
                "d.csv",
                "--estimator",
                "quantile",
                "-B",
                "99",
                "-o",
                "bs",
            ],
        );
        run(bin, &dir, workers, &["mc", "--config", "mc.json", "-o", "mc"]);
        outputs.push(read(
            &dir,
            &[
                "d.csv",
                "d.truth.json",
                "est.json",
                "gmm.json.out",
                "bs.replicates.csv",
                "bs.ci.json",
                "mc.json",
                "mc.csv",
            ],
        ));
    }
    let same = outputs[0] == outputs[1];
    outcome(
        same,
        "simulate, estimate, bootstrap and mc outputs compared at 1 and 8 workers",
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("pair-sum oracle equivalence", criterion_1),
        ("two-way and three-way identities", criterion_2),
        ("V1 positive semidefinite, V2 can be indefinite", criterion_3),
        ("pigeonhole weight laws", criterion_4),
        ("consistency of V1", criterion_5),
        ("coverage of wald-v1 and boot-symabs", criterion_6),
        ("OLS sandwich", criterion_7),
        ("GMM reductions", criterion_8),
        ("quantile bootstrap SE", criterion_9),
        ("determinism across worker counts", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let o = f();
        failed += usize::from(!o.pass);
        println!(
            "criterion {:>2} {}: {} ({})",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            name,
            o.detail
        );
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
