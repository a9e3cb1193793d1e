#![allow(dead_code)]

use multiway::nalgebra::DMatrix;
use multiway::rng::{self, StreamRng};
use multiway::{CellSums, CenteredScores, Dimensions};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> StreamRng {
    rng::stream(seed, &[0xfeed])
}

pub fn normal(r: &mut StreamRng) -> f64 {
    StandardNormal.sample(r)
}

/// Random design with `k` dimensions, every `C_i ≥ min_c` and `Π_C ≤ max_cells`.
pub fn random_dims(r: &mut StreamRng, k: usize, min_c: usize, max_cells: usize) -> Dimensions {
    loop {
        let c: Vec<usize> = (0..k).map(|_| r.random_range(min_c..=min_c + 4)).collect();
        if c.iter().product::<usize>() <= max_cells {
            return Dimensions::new(c).unwrap();
        }
    }
}

pub fn random_scores(r: &mut StreamRng, dims: &Dimensions, m: usize) -> CenteredScores {
    let vals = (0..dims.pi_c() * m).map(|_| normal(r)).collect();
    CenteredScores::new(CellSums::new(dims.clone(), m, vals).unwrap())
}

pub fn outer(a: &[f64], b: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |r, c| a[r] * b[c])
}

/// Sum of `D_j D_j'` over ordered cell pairs selected by `keep(shared)`, where
/// `shared[i]` says whether the pair agrees in dimension `i`. Also returns the
/// number of selected pairs.
pub fn pair_sum(sums: &CellSums, keep: impl Fn(&[bool]) -> bool) -> (DMatrix<f64>, usize) {
    let dims = sums.dims();
    let m = sums.out_dim();
    let mut acc = DMatrix::zeros(m, m);
    let mut count = 0;
    for a in 0..dims.pi_c() {
        let ja = dims.coords(a);
        for b in 0..dims.pi_c() {
            let jb = dims.coords(b);
            let shared: Vec<bool> = ja.0.iter().zip(&jb.0).map(|(x, y)| x == y).collect();
            if keep(&shared) {
                acc += outer(sums.get(a), sums.get(b));
                count += 1;
            }
        }
    }
    (acc, count)
}

fn scale(dims: &Dimensions) -> f64 {
    let pi = dims.pi_c() as f64;
    dims.c_min() as f64 / (pi * pi)
}

/// `C̲/Π_C² Σ_i Σ_{j_i = j'_i} D_j D_j'`.
pub fn oracle_v1(sums: &CellSums) -> DMatrix<f64> {
    let dims = sums.dims();
    let mut v = DMatrix::zeros(sums.out_dim(), sums.out_dim());
    for i in 0..dims.k() {
        v += pair_sum(sums, |s| s[i]).0;
    }
    v * scale(dims)
}

/// `Σ_i (C̲/C_i) · mean of D_j D_j'` over pairs sharing exactly cluster `i`.
pub fn oracle_v2(sums: &CellSums) -> DMatrix<f64> {
    let dims = sums.dims();
    let mut v = DMatrix::zeros(sums.out_dim(), sums.out_dim());
    for i in 0..dims.k() {
        let (s, n) = pair_sum(sums, |sh| sh.iter().enumerate().all(|(t, &b)| b == (t == i)));
        v += s * (dims.c_min() as f64 / dims.count(i) as f64 / n as f64);
    }
    v
}

/// `C̲/Π_C² Σ` over pairs sharing at least one cluster.
pub fn oracle_cgm(sums: &CellSums) -> DMatrix<f64> {
    pair_sum(sums, |s| s.iter().any(|&b| b)).0 * scale(sums.dims())
}

pub fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1e-300)
}
