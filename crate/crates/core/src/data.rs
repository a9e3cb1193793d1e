//! Multiway-clustered samples and the aggregation primitives every estimator
//! builds on.
//!
//! Cells are stored densely in lexicographic order (last dimension varies
//! fastest). Coordinates are 0-based in the Rust API; the file formats in
//! [`crate::io`] use 1-based cluster labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cluster counts `C = (C_1, ..., C_k)` of a k-way design.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Dimensions {
    counts: Vec<usize>,
    strides: Vec<usize>,
    pi_c: usize,
}

impl Dimensions {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Argument("at least one clustering dimension is required".into()));
        }
        if let Some(i) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Argument(format!("dimension {} has zero clusters", i + 1)));
        }
        let mut strides = vec![1usize; counts.len()];
        for i in (0..counts.len() - 1).rev() {
            strides[i] = strides[i + 1]
                .checked_mul(counts[i + 1])
                .ok_or_else(|| Error::Argument("number of cells overflows usize".into()))?;
        }
        let pi_c = strides[0]
            .checked_mul(counts[0])
            .ok_or_else(|| Error::Argument("number of cells overflows usize".into()))?;
        Ok(Self { counts, strides, pi_c })
    }

    /// Number of clustering dimensions.
    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn count(&self, dim: usize) -> usize {
        self.counts[dim]
    }

    /// Total number of cells, `Π_C`.
    pub fn pi_c(&self) -> usize {
        self.pi_c
    }

    /// Smallest cluster count, `C̲`.
    pub fn c_min(&self) -> usize {
        *self.counts.iter().min().expect("k >= 1")
    }

    /// Plug-in weights `C̲ / C_i`.
    pub fn lambda_hats(&self) -> Vec<f64> {
        let c_min = self.c_min() as f64;
        self.counts.iter().map(|&c| c_min / c as f64).collect()
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        if dim >= self.k() {
            return Err(Error::Index(format!(
                "dimension {} out of range for k = {}",
                dim,
                self.k()
            )));
        }
        Ok(())
    }

    /// Lexicographic position of a cell.
    pub fn linear(&self, coords: &[usize]) -> Result<usize> {
        if coords.len() != self.k() {
            return Err(Error::Shape(format!(
                "cell index has {} coordinates, expected {}",
                coords.len(),
                self.k()
            )));
        }
        let mut lin = 0;
        for (i, (&c, &n)) in coords.iter().zip(&self.counts).enumerate() {
            if c >= n {
                return Err(Error::Index(format!(
                    "coordinate {} of dimension {} exceeds {} clusters",
                    c + 1,
                    i + 1,
                    n
                )));
            }
            lin += c * self.strides[i];
        }
        Ok(lin)
    }

    pub fn coords(&self, mut lin: usize) -> CellIndex {
        let mut out = vec![0; self.k()];
        for (i, &s) in self.strides.iter().enumerate() {
            out[i] = lin / s;
            lin %= s;
        }
        CellIndex(out)
    }

    /// All cells in lexicographic order.
    pub fn cells(&self) -> impl Iterator<Item = CellIndex> + '_ {
        (0..self.pi_c).map(|lin| self.coords(lin))
    }
}

impl TryFrom<Vec<usize>> for Dimensions {
    type Error = Error;

    fn try_from(counts: Vec<usize>) -> Result<Self> {
        Self::new(counts)
    }
}

impl From<Dimensions> for Vec<usize> {
    fn from(d: Dimensions) -> Self {
        d.counts
    }
}

/// 0-based cell coordinates `(j_1, ..., j_k)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellIndex(pub Vec<usize>);

impl CellIndex {
    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// Unit-level observations grouped into the `Π_C` cells of a design.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredSample {
    dims: Dimensions,
    obs_dim: usize,
    offsets: Vec<usize>,
    data: Vec<f64>,
}

impl ClusteredSample {
    /// Builds a sample from per-cell flat buffers (each a concatenation of
    /// `obs_dim`-long observation vectors), given in lexicographic cell order.
    pub fn from_cells(dims: Dimensions, obs_dim: usize, cells: Vec<Vec<f64>>) -> Result<Self> {
        if cells.len() != dims.pi_c() {
            return Err(Error::Shape(format!(
                "{} cell buffers supplied for {} cells",
                cells.len(),
                dims.pi_c()
            )));
        }
        if obs_dim == 0 {
            return Err(Error::Shape("observation dimension must be positive".into()));
        }
        let mut offsets = Vec::with_capacity(cells.len() + 1);
        offsets.push(0);
        let total: usize = cells.iter().map(Vec::len).sum();
        let mut data = Vec::with_capacity(total);
        for (lin, cell) in cells.into_iter().enumerate() {
            if cell.len() % obs_dim != 0 {
                return Err(Error::Shape(format!(
                    "cell {} buffer length {} is not a multiple of {}",
                    lin,
                    cell.len(),
                    obs_dim
                )));
            }
            data.extend(cell);
            offsets.push(data.len() / obs_dim);
        }
        Ok(Self {
            dims,
            obs_dim,
            offsets,
            data,
        })
    }

    pub fn dims(&self) -> &Dimensions {
        &self.dims
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    /// `N_j` for the cell at lexicographic position `lin`.
    pub fn cell_size(&self, lin: usize) -> usize {
        self.offsets[lin + 1] - self.offsets[lin]
    }

    pub fn cell_sizes(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn total_units(&self) -> usize {
        *self.offsets.last().expect("offsets non-empty")
    }

    /// Observations of one cell, in input order.
    pub fn cell(&self, lin: usize) -> std::slice::ChunksExact<'_, f64> {
        let d = self.obs_dim;
        self.data[self.offsets[lin] * d..self.offsets[lin + 1] * d].chunks_exact(d)
    }

    /// Every unit as `(cell position, observation)`, cells in lexicographic order.
    pub fn units(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        (0..self.dims.pi_c()).flat_map(move |lin| self.cell(lin).map(move |y| (lin, y)))
    }
}

/// Places unit records `(coordinates, observation)` into a dense sample.
pub fn load_sample(records: &[(Vec<usize>, Vec<f64>)], dims: &Dimensions) -> Result<ClusteredSample> {
    load_sample_with_dim(records, dims, None)
}

/// Like [`load_sample`], with an explicit observation dimension so that empty
/// inputs still produce a sample of known width.
pub fn load_sample_with_dim(
    records: &[(Vec<usize>, Vec<f64>)],
    dims: &Dimensions,
    obs_dim: Option<usize>,
) -> Result<ClusteredSample> {
    let d = match (obs_dim, records.first()) {
        (Some(d), _) => d,
        (None, Some((_, y))) => y.len(),
        (None, None) => 1,
    };
    let mut cells = vec![Vec::new(); dims.pi_c()];
    for (coords, y) in records {
        if y.len() != d {
            return Err(Error::Shape(format!(
                "observation of length {} where {} was expected",
                y.len(),
                d
            )));
        }
        let lin = dims.linear(coords)?;
        cells[lin].extend_from_slice(y);
    }
    ClusteredSample::from_cells(dims.clone(), d, cells)
}

/// A unit-level statistic `f: R^d -> R^m`, optionally depending on the cell size.
pub trait CellStatistic: Sync {
    fn out_dim(&self) -> usize;

    /// Verifies that the statistic accepts observations of length `obs_dim`.
    fn check_input(&self, _obs_dim: usize) -> Result<()> {
        Ok(())
    }

    fn eval(&self, y: &[f64], cell_size: usize, out: &mut [f64]) -> Result<()>;
}

/// `f(y) = y`.
#[derive(Debug, Clone, Copy)]
pub struct Identity {
    pub dim: usize,
}

impl CellStatistic for Identity {
    fn out_dim(&self) -> usize {
        self.dim
    }

    fn check_input(&self, obs_dim: usize) -> Result<()> {
        if obs_dim != self.dim {
            return Err(Error::Shape(format!(
                "identity statistic of width {} applied to observations of width {}",
                self.dim, obs_dim
            )));
        }
        Ok(())
    }

    fn eval(&self, y: &[f64], _: usize, out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(y);
        Ok(())
    }
}

/// `f(y) = 1`; its cell sums are the cell sizes.
#[derive(Debug, Clone, Copy)]
pub struct Count;

impl CellStatistic for Count {
    fn out_dim(&self) -> usize {
        1
    }

    fn eval(&self, _: &[f64], _: usize, out: &mut [f64]) -> Result<()> {
        out[0] = 1.0;
        Ok(())
    }
}

/// `f(y) = y_r` for a single coordinate `r`.
#[derive(Debug, Clone, Copy)]
pub struct Coordinate(pub usize);

impl CellStatistic for Coordinate {
    fn out_dim(&self) -> usize {
        1
    }

    fn check_input(&self, obs_dim: usize) -> Result<()> {
        if self.0 >= obs_dim {
            return Err(Error::Index(format!(
                "coordinate {} out of range for observations of width {}",
                self.0, obs_dim
            )));
        }
        Ok(())
    }

    fn eval(&self, y: &[f64], _: usize, out: &mut [f64]) -> Result<()> {
        out[0] = y[self.0];
        Ok(())
    }
}

/// Wraps a closure returning a vector; the declared width is checked on every call.
pub struct FnStatistic<F> {
    out_dim: usize,
    f: F,
}

impl<F> FnStatistic<F>
where
    F: Fn(&[f64], usize) -> Vec<f64> + Sync,
{
    pub fn new(out_dim: usize, f: F) -> Self {
        Self { out_dim, f }
    }
}

impl<F> CellStatistic for FnStatistic<F>
where
    F: Fn(&[f64], usize) -> Vec<f64> + Sync,
{
    fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn eval(&self, y: &[f64], cell_size: usize, out: &mut [f64]) -> Result<()> {
        let v = (self.f)(y, cell_size);
        if v.len() != self.out_dim {
            return Err(Error::Shape(format!(
                "statistic returned {} values, declared {}",
                v.len(),
                self.out_dim
            )));
        }
        out.copy_from_slice(&v);
        Ok(())
    }
}

/// Per-cell vector sums `S_j`, dense over all cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSums {
    dims: Dimensions,
    out_dim: usize,
    values: Vec<f64>,
}

impl CellSums {
    pub fn new(dims: Dimensions, out_dim: usize, values: Vec<f64>) -> Result<Self> {
        if out_dim == 0 || values.len() != dims.pi_c() * out_dim {
            return Err(Error::Shape(format!(
                "{} values for {} cells of width {}",
                values.len(),
                dims.pi_c(),
                out_dim
            )));
        }
        Ok(Self { dims, out_dim, values })
    }

    /// Scalar per-cell values.
    pub fn scalar(dims: Dimensions, values: Vec<f64>) -> Result<Self> {
        Self::new(dims, 1, values)
    }

    pub fn zeros(dims: Dimensions, out_dim: usize) -> Self {
        let n = dims.pi_c() * out_dim;
        Self {
            dims,
            out_dim,
            values: vec![0.0; n],
        }
    }

    pub fn dims(&self) -> &Dimensions {
        &self.dims
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn get(&self, lin: usize) -> &[f64] {
        &self.values[lin * self.out_dim..(lin + 1) * self.out_dim]
    }

    pub fn get_mut(&mut self, lin: usize) -> &mut [f64] {
        &mut self.values[lin * self.out_dim..(lin + 1) * self.out_dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.out_dim)
    }

    /// `Σ_j S_j`, accumulated in lexicographic order.
    pub fn total(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.out_dim];
        for s in self.iter() {
            for (a, v) in acc.iter_mut().zip(s) {
                *a += v;
            }
        }
        acc
    }

    /// Applies `g` to every cell vector, producing sums of the same shape.
    pub fn map_cells(&self, mut g: impl FnMut(usize, &[f64], &mut [f64])) -> CellSums {
        let mut out = CellSums::zeros(self.dims.clone(), self.out_dim);
        for lin in 0..self.dims.pi_c() {
            g(lin, self.get(lin), out.get_mut(lin));
        }
        out
    }
}

/// `S_j = Σ_ℓ f(Y_{ℓ,j})`; empty cells give the zero vector.
pub fn cell_sums(sample: &ClusteredSample, f: &dyn CellStatistic) -> Result<CellSums> {
    f.check_input(sample.obs_dim())?;
    let m = f.out_dim();
    let mut out = CellSums::zeros(sample.dims().clone(), m);
    let mut buf = vec![0.0; m];
    for lin in 0..sample.dims().pi_c() {
        let n = sample.cell_size(lin);
        let acc = out.get_mut(lin);
        for y in sample.cell(lin) {
            f.eval(y, n, &mut buf)?;
            for (a, v) in acc.iter_mut().zip(&buf) {
                *a += v;
            }
        }
    }
    Ok(out)
}

/// Sums of `S_j` over cells sharing clusters on a subset of dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginSums {
    subset: Vec<usize>,
    shape: Vec<usize>,
    out_dim: usize,
    values: Vec<f64>,
}

impl MarginSums {
    /// Conditioning dimensions, sorted ascending.
    pub fn subset(&self) -> &[usize] {
        &self.subset
    }

    /// Cluster counts of the conditioning dimensions.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.out_dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Margin vector for a joint cluster tuple on the subset (0-based, lexicographic).
    pub fn get(&self, tuple: &[usize]) -> Result<&[f64]> {
        if tuple.len() != self.shape.len() {
            return Err(Error::Shape(format!(
                "tuple of length {} for a {}-dimensional margin",
                tuple.len(),
                self.shape.len()
            )));
        }
        let mut lin = 0;
        for (&t, &n) in tuple.iter().zip(&self.shape) {
            if t >= n {
                return Err(Error::Index(format!("cluster {} out of {}", t + 1, n)));
            }
            lin = lin * n + t;
        }
        Ok(&self.values[lin * self.out_dim..(lin + 1) * self.out_dim])
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.out_dim)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

fn validate_subset(dims: &Dimensions, subset: &[usize]) -> Result<Vec<usize>> {
    if subset.is_empty() {
        return Err(Error::Argument("dimension subset must be nonempty".into()));
    }
    let mut s = subset.to_vec();
    s.sort_unstable();
    s.dedup();
    if s.len() != subset.len() {
        return Err(Error::Argument("dimension subset has repeated entries".into()));
    }
    for &i in &s {
        dims.check_dim(i)?;
    }
    Ok(s)
}

/// For each joint cluster tuple on `subset`, the sum of `S_j` over cells agreeing
/// with it on those dimensions. One pass over the cells.
pub fn subset_margin_sum(sums: &CellSums, subset: &[usize]) -> Result<MarginSums> {
    let dims = sums.dims();
    let subset = validate_subset(dims, subset)?;
    let shape: Vec<usize> = subset.iter().map(|&i| dims.count(i)).collect();
    let m = sums.out_dim();

    // stride of each full dimension inside the margin array (0 when not conditioned on)
    let mut sub_stride = vec![0usize; dims.k()];
    let mut acc = 1;
    for &i in subset.iter().rev() {
        sub_stride[i] = acc;
        acc *= dims.count(i);
    }
    let n_margin = acc;

    let mut values = vec![0.0; n_margin * m];
    let mut coords = vec![0usize; dims.k()];
    let mut target = 0usize;
    for lin in 0..dims.pi_c() {
        let s = sums.get(lin);
        let dst = &mut values[target * m..(target + 1) * m];
        for (d, v) in dst.iter_mut().zip(s) {
            *d += v;
        }
        // odometer step, keeping the projected index in sync
        for i in (0..dims.k()).rev() {
            coords[i] += 1;
            target += sub_stride[i];
            if coords[i] < dims.count(i) {
                break;
            }
            target -= sub_stride[i] * coords[i];
            coords[i] = 0;
        }
    }
    Ok(MarginSums {
        subset,
        shape,
        out_dim: m,
        values,
    })
}

/// `Σ_{j: j_i = c} S_j` for every cluster `c` of dimension `dim`.
pub fn margin_sum(sums: &CellSums, dim: usize) -> Result<MarginSums> {
    sums.dims().check_dim(dim)?;
    subset_margin_sum(sums, &[dim])
}

/// `(|A_i|, |B_i|)`: ordered cell pairs sharing exactly cluster `i`, and pairs
/// sharing at least cluster `i`.
pub fn pair_counts(dims: &Dimensions, dim: usize) -> Result<(u128, u128)> {
    dims.check_dim(dim)?;
    let c_i = dims.count(dim) as u128;
    let mut a = c_i;
    let mut b = c_i;
    for (s, &c) in dims.counts().iter().enumerate() {
        if s != dim {
            let c = c as u128;
            a *= c * (c - 1);
            b *= c * c;
        }
    }
    Ok((a, b))
}
