//! Dense matrices and low-rank adapter algebra.
//!
//! Everything here is a pure function of its inputs. Matrices are row-major
//! `f64` buffers; non-finite values are rejected at construction so the rest
//! of the crate can assume finite arithmetic.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LowRankError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("ratio {0} outside [0, 1]")]
    Ratio(f64),
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("empty repository")]
    EmptyRepository,
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
}

pub type Result<T> = std::result::Result<T, LowRankError>;

/// Row-major dense matrix of finite `f64` values.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            if r > 0 {
                write!(f, "; ")?;
            }
            for c in 0..self.cols {
                if c > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{}", self.get(r, c))?;
            }
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(LowRankError::Shape(format!("{rows}x{cols} has a zero dimension")));
        }
        if data.len() != rows * cols {
            return Err(LowRankError::Length { expected: rows * cols, got: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(LowRankError::NonFinite(i));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from nested rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LowRankError::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(LowRankError::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = vec![0.0; self.rows * rhs.cols];
        for i in 0..self.rows {
            let out_row = &mut out[i * rhs.cols..(i + 1) * rhs.cols];
            for (p, &lhs) in self.row(i).iter().enumerate() {
                if lhs == 0.0 {
                    continue;
                }
                for (o, &r) in out_row.iter_mut().zip(rhs.row(p)) {
                    *o += lhs * r;
                }
            }
        }
        Ok(Matrix { rows: self.rows, cols: rhs.cols, data: out })
    }

    /// `self · x` for a column vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(LowRankError::Length { expected: self.cols, got: x.len() });
        }
        Ok((0..self.rows).map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum()).collect())
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.check_same_shape(rhs)?;
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.check_same_shape(rhs)?;
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * factor).collect() }
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, factor: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other)?;
        for (s, o) in self.data.iter_mut().zip(&other.data) {
            *s += factor * o;
        }
        Ok(())
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LowRankError::Shape(format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols)));
        }
        Ok(())
    }
}

/// One adapter's factors for one layer: `ΔW ≈ b · a` with `a: r×k`, `b: d×r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankPair {
    a: Matrix,
    b: Matrix,
}

impl LowRankPair {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        let rank = a.rows();
        if b.cols() != rank {
            return Err(LowRankError::Shape(format!(
                "a is {}x{} but b is {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        if rank > b.rows().min(a.cols()) {
            return Err(LowRankError::Shape(format!("rank {rank} exceeds min(d={}, k={})", b.rows(), a.cols())));
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// Output dimension `d`.
    pub fn d(&self) -> usize {
        self.b.rows()
    }

    /// Input dimension `k`.
    pub fn k(&self) -> usize {
        self.a.cols()
    }

    pub fn dims(&self) -> LayerDims {
        LayerDims { d: self.d(), k: self.k(), rank: self.rank() }
    }

    pub fn into_parts(self) -> (Matrix, Matrix) {
        (self.a, self.b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDims {
    pub d: usize,
    pub k: usize,
    pub rank: usize,
}

/// A full adapter: layer name to factor pair. Ordered by layer name.
pub type Adapter = BTreeMap<String, LowRankPair>;

/// A pool of shape-compatible adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterRepository {
    adapters: Vec<Adapter>,
    layers: Vec<(String, LayerDims)>,
}

impl AdapterRepository {
    pub fn new(adapters: Vec<Adapter>) -> Result<Self> {
        let first = adapters.first().ok_or(LowRankError::EmptyRepository)?;
        let layers: Vec<(String, LayerDims)> = first.iter().map(|(name, pair)| (name.clone(), pair.dims())).collect();
        if layers.is_empty() {
            return Err(LowRankError::Shape("adapter has no layers".into()));
        }
        for (i, adapter) in adapters.iter().enumerate().skip(1) {
            if adapter.len() != layers.len() {
                return Err(LowRankError::Shape(format!(
                    "adapter {i} has {} layers, expected {}",
                    adapter.len(),
                    layers.len()
                )));
            }
            for (name, dims) in &layers {
                match adapter.get(name) {
                    Some(pair) if pair.dims() == *dims => {}
                    Some(pair) => {
                        return Err(LowRankError::Shape(format!(
                            "adapter {i} layer {name}: {:?} vs {:?}",
                            pair.dims(),
                            dims
                        )))
                    }
                    None => return Err(LowRankError::Shape(format!("adapter {i} lacks layer {name}"))),
                }
            }
        }
        Ok(Self { adapters, layers })
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn adapters(&self) -> &[Adapter] {
        &self.adapters
    }

    pub fn adapter(&self, i: usize) -> &Adapter {
        &self.adapters[i]
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|(n, _)| n.as_str())
    }

    pub fn layers(&self) -> &[(String, LayerDims)] {
        &self.layers
    }

    /// Repository restricted to the given adapter indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.adapters[i].clone()).collect())
    }
}

/// Dense task vector `b · a`.
pub fn task_vector(pair: &LowRankPair) -> Result<Matrix> {
    pair.b.matmul(&pair.a)
}

/// Number of entries retained at ratio `alpha` out of `numel`.
pub fn retained_count(alpha: f64, numel: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(LowRankError::Ratio(alpha));
    }
    // Guard against 0.3 * 10 = 3.0000000000000004 rounding up to 4.
    let raw = alpha * numel as f64;
    let nearest = raw.round();
    let count = if (raw - nearest).abs() <= 1e-9 * numel as f64 { nearest } else { raw.ceil() };
    Ok((count as usize).min(numel))
}

/// Row-major indices of the `count` largest-magnitude entries; ties go to the
/// smaller index.
pub fn top_magnitude_indices(values: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].abs().total_cmp(&values[i].abs()).then(i.cmp(&j)));
    order.truncate(count);
    order
}

/// Keeps the `ceil(alpha · numel)` entries of largest absolute value and
/// zeroes the rest.
pub fn sparsify(a: &Matrix, alpha: f64) -> Result<Matrix> {
    let numel = a.data.len();
    let keep = retained_count(alpha, numel)?;
    if keep == numel {
        return Ok(a.clone());
    }
    let mut data = vec![0.0; numel];
    for i in top_magnitude_indices(&a.data, keep) {
        data[i] = a.data[i];
    }
    Ok(Matrix { rows: a.rows, cols: a.cols, data })
}

fn check_decision_lengths(repo: &AdapterRepository, weights: &[f64], alphas: &[f64]) -> Result<()> {
    if weights.len() != repo.len() {
        return Err(LowRankError::Length { expected: repo.len(), got: weights.len() });
    }
    if alphas.len() != repo.len() {
        return Err(LowRankError::Length { expected: repo.len(), got: alphas.len() });
    }
    if let Some(&bad) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(LowRankError::Ratio(bad));
    }
    Ok(())
}

/// Weighted merge of sparsified adapters. Per layer:
/// `A_m = Σ w_i · S(A_i, α_i)` and `B_m = Σ w_i · B_i`.
pub fn merge(repo: &AdapterRepository, weights: &[f64], alphas: &[f64]) -> Result<Adapter> {
    merge_sided(repo, weights, alphas, PruneSide::A)
}

/// Which factor the sparsification operator is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneSide {
    A,
    B,
}

/// Like [`merge`], but sparsifies the chosen factor. `PruneSide::B` exists
/// for the A-versus-B comparison study only.
pub fn merge_sided(repo: &AdapterRepository, weights: &[f64], alphas: &[f64], side: PruneSide) -> Result<Adapter> {
    check_decision_lengths(repo, weights, alphas)?;
    let mut merged = Adapter::new();
    for (name, dims) in repo.layers() {
        let mut a_m = Matrix::zeros(dims.rank, dims.k);
        let mut b_m = Matrix::zeros(dims.d, dims.rank);
        for ((adapter, &w), &alpha) in repo.adapters().iter().zip(weights).zip(alphas) {
            if w == 0.0 {
                continue;
            }
            let pair = &adapter[name];
            match side {
                PruneSide::A => {
                    a_m.add_scaled(w, &sparsify(&pair.a, alpha)?)?;
                    b_m.add_scaled(w, &pair.b)?;
                }
                PruneSide::B => {
                    a_m.add_scaled(w, &pair.a)?;
                    b_m.add_scaled(w, &sparsify(&pair.b, alpha)?)?;
                }
            }
        }
        merged.insert(name.clone(), LowRankPair::new(a_m, b_m)?);
    }
    Ok(merged)
}

/// Merge with uniform weights `1/N`.
pub fn premerge_uniform(repo: &AdapterRepository, alphas: &[f64]) -> Result<Adapter> {
    let n = repo.len();
    merge(repo, &vec![1.0 / n as f64; n], alphas)
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Both sides of the pruning error bound
/// `‖B·A − B·S(A)‖_F ≤ ‖B‖_F · ‖A − S(A)‖_F`, returned as `(lhs, rhs)`.
pub fn error_bound_check(a: &Matrix, alpha: f64, b: &Matrix) -> Result<(f64, f64)> {
    if b.cols() != a.rows() {
        return Err(LowRankError::Shape(format!("b is {}x{} but a has {} rows", b.rows(), b.cols(), a.rows())));
    }
    let pruned = sparsify(a, alpha)?;
    let residual = a.sub(&pruned)?;
    let lhs = frobenius_norm(&b.matmul(a)?.sub(&b.matmul(&pruned)?)?);
    let rhs = frobenius_norm(b) * frobenius_norm(&residual);
    Ok((lhs, rhs))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BoundCheckReport {
    pub trials: usize,
    /// Largest `lhs / rhs` seen; `0` when both sides vanish.
    pub max_ratio: f64,
    /// Trials with `lhs > rhs · (1 + 1e-9)`.
    pub violations: usize,
}

/// Checks the pruning error bound on random `(A, B, α)` triples with every
/// dimension drawn from `1..=max_dim`, Gaussian entries and `α ~ U[0, 1]`.
pub fn sample_bound_check(trials: usize, max_dim: usize, seed: u64) -> Result<BoundCheckReport> {
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let gaussian = |rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize| {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
    };
    let mut report = BoundCheckReport { trials, max_ratio: 0.0, violations: 0 };
    for _ in 0..trials {
        let (r, k, d) = (rng.random_range(1..=max_dim), rng.random_range(1..=max_dim), rng.random_range(1..=max_dim));
        let a = gaussian(&mut rng, r, k)?;
        let b = gaussian(&mut rng, d, r)?;
        let alpha: f64 = rng.random();
        let (lhs, rhs) = error_bound_check(&a, alpha, &b)?;
        if lhs > rhs * (1.0 + 1e-9) {
            report.violations += 1;
        }
        let ratio = if rhs > 0.0 {
            lhs / rhs
        } else if lhs == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        report.max_ratio = report.max_ratio.max(ratio);
    }
    Ok(report)
}

/// Gini coefficient and Lorenz curve of a non-negative sample.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ConcentrationReport {
    pub gini: f64,
    /// `(population_fraction, mass_fraction)`, `n + 1` points from (0,0) to (1,1).
    pub lorenz: Vec<(f64, f64)>,
}

pub fn concentration(values: &[f64]) -> Result<ConcentrationReport> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(LowRankError::NonFinite(i));
    }
    if values.iter().any(|&v| v < 0.0) {
        return Err(LowRankError::Degenerate("negative value"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let total: f64 = sorted.iter().sum();
    if total <= 0.0 {
        return Err(LowRankError::Degenerate("all-zero input"));
    }
    let n = sorted.len();
    let nf = n as f64;
    let numerator: f64 = sorted.iter().enumerate().map(|(i, x)| (2.0 * (i + 1) as f64 - nf - 1.0) * x).sum();
    let gini = (numerator / (nf * total)).clamp(0.0, 1.0);

    let mut lorenz = Vec::with_capacity(n + 1);
    lorenz.push((0.0, 0.0));
    let mut cumulative = 0.0;
    for (i, x) in sorted.iter().enumerate() {
        cumulative += x;
        let p = (i + 1) as f64 / nf;
        // Keep the curve on or below the diagonal despite summation rounding.
        lorenz.push((p, (cumulative / total).min(p)));
    }
    if let Some(last) = lorenz.last_mut() {
        *last = (1.0, 1.0);
    }
    Ok(ConcentrationReport { gini, lorenz })
}
