//! Box-constrained (μ/μ_w, λ)-CMA-ES with an ask/tell interface.
//!
//! Step size is controlled by cumulative step-size adaptation, the covariance
//! by combined rank-one and rank-μ updates. Out-of-box samples are repaired by
//! clipping and the repaired points are what `tell` learns from. Minimization
//! throughout.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CmaError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("covariance is not positive definite (optimizer diverged)")]
    NotPositiveDefinite,
    #[error("non-finite fitness {value} for candidate {index}")]
    NonFiniteFitness { index: usize, value: f64 },
    #[error("expected {expected} {what}, got {got}")]
    Count { what: &'static str, expected: usize, got: usize },
    #[error("no generation has been told yet")]
    NoHistory,
}

pub type Result<T> = std::result::Result<T, CmaError>;

/// Relative eigenvalue floor applied after every covariance update.
const EIGEN_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct CmaConfig {
    pub dim: usize,
    /// λ, candidates per generation.
    pub population: usize,
    pub sigma0: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub x0: Vec<f64>,
    pub seed: u64,
    pub max_generations: usize,
}

impl CmaConfig {
    /// Config with the same bound on every coordinate.
    pub fn boxed(x0: Vec<f64>, sigma0: f64, lower: f64, upper: f64, population: usize, seed: u64) -> Self {
        let dim = x0.len();
        Self {
            dim,
            population,
            sigma0,
            lower: vec![lower; dim],
            upper: vec![upper; dim],
            x0,
            seed,
            max_generations: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CmaError::Config(msg));
        if self.dim == 0 {
            return bad("dimension must be positive".into());
        }
        if self.population < 2 {
            return bad(format!("population {} < 2", self.population));
        }
        if !(self.sigma0.is_finite() && self.sigma0 > 0.0) {
            return bad(format!("sigma0 {} must be positive and finite", self.sigma0));
        }
        if self.max_generations == 0 {
            return bad("max_generations must be positive".into());
        }
        for (name, v) in [("lower", &self.lower), ("upper", &self.upper), ("x0", &self.x0)] {
            if v.len() != self.dim {
                return bad(format!("{name} has length {}, expected {}", v.len(), self.dim));
            }
        }
        for i in 0..self.dim {
            let (lo, hi, x) = (self.lower[i], self.upper[i], self.x0[i]);
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return bad(format!("bounds [{lo}, {hi}] at coordinate {i} are not an interval"));
            }
            if !(lo..=hi).contains(&x) {
                return bad(format!("x0[{i}] = {x} outside [{lo}, {hi}]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub x: Vec<f64>,
    pub fitness: Option<f64>,
}

/// Strategy constants derived from dimension and population size.
#[derive(Debug, Clone)]
struct Params {
    mu: usize,
    weights: Vec<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_c: f64,
    c_1: f64,
    c_mu: f64,
    chi_n: f64,
}

impl Params {
    fn new(n: usize, lambda: usize) -> Self {
        let nf = n as f64;
        let mu = lambda / 2;
        let raw: Vec<f64> = (1..=mu).map(|i| (mu as f64 + 0.5).ln() - (i as f64).ln()).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

        let c_sigma = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf);
        let c_1 = 2.0 / ((nf + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0).powi(2) + mu_eff));
        let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));
        Self { mu, weights, mu_eff, c_sigma, d_sigma, c_c, c_1, c_mu, chi_n }
    }
}

#[derive(Debug, Clone)]
pub struct CmaState {
    config: CmaConfig,
    params: Params,
    mean: DVector<f64>,
    sigma: f64,
    covariance: DMatrix<f64>,
    path_sigma: DVector<f64>,
    path_c: DVector<f64>,
    /// Orthonormal eigenvectors of the covariance, as columns.
    basis: DMatrix<f64>,
    /// Eigenvalues of the covariance, floored.
    eigenvalues: DVector<f64>,
    generation: usize,
    rng: ChaCha8Rng,
    best: Option<Candidate>,
}

impl CmaState {
    pub fn new(config: CmaConfig) -> Result<Self> {
        config.validate()?;
        let n = config.dim;
        let params = Params::new(n, config.population);
        Ok(Self {
            params,
            mean: DVector::from_column_slice(&config.x0),
            sigma: config.sigma0,
            covariance: DMatrix::identity(n, n),
            path_sigma: DVector::zeros(n),
            path_c: DVector::zeros(n),
            basis: DMatrix::identity(n, n),
            eigenvalues: DVector::from_element(n, 1.0),
            generation: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            best: None,
            config,
        })
    }

    pub fn config(&self) -> &CmaConfig {
        &self.config
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn eigenvalues(&self) -> &[f64] {
        self.eigenvalues.as_slice()
    }

    pub fn generation(&self) -> usize {
        self.generation
    }

    pub fn mu(&self) -> usize {
        self.params.mu
    }

    pub fn weights(&self) -> &[f64] {
        &self.params.weights
    }

    /// Samples λ candidates and clips them into the box.
    pub fn ask(&mut self) -> Result<Vec<Candidate>> {
        if self.eigenvalues.iter().any(|v| !(v.is_finite() && *v > 0.0)) || !self.sigma.is_finite() {
            return Err(CmaError::NotPositiveDefinite);
        }
        let n = self.config.dim;
        let scales = self.eigenvalues.map(f64::sqrt);
        let mut out = Vec::with_capacity(self.config.population);
        for _ in 0..self.config.population {
            let z = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(&mut self.rng)));
            let y = &self.basis * z.component_mul(&scales);
            let x = (0..n)
                .map(|i| (self.mean[i] + self.sigma * y[i]).clamp(self.config.lower[i], self.config.upper[i]))
                .collect();
            out.push(Candidate { x, fitness: None });
        }
        Ok(out)
    }

    /// Updates the distribution from one evaluated generation.
    ///
    /// Candidates are ranked by fitness with ties resolved by position, so
    /// only the ordering of `fitnesses` matters.
    pub fn tell(&mut self, candidates: &[Candidate], fitnesses: &[f64]) -> Result<()> {
        let n = self.config.dim;
        let lambda = self.config.population;
        if candidates.len() != lambda {
            return Err(CmaError::Count { what: "candidates", expected: lambda, got: candidates.len() });
        }
        if fitnesses.len() != lambda {
            return Err(CmaError::Count { what: "fitnesses", expected: lambda, got: fitnesses.len() });
        }
        if let Some((index, &value)) = fitnesses.iter().enumerate().find(|(_, f)| !f.is_finite()) {
            return Err(CmaError::NonFiniteFitness { index, value });
        }
        if let Some(c) = candidates.iter().find(|c| c.x.len() != n) {
            return Err(CmaError::Count { what: "coordinates", expected: n, got: c.x.len() });
        }

        let mut order: Vec<usize> = (0..lambda).collect();
        order.sort_by(|&i, &j| fitnesses[i].total_cmp(&fitnesses[j]).then(i.cmp(&j)));

        let best_now = order[0];
        if self.best.as_ref().is_none_or(|b| fitnesses[best_now] < b.fitness.unwrap_or(f64::INFINITY)) {
            self.best = Some(Candidate { x: candidates[best_now].x.clone(), fitness: Some(fitnesses[best_now]) });
        }

        let p = &self.params;
        let old_mean = self.mean.clone();
        let steps: Vec<DVector<f64>> = order[..p.mu]
            .iter()
            .map(|&i| (DVector::from_column_slice(&candidates[i].x) - &old_mean) / self.sigma)
            .collect();
        let mut y_w = DVector::zeros(n);
        for (w, y) in p.weights.iter().zip(&steps) {
            y_w.axpy(*w, y, 1.0);
        }
        self.mean = &old_mean + self.sigma * &y_w;
        for i in 0..n {
            self.mean[i] = self.mean[i].clamp(self.config.lower[i], self.config.upper[i]);
        }

        // C^{-1/2} y_w through the eigenbasis that generated this population.
        let inv_sqrt = self.eigenvalues.map(|v| 1.0 / v.sqrt());
        let whitened = &self.basis * (self.basis.tr_mul(&y_w)).component_mul(&inv_sqrt);
        self.path_sigma =
            (1.0 - p.c_sigma) * &self.path_sigma + (p.c_sigma * (2.0 - p.c_sigma) * p.mu_eff).sqrt() * whitened;

        let gen = (self.generation + 1) as f64;
        let ps_norm = self.path_sigma.norm();
        let h_sigma =
            ps_norm / (1.0 - (1.0 - p.c_sigma).powf(2.0 * gen)).sqrt() < (1.4 + 2.0 / (n as f64 + 1.0)) * p.chi_n;
        let h = if h_sigma { 1.0 } else { 0.0 };
        self.path_c = (1.0 - p.c_c) * &self.path_c + h * (p.c_c * (2.0 - p.c_c) * p.mu_eff).sqrt() * &y_w;

        let decay = 1.0 - p.c_1 - p.c_mu + (1.0 - h) * p.c_1 * p.c_c * (2.0 - p.c_c);
        let mut cov = decay * &self.covariance + p.c_1 * &self.path_c * self.path_c.transpose();
        for (w, y) in p.weights.iter().zip(&steps) {
            cov += (p.c_mu * w) * y * y.transpose();
        }
        self.covariance = cov;

        self.sigma *= ((p.c_sigma / p.d_sigma) * (ps_norm / p.chi_n - 1.0)).exp();
        self.generation += 1;
        self.refresh_eigen()
    }

    /// Best candidate ever told.
    pub fn best(&self) -> Result<&Candidate> {
        self.best.as_ref().ok_or(CmaError::NoHistory)
    }

    fn refresh_eigen(&mut self) -> Result<()> {
        let sym = (&self.covariance + self.covariance.transpose()) * 0.5;
        if sym.iter().any(|v| !v.is_finite()) || !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(CmaError::NotPositiveDefinite);
        }
        let eig = SymmetricEigen::new(sym);
        let max = eig.eigenvalues.max();
        if !(max.is_finite() && max > 0.0) {
            return Err(CmaError::NotPositiveDefinite);
        }
        let floor = EIGEN_FLOOR * max;
        let floored = eig.eigenvalues.map(|v| v.max(floor));
        let repaired = floored.iter().zip(eig.eigenvalues.iter()).any(|(a, b)| a != b);
        self.basis = eig.eigenvectors;
        self.eigenvalues = floored;
        if repaired {
            self.covariance = &self.basis * DMatrix::from_diagonal(&self.eigenvalues) * self.basis.transpose();
        }
        // Exact symmetry regardless of rounding in the products above.
        let n = self.config.dim;
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (self.covariance[(i, j)] + self.covariance[(j, i)]);
                self.covariance[(i, j)] = v;
                self.covariance[(j, i)] = v;
            }
        }
        Ok(())
    }
}

/// Runs ask/tell until `max_generations`, returning the best candidate and
/// the best-so-far fitness after each generation.
pub fn minimize<F>(config: CmaConfig, mut objective: F) -> Result<(Candidate, Vec<f64>)>
where
    F: FnMut(&[f64]) -> f64,
{
    let generations = config.max_generations;
    let mut state = CmaState::new(config)?;
    let mut trace = Vec::with_capacity(generations);
    for _ in 0..generations {
        let candidates = state.ask()?;
        let fitnesses: Vec<f64> = candidates.iter().map(|c| objective(&c.x)).collect();
        state.tell(&candidates, &fitnesses)?;
        trace.push(state.best()?.fitness.unwrap_or(f64::INFINITY));
    }
    Ok((state.best()?.clone(), trace))
}
