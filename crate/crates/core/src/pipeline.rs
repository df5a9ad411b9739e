//! The two-stage merging procedure.
//!
//! Stage 1 searches per-adapter retention ratios `α ∈ [0,1]^N` with the merge
//! weights fixed at `1/N`. Stage 2 freezes `α*` and searches signed merge
//! weights `β ∈ [−bound, bound]^N`. Both stages minimise oracle loss plus an
//! L1 penalty on the decision vector and keep the best candidate ever seen.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info, warn};

use crate::cmaes::{CmaConfig, CmaError, CmaState};
use crate::lowrank::{self, Adapter, AdapterRepository, LowRankError};
use crate::oracle::{FitnessQuery, Oracle, OracleError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("oracle failed twice on {request_id}: {source}")]
    Oracle {
        request_id: String,
        #[source]
        source: OracleError,
    },
    #[error(transparent)]
    Cma(#[from] CmaError),
    #[error(transparent)]
    LowRank(#[from] LowRankError),
    #[error("invalid stage config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Per-adapter retention ratios, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SparsityVector(Vec<f64>);

impl SparsityVector {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if let Some(&bad) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(LowRankError::Ratio(bad).into());
        }
        Ok(Self(alphas))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn l1(&self) -> f64 {
        l1(&self.0)
    }
}

/// Signed per-adapter merge weights, each in `[−bound, bound]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScalingVector(Vec<f64>);

impl ScalingVector {
    pub fn new(betas: Vec<f64>, bound: f64) -> Result<Self> {
        if let Some(&bad) = betas.iter().find(|b| !(b.is_finite() && b.abs() <= bound)) {
            return Err(PipelineError::Config(format!("beta {bad} outside [-{bound}, {bound}]")));
        }
        Ok(Self(betas))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn l1(&self) -> f64 {
        l1(&self.0)
    }
}

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    /// L1 coefficient on the decision vector.
    pub lambda_reg: f64,
    pub generations: usize,
    pub population: usize,
    pub sigma0: f64,
    /// Half-width of the stage-2 box; ignored by stage 1.
    pub beta_bound: f64,
    pub seed: u64,
    /// Coordinates held at a fixed value for every evaluated candidate. Used
    /// for ablations that remove one adapter from the search.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub pinned: BTreeMap<usize, f64>,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            lambda_reg: 0.05,
            generations: 20,
            population: 20,
            sigma0: 0.05,
            beta_bound: 1.5,
            seed: 0,
            pinned: BTreeMap::new(),
        }
    }
}

impl StageConfig {
    pub fn stage1(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    /// Stage 2 for small in-domain pools: 20 generations.
    pub fn stage2_in_domain(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    /// Stage 2 for large pools: 40 generations.
    pub fn stage2_large_pool(seed: u64) -> Self {
        Self { seed, generations: 40, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_reg.is_finite() && self.lambda_reg >= 0.0) {
            return Err(PipelineError::Config(format!("lambda_reg {} must be >= 0", self.lambda_reg)));
        }
        if self.generations == 0 {
            return Err(PipelineError::Config("generations must be >= 1".into()));
        }
        if !(self.beta_bound.is_finite() && self.beta_bound > 0.0) {
            return Err(PipelineError::Config(format!("beta_bound {} must be > 0", self.beta_bound)));
        }
        Ok(())
    }
}

/// Oracle loss, L1 penalty and their sum for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fitness {
    pub loss: f64,
    pub penalty: f64,
    pub fitness: f64,
}

impl Fitness {
    fn new(loss: f64, lambda: f64, decision: &[f64]) -> Self {
        let penalty = lambda * l1(decision);
        Self { loss, penalty, fitness: loss + penalty }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub stage: u8,
    pub generation: usize,
    /// Best fitness seen so far in this stage.
    pub best_fitness: f64,
    /// Mean fitness of this generation's population.
    pub mean_fitness: f64,
    /// Step size the population was sampled with.
    pub sigma: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub stage: u8,
    pub generation: usize,
    pub candidate: usize,
    pub decision: Vec<f64>,
    pub loss: f64,
    pub penalty: f64,
    pub fitness: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub best: Vec<f64>,
    pub best_fitness: Fitness,
    pub history: Vec<GenerationRecord>,
    pub evaluations: Vec<EvaluationRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeSolution {
    pub alphas_star: SparsityVector,
    pub betas_star: ScalingVector,
    pub best_fitness_stage1: f64,
    pub best_fitness_stage2: f64,
    /// Oracle loss of the final merge (stage-2 best fitness minus its penalty).
    pub best_loss_stage2: f64,
    pub history: Vec<GenerationRecord>,
    pub evaluations: Vec<EvaluationRecord>,
    pub merged: Adapter,
}

/// Queries the oracle, retrying once before giving up.
fn query_with_retry<O: Oracle + ?Sized>(oracle: &O, query: &FitnessQuery) -> Result<f64> {
    match oracle.evaluate(query) {
        Ok(reply) => Ok(reply.loss),
        Err(first) => {
            warn!(request_id = %query.request_id, "oracle error, retrying: {first}");
            oracle
                .evaluate(query)
                .map(|r| r.loss)
                .map_err(|source| PipelineError::Oracle { request_id: query.request_id.clone(), source })
        }
    }
}

/// `F(α)`: loss of the uniform pre-merge at `alphas` plus `λ₁‖α‖₁`.
pub fn stage1_fitness<O: Oracle + ?Sized>(alphas: &SparsityVector, oracle: &O, lambda1: f64) -> Result<f64> {
    let query = FitnessQuery::stage1("stage1", alphas.as_slice().to_vec());
    let loss = query_with_retry(oracle, &query)?;
    Ok(Fitness::new(loss, lambda1, alphas.as_slice()).fitness)
}

/// `G(β)`: loss of the `β`-weighted merge of the frozen pruned adapters plus
/// `λ₂‖β‖₁`.
pub fn stage2_fitness<O: Oracle + ?Sized>(
    betas: &ScalingVector,
    alphas_star: &SparsityVector,
    oracle: &O,
    lambda2: f64,
) -> Result<f64> {
    let query = FitnessQuery::stage2("stage2", alphas_star.as_slice().to_vec(), betas.as_slice().to_vec());
    let loss = query_with_retry(oracle, &query)?;
    Ok(Fitness::new(loss, lambda2, betas.as_slice()).fitness)
}

type QueryBuilder<'a> = Box<dyn Fn(String, &[f64]) -> FitnessQuery + Sync + 'a>;

struct StageSearch<'a, O: ?Sized> {
    oracle: &'a O,
    stage: u8,
    cfg: &'a StageConfig,
    /// Builds the query for a decision vector.
    make_query: QueryBuilder<'a>,
    cache: HashMap<Vec<u64>, f64>,
}

fn cache_key(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

impl<O: Oracle + ?Sized> StageSearch<'_, O> {
    /// Losses for one population, evaluating uncached points concurrently.
    fn losses(&mut self, generation: usize, points: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut pending: Vec<(usize, FitnessQuery)> = Vec::new();
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        for (i, x) in points.iter().enumerate() {
            let key = cache_key(x);
            if self.cache.contains_key(&key) || seen.contains_key(&key) {
                continue;
            }
            seen.insert(key, i);
            let id = format!("s{}-g{}-c{}", self.stage, generation, i);
            pending.push((i, (self.make_query)(id, x)));
        }
        let oracle = self.oracle;
        let fresh: Vec<(usize, Result<f64>)> =
            pending.par_iter().map(|(i, q)| (*i, query_with_retry(oracle, q))).collect();
        for (i, loss) in fresh {
            self.cache.insert(cache_key(&points[i]), loss?);
        }
        Ok(points.iter().map(|x| self.cache[&cache_key(x)]).collect())
    }

    fn run(mut self, x0: Vec<f64>, lower: f64, upper: f64) -> Result<StageOutcome> {
        let cfg = self.cfg;
        cfg.validate()?;
        let dim = x0.len();
        if let Some((&i, _)) = cfg.pinned.iter().find(|(&i, &v)| i >= dim || !(lower..=upper).contains(&v)) {
            return Err(PipelineError::Config(format!("pinned coordinate {i} invalid")));
        }
        let mut x0 = x0;
        for (&i, &v) in &cfg.pinned {
            x0[i] = v;
        }
        let mut cma = CmaConfig::boxed(x0, cfg.sigma0, lower, upper, cfg.population, cfg.seed);
        cma.max_generations = cfg.generations;
        let mut state = CmaState::new(cma)?;

        let mut history = Vec::with_capacity(cfg.generations);
        let mut evaluations = Vec::with_capacity(cfg.generations * cfg.population);
        let mut best: Option<(Vec<f64>, Fitness)> = None;
        for generation in 0..cfg.generations {
            let started = Instant::now();
            let sigma = state.sigma();
            let mut candidates = state.ask()?;
            for c in &mut candidates {
                for (&i, &v) in &cfg.pinned {
                    c.x[i] = v;
                }
            }
            let points: Vec<Vec<f64>> = candidates.iter().map(|c| c.x.clone()).collect();
            let losses = self.losses(generation, &points)?;
            let scored: Vec<Fitness> =
                points.iter().zip(&losses).map(|(x, &loss)| Fitness::new(loss, cfg.lambda_reg, x)).collect();
            let fitnesses: Vec<f64> = scored.iter().map(|f| f.fitness).collect();
            state.tell(&candidates, &fitnesses)?;

            for (candidate, (x, f)) in points.iter().zip(&scored).enumerate() {
                if best.as_ref().is_none_or(|(_, b)| f.fitness < b.fitness) {
                    best = Some((x.clone(), *f));
                }
                evaluations.push(EvaluationRecord {
                    stage: self.stage,
                    generation,
                    candidate,
                    decision: x.clone(),
                    loss: f.loss,
                    penalty: f.penalty,
                    fitness: f.fitness,
                });
            }
            let best_fitness = best.as_ref().map(|(_, f)| f.fitness).unwrap_or(f64::INFINITY);
            let record = GenerationRecord {
                stage: self.stage,
                generation,
                best_fitness,
                mean_fitness: fitnesses.iter().sum::<f64>() / fitnesses.len() as f64,
                sigma,
                wall_ms: started.elapsed().as_millis() as u64,
            };
            debug!(?record, "generation done");
            history.push(record);
        }
        let (best, best_fitness) = best.expect("at least one generation");
        Ok(StageOutcome { best, best_fitness, history, evaluations })
    }
}

/// Stage 1 with full history and evaluation records.
pub fn search_sparsity<O: Oracle + ?Sized>(
    repo: &AdapterRepository,
    oracle: &O,
    cfg: &StageConfig,
) -> Result<StageOutcome> {
    let n = repo.len();
    let search = StageSearch {
        oracle,
        stage: 1,
        cfg,
        make_query: Box::new(|id, x| FitnessQuery::stage1(id, x.to_vec())),
        cache: HashMap::new(),
    };
    search.run(vec![0.5; n], 0.0, 1.0)
}

/// Stage 2 with full history and evaluation records.
pub fn search_scaling<O: Oracle + ?Sized>(
    repo: &AdapterRepository,
    alphas_star: &SparsityVector,
    oracle: &O,
    cfg: &StageConfig,
) -> Result<StageOutcome> {
    let n = repo.len();
    if alphas_star.len() != n {
        return Err(LowRankError::Length { expected: n, got: alphas_star.len() }.into());
    }
    let alphas = alphas_star.as_slice().to_vec();
    let search = StageSearch {
        oracle,
        stage: 2,
        cfg,
        make_query: Box::new(move |id, x| FitnessQuery::stage2(id, alphas.clone(), x.to_vec())),
        cache: HashMap::new(),
    };
    let bound = cfg.beta_bound;
    search.run(vec![1.0 / n as f64; n], -bound, bound)
}

pub fn run_stage1<O: Oracle + ?Sized>(
    repo: &AdapterRepository,
    oracle: &O,
    cfg: &StageConfig,
) -> Result<(SparsityVector, Vec<GenerationRecord>)> {
    let outcome = search_sparsity(repo, oracle, cfg)?;
    Ok((SparsityVector::new(outcome.best)?, outcome.history))
}

pub fn run_stage2<O: Oracle + ?Sized>(
    repo: &AdapterRepository,
    alphas_star: &SparsityVector,
    oracle: &O,
    cfg: &StageConfig,
) -> Result<(ScalingVector, Vec<GenerationRecord>)> {
    let outcome = search_scaling(repo, alphas_star, oracle, cfg)?;
    Ok((ScalingVector::new(outcome.best, cfg.beta_bound)?, outcome.history))
}

/// Runs both stages and builds the final merged adapter
/// `A_m = Σ β*_i S(A_i, α*_i)`, `B_m = Σ β*_i B_i`.
pub fn evo_merge<O: Oracle + ?Sized>(
    repo: &AdapterRepository,
    oracle: &O,
    cfg1: &StageConfig,
    cfg2: &StageConfig,
) -> Result<MergeSolution> {
    let stage1 = search_sparsity(repo, oracle, cfg1)?;
    let alphas_star = SparsityVector::new(stage1.best.clone())?;
    info!(fitness = stage1.best_fitness.fitness, "stage 1 done");
    let stage2 = search_scaling(repo, &alphas_star, oracle, cfg2)?;
    let betas_star = ScalingVector::new(stage2.best.clone(), cfg2.beta_bound)?;
    info!(fitness = stage2.best_fitness.fitness, loss = stage2.best_fitness.loss, "stage 2 done");
    let merged = lowrank::merge(repo, betas_star.as_slice(), alphas_star.as_slice())?;

    let mut history = stage1.history;
    history.extend(stage2.history);
    let mut evaluations = stage1.evaluations;
    evaluations.extend(stage2.evaluations);
    Ok(MergeSolution {
        alphas_star,
        betas_star,
        best_fitness_stage1: stage1.best_fitness.fitness,
        best_fitness_stage2: stage2.best_fitness.fitness,
        best_loss_stage2: stage2.best_fitness.loss,
        history,
        evaluations,
        merged,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    use super::*;
    use crate::oracle::{evaluate_local, FitnessReply, LocalOracle};
    use crate::synth::{generate_world, SynthSpec, SynthWorld};

    struct Constant(f64);

    impl Oracle for Constant {
        fn evaluate(&self, q: &FitnessQuery) -> std::result::Result<FitnessReply, OracleError> {
            Ok(FitnessReply { request_id: q.request_id.clone(), loss: self.0, n_examples: 1 })
        }
    }

    /// Fails the first `failures` calls.
    struct Flaky {
        failures: usize,
        calls: AtomicUsize,
    }

    impl Oracle for Flaky {
        fn evaluate(&self, q: &FitnessQuery) -> std::result::Result<FitnessReply, OracleError> {
            if self.calls.fetch_add(1, Ordering::SeqCst) < self.failures {
                return Err(OracleError::Transport("boom".into()));
            }
            Ok(FitnessReply { request_id: q.request_id.clone(), loss: 1.0, n_examples: 1 })
        }
    }

    fn world(spec: SynthSpec) -> Arc<SynthWorld> {
        Arc::new(generate_world(&spec).unwrap())
    }

    #[test]
    fn stage1_fitness_arithmetic() {
        let alphas = SparsityVector::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(stage1_fitness(&alphas, &Constant(1.0), 0.0).unwrap(), 1.0);
        assert!((stage1_fitness(&alphas, &Constant(1.0), 0.05).unwrap() - 1.05).abs() < 1e-15);
    }

    #[test]
    fn zero_ratios_give_base_loss() {
        let w = world(SynthSpec { n_adapters: 3, n_relevant: 1, n_val: 32, ..SynthSpec::default() });
        let oracle = LocalOracle::new(w.clone());
        let zero = SparsityVector::new(vec![0.0; 3]).unwrap();
        assert_eq!(stage1_fitness(&zero, &oracle, 0.05).unwrap(), w.base_loss());
    }

    #[test]
    fn stage2_fitness_examples() {
        let w = world(SynthSpec { n_adapters: 3, n_relevant: 1, n_val: 32, ..SynthSpec::default() });
        let oracle = LocalOracle::new(w.clone());
        let ones = SparsityVector::new(vec![1.0; 3]).unwrap();
        let zero = ScalingVector::new(vec![0.0; 3], 1.5).unwrap();
        assert_eq!(stage2_fitness(&zero, &ones, &oracle, 0.05).unwrap(), w.base_loss());

        let single = world(SynthSpec { n_adapters: 1, n_relevant: 1, n_val: 32, ..SynthSpec::default() });
        let oracle = LocalOracle::new(single.clone());
        let one = ScalingVector::new(vec![1.0], 1.5).unwrap();
        let alpha = SparsityVector::new(vec![1.0]).unwrap();
        let adapter_loss = crate::oracle::adapter_loss(&single, single.repo.adapter(0)).unwrap();
        assert!((stage2_fitness(&one, &alpha, &oracle, 0.05).unwrap() - (adapter_loss + 0.05)).abs() < 1e-12);
    }

    #[test]
    fn cancelling_pair_costs_only_penalty() {
        let spec = SynthSpec { n_adapters: 1, n_relevant: 1, n_val: 32, ..SynthSpec::default() };
        let w = generate_world(&spec).unwrap();
        let doubled = AdapterRepository::new(vec![w.repo.adapter(0).clone(), w.repo.adapter(0).clone()]).unwrap();
        let w2 = Arc::new(SynthWorld { repo: doubled, relevance: vec![w.relevance[0]; 2], ..w.clone() });
        let oracle = LocalOracle::new(w2.clone());
        let betas = ScalingVector::new(vec![1.0, -1.0], 1.5).unwrap();
        let alphas = SparsityVector::new(vec![1.0, 1.0]).unwrap();
        let f = stage2_fitness(&betas, &alphas, &oracle, 0.05).unwrap();
        assert!((f - (w2.base_loss() + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn single_generation_budget() {
        let w = world(SynthSpec { n_adapters: 4, n_relevant: 2, n_val: 32, ..SynthSpec::default() });
        let cfg = StageConfig { generations: 1, ..StageConfig::stage1(1) };
        let (alphas, history) = run_stage1(&w.repo, &LocalOracle::new(w.clone()), &cfg).unwrap();
        assert_eq!(history.len(), 1);
        assert_eq!(alphas.len(), 4);
    }

    #[test]
    fn stage2_respects_box() {
        let w = world(SynthSpec { n_adapters: 4, n_relevant: 2, n_val: 32, ..SynthSpec::default() });
        let cfg = StageConfig { sigma0: 3.0, generations: 5, ..StageConfig::stage2_in_domain(2) };
        let alphas = SparsityVector::new(vec![1.0; 4]).unwrap();
        let out = search_scaling(&w.repo, &alphas, &LocalOracle::new(w.clone()), &cfg).unwrap();
        assert!(out.evaluations.iter().flat_map(|e| &e.decision).all(|b| b.abs() <= 1.5));
    }

    #[test]
    fn pinned_coordinates_hold() {
        let w = world(SynthSpec { n_adapters: 4, n_relevant: 2, n_val: 32, ..SynthSpec::default() });
        let mut cfg = StageConfig { generations: 3, ..StageConfig::stage2_in_domain(2) };
        cfg.pinned.insert(2, 0.0);
        let alphas = SparsityVector::new(vec![1.0; 4]).unwrap();
        let out = search_scaling(&w.repo, &alphas, &LocalOracle::new(w.clone()), &cfg).unwrap();
        assert!(out.evaluations.iter().all(|e| e.decision[2] == 0.0));
        assert_eq!(out.best[2], 0.0);
    }

    #[test]
    fn retry_once_then_abort() {
        let cfg = StageConfig { generations: 1, population: 4, ..StageConfig::stage1(0) };
        let w = world(SynthSpec { n_adapters: 2, n_relevant: 1, n_val: 8, ..SynthSpec::default() });
        let one_failure = Flaky { failures: 1, calls: AtomicUsize::new(0) };
        assert!(search_sparsity(&w.repo, &one_failure, &cfg).is_ok());
        let always = Flaky { failures: usize::MAX, calls: AtomicUsize::new(0) };
        assert!(matches!(search_sparsity(&w.repo, &always, &cfg), Err(PipelineError::Oracle { .. })));
    }

    #[test]
    fn merge_solution_reconstructs_and_replays() {
        let w = world(SynthSpec { n_adapters: 5, n_relevant: 2, n_val: 64, seed: 3, ..SynthSpec::default() });
        let oracle = LocalOracle::new(w.clone());
        let cfg1 = StageConfig { generations: 4, ..StageConfig::stage1(5) };
        let cfg2 = StageConfig { generations: 4, ..StageConfig::stage2_in_domain(6) };
        let sol = evo_merge(&w.repo, &oracle, &cfg1, &cfg2).unwrap();
        let again = lowrank::merge(&w.repo, sol.betas_star.as_slice(), sol.alphas_star.as_slice()).unwrap();
        assert_eq!(sol.merged, again);
        let replay = crate::oracle::adapter_loss(&w, &sol.merged).unwrap();
        assert_eq!(replay, sol.best_loss_stage2);
        let q = FitnessQuery::stage2("r", sol.alphas_star.as_slice().to_vec(), sol.betas_star.as_slice().to_vec());
        assert_eq!(evaluate_local(&w, &q).unwrap().loss, replay);
        assert_eq!(sol.history.len(), 8);
        for e in &sol.evaluations {
            assert!((e.fitness - e.loss - 0.05 * l1(&e.decision)).abs() <= 1e-12);
        }
    }

    #[test]
    fn one_ratio_per_adapter_covers_every_layer() {
        let w =
            world(SynthSpec { n_adapters: 4, n_relevant: 2, n_val: 32, layers: 3, seed: 8, ..SynthSpec::default() });
        let oracle = LocalOracle::new(w.clone());
        let cfg1 = StageConfig { generations: 2, population: 6, ..StageConfig::stage1(1) };
        let cfg2 = StageConfig { generations: 2, population: 6, ..StageConfig::stage2_in_domain(2) };
        let sol = evo_merge(&w.repo, &oracle, &cfg1, &cfg2).unwrap();
        assert_eq!(sol.alphas_star.len(), 4);
        assert_eq!(sol.merged.len(), 3);
        let (alphas, betas) = (sol.alphas_star.as_slice(), sol.betas_star.as_slice());
        for (name, pair) in &sol.merged {
            let mut expected = lowrank::Matrix::zeros(pair.a().rows(), pair.a().cols());
            for i in 0..4 {
                let s = lowrank::sparsify(w.repo.adapter(i)[name].a(), alphas[i]).unwrap();
                expected.add_scaled(betas[i], &s).unwrap();
            }
            assert_eq!(pair.a(), &expected, "{name}");
        }
    }

    #[test]
    fn invalid_stage_config() {
        let w = world(SynthSpec { n_adapters: 2, n_relevant: 1, n_val: 8, ..SynthSpec::default() });
        let cfg = StageConfig { generations: 0, ..StageConfig::stage1(0) };
        assert!(matches!(search_sparsity(&w.repo, &LocalOracle::new(w.clone()), &cfg), Err(PipelineError::Config(_))));
        let cfg = StageConfig { lambda_reg: -1.0, ..StageConfig::stage1(0) };
        assert!(search_sparsity(&w.repo, &LocalOracle::new(w.clone()), &cfg).is_err());
    }
}
