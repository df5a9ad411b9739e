//! Planted synthetic worlds.
//!
//! A world is a linear softmax classifier (the base model), a planted
//! low-rank target delta, a pool of adapters that either carry the target
//! (with noise injected into one factor) or are unrelated, and a validation
//! set labelled by the teacher `base + target`. Because the truth is known,
//! every merging claim can be checked against it.
//!
//! Scales: base entries are `N(0, 1/k)`, `A`-side entries `N(0, s²/k)` and
//! `B`-side entries `N(0, s²)`. Noise of level η has the same per-factor
//! normalisation, so `η = s/2` means noise at half the signal amplitude.
//! All generated tensors are rounded to `f32` precision so a world written to
//! disk and read back is bitwise the same world.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lowrank::{self, Adapter, AdapterRepository, LowRankError, LowRankPair, Matrix, PruneSide};
use crate::oracle::{self, OracleError, ValidationSet};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    Spec(String),
    #[error("world has no relevant adapters")]
    NoRelevant,
    #[error(transparent)]
    LowRank(#[from] LowRankError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Which factor of a relevant adapter receives the noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseSide {
    #[default]
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// `k`, input features.
    pub input_dim: usize,
    /// `d`, output classes.
    pub class_count: usize,
    pub rank: usize,
    pub n_adapters: usize,
    pub n_relevant: usize,
    /// Adapters whose task vector is exactly `-target`. Taken from the
    /// non-relevant slots.
    pub n_adversarial: usize,
    pub noise_level: f64,
    pub signal_scale: f64,
    pub n_val: usize,
    pub layers: usize,
    pub noise_side: NoiseSide,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            input_dim: 32,
            class_count: 8,
            rank: 4,
            n_adapters: 20,
            n_relevant: 5,
            n_adversarial: 0,
            noise_level: 0.5,
            signal_scale: 1.0,
            n_val: 256,
            layers: 1,
            noise_side: NoiseSide::A,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::Spec(m));
        if self.input_dim == 0 || self.class_count < 2 || self.rank == 0 {
            return bad("dimensions must be positive and class_count >= 2".into());
        }
        if self.rank > self.input_dim.min(self.class_count) {
            return bad(format!("rank {} exceeds min(d, k)", self.rank));
        }
        if self.n_adapters == 0 || self.n_relevant + self.n_adversarial > self.n_adapters {
            return bad(format!(
                "{} relevant + {} adversarial adapters do not fit in a pool of {}",
                self.n_relevant, self.n_adversarial, self.n_adapters
            ));
        }
        if self.n_val == 0 || self.layers == 0 {
            return bad("n_val and layers must be positive".into());
        }
        if !(self.noise_level.is_finite() && self.noise_level >= 0.0) {
            return bad(format!("noise_level {} must be >= 0", self.noise_level));
        }
        if !(self.signal_scale.is_finite() && self.signal_scale > 0.0) {
            return bad(format!("signal_scale {} must be > 0", self.signal_scale));
        }
        Ok(())
    }

    pub fn layer_names(&self) -> Vec<String> {
        (0..self.layers).map(|l| format!("layer{l}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relevance {
    Relevant,
    Irrelevant,
    Adversarial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    pub spec: SynthSpec,
    /// Per-layer base weights, `d × k`.
    pub base: BTreeMap<String, Matrix>,
    /// The planted target delta per layer.
    pub target: Adapter,
    pub repo: AdapterRepository,
    pub relevance: Vec<Relevance>,
    pub val: ValidationSet,
    pub teacher_loss: f64,
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| f32_round(std * rng.sample::<f64, _>(StandardNormal))).collect();
    Matrix::new(rows, cols, data).expect("finite gaussian sample")
}

fn perturbed(rng: &mut ChaCha8Rng, m: &Matrix, std: f64) -> Matrix {
    let data = m.data().iter().map(|v| f32_round(v + std * rng.sample::<f64, _>(StandardNormal))).collect();
    Matrix::new(m.rows(), m.cols(), data).expect("finite perturbation")
}

fn sample_categorical(rng: &mut ChaCha8Rng, logits: &[f64]) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let mut u = rng.random::<f64>() * weights.iter().sum::<f64>();
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Generates a world deterministically from `spec` (including its seed).
pub fn generate_world(spec: &SynthSpec) -> Result<SynthWorld> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (k, d, r, s) = (spec.input_dim, spec.class_count, spec.rank, spec.signal_scale);
    let a_std = 1.0 / (k as f64).sqrt();
    let names = spec.layer_names();

    let mut base = BTreeMap::new();
    let mut target = Adapter::new();
    for name in &names {
        base.insert(name.clone(), gaussian(&mut rng, d, k, a_std));
        let a = gaussian(&mut rng, r, k, s * a_std);
        let b = gaussian(&mut rng, d, r, s);
        target.insert(name.clone(), LowRankPair::new(a, b)?);
    }

    let eta = spec.noise_level;
    let mut adapters = Vec::with_capacity(spec.n_adapters);
    let mut relevance = Vec::with_capacity(spec.n_adapters);
    for i in 0..spec.n_adapters {
        let kind = if i < spec.n_relevant {
            Relevance::Relevant
        } else if i < spec.n_relevant + spec.n_adversarial {
            Relevance::Adversarial
        } else {
            Relevance::Irrelevant
        };
        let mut adapter = Adapter::new();
        for name in &names {
            let truth = &target[name];
            let pair = match kind {
                Relevance::Relevant => match spec.noise_side {
                    NoiseSide::A => LowRankPair::new(perturbed(&mut rng, truth.a(), eta * a_std), truth.b().clone())?,
                    NoiseSide::B => LowRankPair::new(truth.a().clone(), perturbed(&mut rng, truth.b(), eta))?,
                },
                Relevance::Adversarial => LowRankPair::new(truth.a().clone(), truth.b().scale(-1.0))?,
                Relevance::Irrelevant => {
                    LowRankPair::new(gaussian(&mut rng, r, k, s * a_std), gaussian(&mut rng, d, r, s))?
                }
            };
            adapter.insert(name.clone(), pair);
        }
        adapters.push(adapter);
        relevance.push(kind);
    }
    let repo = AdapterRepository::new(adapters)?;

    let teacher = oracle::effective_weights(&base, &target)?;
    let inputs = gaussian(&mut rng, spec.n_val, k, 1.0);
    let labels: Vec<usize> = (0..spec.n_val)
        .map(|i| {
            let logits = teacher.matvec(inputs.row(i)).expect("teacher shape");
            sample_categorical(&mut rng, &logits)
        })
        .collect();
    let val = ValidationSet::new(inputs, labels, d)?;
    let teacher_loss = oracle::mean_cross_entropy(&teacher, &val)?;

    Ok(SynthWorld { spec: spec.clone(), base, target, repo, relevance, val, teacher_loss })
}

impl SynthWorld {
    /// Loss of the base model with no adapter applied.
    pub fn base_loss(&self) -> f64 {
        let zero: Adapter = self
            .repo
            .layers()
            .iter()
            .map(|(name, dims)| {
                let pair = LowRankPair::new(Matrix::zeros(dims.rank, dims.k), Matrix::zeros(dims.d, dims.rank))
                    .expect("zero pair");
                (name.clone(), pair)
            })
            .collect();
        oracle::adapter_loss(self, &zero).expect("world is self-consistent")
    }

    pub fn indices_of(&self, kind: Relevance) -> Vec<usize> {
        self.relevance.iter().enumerate().filter(|(_, r)| **r == kind).map(|(i, _)| i).collect()
    }

    /// Loss of the uniform, unpruned merge of the whole pool.
    pub fn uniform_loss(&self) -> f64 {
        let merged = lowrank::premerge_uniform(&self.repo, &vec![1.0; self.repo.len()]).expect("valid ratios");
        oracle::adapter_loss(self, &merged).expect("world is self-consistent")
    }
}

/// Loss of the uniform, unpruned merge of only the relevant adapters.
pub fn relevant_only_loss(world: &SynthWorld) -> Result<f64> {
    let relevant = world.indices_of(Relevance::Relevant);
    if relevant.is_empty() {
        return Err(SynthError::NoRelevant);
    }
    let sub = world.repo.subset(&relevant)?;
    let merged = lowrank::premerge_uniform(&sub, &vec![1.0; relevant.len()])?;
    Ok(oracle::adapter_loss(world, &merged)?)
}

/// All absolute entries of the dense task vectors of `adapter`.
pub fn delta_magnitudes(adapter: &Adapter) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for pair in adapter.values() {
        out.extend(lowrank::task_vector(pair)?.data().iter().map(|v| v.abs()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AbRow {
    pub alpha: f64,
    pub loss_a: f64,
    pub loss_b: f64,
    pub gini_a: f64,
    pub gini_b: f64,
}

fn gini_or_zero(adapter: &Adapter) -> Result<f64> {
    match lowrank::concentration(&delta_magnitudes(adapter)?) {
        Ok(report) => Ok(report.gini),
        Err(LowRankError::Degenerate(_)) => Ok(0.0),
        Err(e) => Err(e.into()),
    }
}

/// Uniform merge of the whole pool with every adapter pruned at the same
/// retention ratio, once on the `A` factors and once on the `B` factors.
pub fn ab_sparsify_study(world: &SynthWorld, retention_grid: &[f64]) -> Result<Vec<AbRow>> {
    let n = world.repo.len();
    let weights = vec![1.0 / n as f64; n];
    retention_grid
        .iter()
        .map(|&alpha| {
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(SynthError::Spec(format!("retention {alpha} outside (0, 1]")));
            }
            let ratios = vec![alpha; n];
            let a_side = lowrank::merge_sided(&world.repo, &weights, &ratios, PruneSide::A)?;
            let b_side = lowrank::merge_sided(&world.repo, &weights, &ratios, PruneSide::B)?;
            Ok(AbRow {
                alpha,
                loss_a: oracle::adapter_loss(world, &a_side)?,
                loss_b: oracle::adapter_loss(world, &b_side)?,
                gini_a: gini_or_zero(&a_side)?,
                gini_b: gini_or_zero(&b_side)?,
            })
        })
        .collect()
}

/// Cosine similarity between two adapters' dense task vectors, all layers
/// concatenated.
pub fn task_vector_cosine(x: &Adapter, y: &Adapter) -> Result<f64> {
    let (mut dot, mut nx, mut ny) = (0.0, 0.0, 0.0);
    for (name, px) in x {
        let py = y.get(name).ok_or_else(|| LowRankError::Shape(format!("missing layer {name}")))?;
        let (tx, ty) = (lowrank::task_vector(px)?, lowrank::task_vector(py)?);
        if tx.shape() != ty.shape() {
            return Err(LowRankError::Shape(format!("layer {name} shapes differ")).into());
        }
        for (a, b) in tx.data().iter().zip(ty.data()) {
            dot += a * b;
            nx += a * a;
            ny += b * b;
        }
    }
    Ok(dot / (nx.sqrt() * ny.sqrt()))
}
