//! Black-box loss oracle.
//!
//! The merging pipeline only ever sees [`Oracle::evaluate`]: decision vectors
//! go in, a validation loss comes out. [`LocalOracle`] evaluates in-process
//! against a [`SynthWorld`]; [`client::RemoteOracle`] speaks the HTTP wire
//! protocol to a [`server`] holding the world.

pub mod client;
pub mod server;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lowrank::{self, Adapter, LowRankError, Matrix};
use crate::synth::SynthWorld;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("dim_mismatch: {0}")]
    DimMismatch(String),
    #[error("bad_stage: {0}")]
    BadStage(String),
    #[error("parse_error: {0}")]
    Parse(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed reply: {0}")]
    MalformedReply(String),
    #[error("request id mismatch: sent {sent}, received {received}")]
    RequestIdMismatch { sent: String, received: String },
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error("server error {code}: {detail}")]
    Server { code: String, detail: String },
}

impl OracleError {
    /// Wire error code for errors a server reports back to clients.
    pub fn wire_code(&self) -> &'static str {
        match self {
            OracleError::DimMismatch(_) => "dim_mismatch",
            OracleError::BadStage(_) => "bad_stage",
            _ => "parse_error",
        }
    }
}

/// A loss request. Stage 1 carries only `alphas`; stage 2 carries the frozen
/// `alphas` together with the searched `betas`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessQuery {
    pub request_id: String,
    pub stage: u8,
    pub alphas: Vec<f64>,
    pub betas: Option<Vec<f64>>,
}

impl FitnessQuery {
    pub fn stage1(request_id: impl Into<String>, alphas: Vec<f64>) -> Self {
        Self { request_id: request_id.into(), stage: 1, alphas, betas: None }
    }

    pub fn stage2(request_id: impl Into<String>, alphas: Vec<f64>, betas: Vec<f64>) -> Self {
        Self { request_id: request_id.into(), stage: 2, alphas, betas: Some(betas) }
    }

    /// Checks the query against a repository of `n` adapters and returns the
    /// merge weights it implies.
    pub fn weights(&self, n: usize) -> Result<Vec<f64>, OracleError> {
        if self.alphas.len() != n {
            return Err(OracleError::DimMismatch(format!(
                "alphas has length {}, repository has {n} adapters",
                self.alphas.len()
            )));
        }
        if let Some(bad) = self.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(OracleError::Parse(format!("alpha {bad} outside [0, 1]")));
        }
        match (self.stage, &self.betas) {
            (1, _) => Ok(vec![1.0 / n as f64; n]),
            (2, Some(betas)) if betas.len() == n => {
                if let Some(bad) = betas.iter().find(|b| !b.is_finite()) {
                    return Err(OracleError::Parse(format!("beta {bad} is not finite")));
                }
                Ok(betas.clone())
            }
            (2, Some(betas)) => {
                Err(OracleError::DimMismatch(format!("betas has length {}, repository has {n} adapters", betas.len())))
            }
            (2, None) => Err(OracleError::BadStage("stage 2 requires betas".into())),
            (s, _) => Err(OracleError::BadStage(format!("stage {s} is not 1 or 2"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessReply {
    pub request_id: String,
    pub loss: f64,
    pub n_examples: usize,
}

/// Validation inputs (`n × k`, one row per item) and class labels in `[0, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSet {
    inputs: Matrix,
    labels: Vec<usize>,
}

impl ValidationSet {
    pub fn new(inputs: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self, OracleError> {
        if inputs.rows() != labels.len() {
            return Err(OracleError::DimMismatch(format!("{} inputs but {} labels", inputs.rows(), labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(OracleError::DimMismatch(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self { inputs, labels })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `log Σ exp(z) − z[label]`, stabilized by the max logit.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Mean cross-entropy of the linear classifier `weights · x` on `val`.
pub fn mean_cross_entropy(weights: &Matrix, val: &ValidationSet) -> Result<f64, OracleError> {
    let inputs = val.inputs();
    if weights.cols() != inputs.cols() {
        return Err(OracleError::DimMismatch(format!(
            "weights take {} features, inputs have {}",
            weights.cols(),
            inputs.cols()
        )));
    }
    let mut total = 0.0;
    for (i, &label) in val.labels().iter().enumerate() {
        let logits = weights.matvec(inputs.row(i)).map_err(dim_error)?;
        total += softmax_cross_entropy(&logits, label);
    }
    Ok(total / val.len() as f64)
}

fn dim_error(e: LowRankError) -> OracleError {
    OracleError::DimMismatch(e.to_string())
}

/// Effective weight matrix `Σ_l (base_l + B_l A_l)` of a model built from
/// per-layer base weights and an adapter. Layers share the input and output
/// spaces and their contributions add.
pub fn effective_weights(base: &BTreeMap<String, Matrix>, adapter: &Adapter) -> Result<Matrix, OracleError> {
    let mut layers = base.iter();
    let (_, first) = layers.next().ok_or_else(|| OracleError::DimMismatch("model has no layers".into()))?;
    let mut total = Matrix::zeros(first.rows(), first.cols());
    for (name, w) in base {
        total.add_scaled(1.0, w).map_err(dim_error)?;
        let pair = adapter.get(name).ok_or_else(|| OracleError::DimMismatch(format!("adapter lacks layer {name}")))?;
        total.add_scaled(1.0, &lowrank::task_vector(pair).map_err(dim_error)?).map_err(dim_error)?;
    }
    if adapter.len() != base.len() {
        return Err(OracleError::DimMismatch(format!(
            "adapter has {} layers, model has {}",
            adapter.len(),
            base.len()
        )));
    }
    Ok(total)
}

/// Validation loss of `world`'s base model patched with `adapter`.
pub fn adapter_loss(world: &SynthWorld, adapter: &Adapter) -> Result<f64, OracleError> {
    mean_cross_entropy(&effective_weights(&world.base, adapter)?, &world.val)
}

/// Merges the world's adapters as the query dictates and returns the loss.
pub fn evaluate_local(world: &SynthWorld, query: &FitnessQuery) -> Result<FitnessReply, OracleError> {
    let weights = query.weights(world.repo.len())?;
    let merged = lowrank::merge(&world.repo, &weights, &query.alphas).map_err(dim_error)?;
    let loss = adapter_loss(world, &merged)?;
    if !loss.is_finite() {
        return Err(OracleError::NonFiniteLoss(loss));
    }
    Ok(FitnessReply { request_id: query.request_id.clone(), loss, n_examples: world.val.len() })
}

/// Anything that can answer fitness queries. Implementations must tolerate
/// concurrent calls.
pub trait Oracle: Send + Sync {
    fn evaluate(&self, query: &FitnessQuery) -> Result<FitnessReply, OracleError>;
}

impl<T: Oracle + ?Sized> Oracle for Arc<T> {
    fn evaluate(&self, query: &FitnessQuery) -> Result<FitnessReply, OracleError> {
        (**self).evaluate(query)
    }
}

impl<T: Oracle + ?Sized> Oracle for &T {
    fn evaluate(&self, query: &FitnessQuery) -> Result<FitnessReply, OracleError> {
        (**self).evaluate(query)
    }
}

#[derive(Debug, Clone)]
pub struct LocalOracle {
    world: Arc<SynthWorld>,
}

impl LocalOracle {
    pub fn new(world: Arc<SynthWorld>) -> Self {
        Self { world }
    }

    pub fn world(&self) -> &SynthWorld {
        &self.world
    }
}

impl Oracle for LocalOracle {
    fn evaluate(&self, query: &FitnessQuery) -> Result<FitnessReply, OracleError> {
        evaluate_local(&self.world, query)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowrank::LowRankPair;
    use crate::synth::{generate_world, SynthSpec};

    fn small_world() -> SynthWorld {
        generate_world(&SynthSpec { n_adapters: 4, n_relevant: 2, n_val: 64, seed: 11, ..SynthSpec::default() })
            .unwrap()
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_classes() {
        assert!((softmax_cross_entropy(&[0.0; 8], 3) - 8f64.ln()).abs() < 1e-15);
        // Large logits do not overflow.
        let ce = softmax_cross_entropy(&[1000.0, 0.0], 0);
        assert!(ce.is_finite() && (0.0..1e-300).contains(&ce));
    }

    #[test]
    fn zero_betas_give_base_loss() {
        let world = small_world();
        let q = FitnessQuery::stage2("q", vec![1.0; 4], vec![0.0; 4]);
        let reply = evaluate_local(&world, &q).unwrap();
        assert_eq!(reply.loss, world.base_loss());
        assert_eq!(reply.n_examples, 64);
        assert_eq!(reply.request_id, "q");
    }

    #[test]
    fn identical_queries_identical_replies() {
        let world = small_world();
        let q = FitnessQuery::stage1("x", vec![0.3, 0.9, 0.1, 1.0]);
        let a = evaluate_local(&world, &q).unwrap();
        let b = evaluate_local(&world, &q).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    }

    #[test]
    fn stage1_uses_uniform_weights() {
        let world = small_world();
        let alphas = vec![0.3, 0.9, 0.1, 1.0];
        let via_query = evaluate_local(&world, &FitnessQuery::stage1("a", alphas.clone())).unwrap();
        let direct = adapter_loss(&world, &lowrank::premerge_uniform(&world.repo, &alphas).unwrap()).unwrap();
        assert_eq!(via_query.loss, direct);
    }

    #[test]
    fn query_validation_errors() {
        let world = small_world();
        let e = |q: FitnessQuery| evaluate_local(&world, &q).unwrap_err().wire_code();
        assert_eq!(e(FitnessQuery::stage1("a", vec![0.5; 3])), "dim_mismatch");
        assert_eq!(e(FitnessQuery::stage2("a", vec![0.5; 4], vec![1.0; 5])), "dim_mismatch");
        assert_eq!(
            e(FitnessQuery { request_id: "a".into(), stage: 3, alphas: vec![0.5; 4], betas: None }),
            "bad_stage"
        );
        assert_eq!(
            e(FitnessQuery { request_id: "a".into(), stage: 2, alphas: vec![0.5; 4], betas: None }),
            "bad_stage"
        );
        assert_eq!(e(FitnessQuery::stage1("a", vec![1.5, 0.5, 0.5, 0.5])), "parse_error");
    }

    /// Finite-difference check of d loss / d ΔW[r][c] against the analytic
    /// softmax cross-entropy gradient `mean_i (p_i[r] − 1[y_i = r]) x_i[c]`.
    #[test]
    fn finite_difference_matches_analytic_gradient() {
        let world = small_world();
        let w0 = effective_weights(&world.base, &lowrank::premerge_uniform(&world.repo, &[1.0; 4]).unwrap()).unwrap();
        let (r, c) = (2, 5);
        let val = &world.val;

        let mut analytic = 0.0;
        for (i, &y) in val.labels().iter().enumerate() {
            let x = val.inputs().row(i);
            let logits = w0.matvec(x).unwrap();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let p = (logits[r] - max).exp() / z;
            analytic += (p - if y == r { 1.0 } else { 0.0 }) * x[c];
        }
        analytic /= val.len() as f64;

        let h = 1e-6;
        let bump = |delta: f64| {
            let mut data = w0.data().to_vec();
            data[r * w0.cols() + c] += delta;
            mean_cross_entropy(&Matrix::new(w0.rows(), w0.cols(), data).unwrap(), val).unwrap()
        };
        let numeric = (bump(h) - bump(-h)) / (2.0 * h);
        assert!((numeric - analytic).abs() <= 1e-5 * analytic.abs().max(1e-3), "{numeric} vs {analytic}");
    }

    #[test]
    fn effective_weights_rejects_missing_layer() {
        let world = small_world();
        let mut adapter = Adapter::new();
        adapter.insert(
            "other".into(),
            LowRankPair::new(Matrix::zeros(1, world.spec.input_dim), Matrix::zeros(world.spec.class_count, 1)).unwrap(),
        );
        assert!(effective_weights(&world.base, &adapter).is_err());
    }
}
