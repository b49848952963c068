//! Featurized softmax policy over enumerable candidate actions.
//!
//! Logits are sparse dot products of hashed (state, action) features against
//! a dense weight vector; probabilities come from a max-subtracted
//! log-softmax, so exact step log-probabilities and their analytic gradients
//! are available everywhere the search and the preference losses need them.

use crate::env::{ActionKind, State, StepAction};
use crate::features::{self, FeatureVector, TokenSet, DEFAULT_FEATURE_DIM};
use crate::scalar::{log_sum_exp, Scalar};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error("temperature must be > 0, got {0}")]
    BadTemperature(f64),
    #[error("chosen index {chosen} out of range for {len} candidates")]
    IndexOutOfRange { chosen: usize, len: usize },
    #[error("checkpoint kind mismatch: expected `{expected}`, found `{found}`")]
    CheckpointKind { expected: String, found: String },
    #[error("checkpoint parse: {0}")]
    CheckpointParse(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense weight vector of a linear-softmax policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams<T> {
    pub weights: Vec<T>,
    pub feature_dim: usize,
    pub version: u64,
}

impl<T: Scalar> PolicyParams<T> {
    /// Zero-initialized policy: uniform over any candidate set.
    pub fn zeros(feature_dim: usize) -> Self {
        PolicyParams {
            weights: vec![T::zero(); feature_dim],
            feature_dim,
            version: 0,
        }
    }

    pub fn default_dim() -> Self {
        Self::zeros(DEFAULT_FEATURE_DIM)
    }

    /// Frozen copy for use as a reference policy.
    pub fn snapshot(&self) -> PolicySnapshot<T> {
        PolicySnapshot {
            params: self.clone(),
        }
    }
}

/// Immutable policy snapshot (the reference policy of preference losses).
#[derive(Debug, Clone)]
pub struct PolicySnapshot<T> {
    params: PolicyParams<T>,
}

impl<T: Scalar> PolicySnapshot<T> {
    pub fn params(&self) -> &PolicyParams<T> {
        &self.params
    }
}

/// State tokens for featurization; compute once per state and reuse across
/// its candidates.
pub fn state_tokens(state: &State) -> TokenSet {
    let displays: Vec<String> = state.trace().iter().map(|a| a.display()).collect();
    let refs: Vec<&str> = displays.iter().map(|s| s.as_str()).collect();
    features::state_tokens(&refs, state.is_solved())
}

/// State tokens reconstructed from a canonical state key.
pub fn state_tokens_from_key(state_key: &str) -> TokenSet {
    match State::from_canonical_key(state_key) {
        Some(state) => state_tokens(&state),
        None => features::state_tokens(&[state_key], false),
    }
}

/// Hashed sparse features of one (state, action) pair.
pub fn featurize<T: Scalar>(
    state: &State,
    action: &StepAction,
    feature_dim: usize,
) -> FeatureVector<T> {
    featurize_action::<T>(&state_tokens(state), action, feature_dim)
}

pub fn featurize_action<T: Scalar>(
    state: &TokenSet,
    action: &StepAction,
    feature_dim: usize,
) -> FeatureVector<T> {
    let action_tokens =
        features::action_tokens(&action.display(), action.kind() == ActionKind::Solution);
    features::featurize(state, Some(&action_tokens), feature_dim)
}

/// State-only features; what the value model consumes.
pub fn featurize_state<T: Scalar>(state: &State, feature_dim: usize) -> FeatureVector<T> {
    features::featurize(&state_tokens(state), None, feature_dim)
}

pub fn featurize_state_key<T: Scalar>(state_key: &str, feature_dim: usize) -> FeatureVector<T> {
    features::featurize(&state_tokens_from_key(state_key), None, feature_dim)
}

/// Feature vectors for every candidate at a state.
pub fn candidate_features<T: Scalar>(
    params: &PolicyParams<T>,
    state: &State,
    candidates: &[StepAction],
) -> Vec<FeatureVector<T>> {
    let tokens = state_tokens(state);
    candidates
        .iter()
        .map(|c| featurize_action(&tokens, c, params.feature_dim))
        .collect()
}

pub fn logits_from_features<T: Scalar>(
    params: &PolicyParams<T>,
    feats: &[FeatureVector<T>],
) -> Vec<T> {
    feats.iter().map(|f| f.dot(&params.weights)).collect()
}

/// Log-softmax over precomputed candidate features.
pub fn log_probs_from_features<T: Scalar>(
    params: &PolicyParams<T>,
    feats: &[FeatureVector<T>],
) -> Result<Vec<T>, PolicyError> {
    if feats.is_empty() {
        return Err(PolicyError::EmptyCandidates);
    }
    let logits = logits_from_features(params, feats);
    let lse = log_sum_exp(&logits);
    Ok(logits.into_iter().map(|l| l - lse).collect())
}

/// Exact log-probabilities of each candidate under the policy.
pub fn log_probs<T: Scalar>(
    params: &PolicyParams<T>,
    state: &State,
    candidates: &[StepAction],
) -> Result<Vec<T>, PolicyError> {
    log_probs_from_features(params, &candidate_features(params, state, candidates))
}

/// Sample up to `min(k, |candidates|)` distinct actions without replacement
/// from softmax(logits / temperature).
pub fn sample_distinct<T: Scalar, R: Rng>(
    params: &PolicyParams<T>,
    state: &State,
    candidates: &[StepAction],
    k: usize,
    temperature: T,
    rng: &mut R,
) -> Result<Vec<StepAction>, PolicyError> {
    if temperature <= T::zero() {
        return Err(PolicyError::BadTemperature(temperature.to_f64_c()));
    }
    if candidates.is_empty() {
        return Err(PolicyError::EmptyCandidates);
    }
    let feats = candidate_features(params, state, candidates);
    let logits = logits_from_features(params, &feats);
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let mut pool: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| (i, ((l - max) / temperature).exp().to_f64_c()))
        .collect();

    let take = k.min(candidates.len());
    let mut picked = Vec::with_capacity(take);
    for _ in 0..take {
        let total: f64 = pool.iter().map(|&(_, w)| w).sum();
        let mut target = rng.random_range(0.0..1.0f64) * total;
        let mut chosen_slot = pool.len() - 1;
        for (slot, &(_, w)) in pool.iter().enumerate() {
            target -= w;
            if target <= 0.0 {
                chosen_slot = slot;
                break;
            }
        }
        let (idx, _) = pool.remove(chosen_slot);
        picked.push(candidates[idx].clone());
    }
    Ok(picked)
}

/// Gradient of `log pi(chosen | state, candidates)` with respect to the
/// weights: `phi(s, a_chosen) - sum_b pi(b|s) phi(s, b)`.
pub fn grad_log_prob<T: Scalar>(
    params: &PolicyParams<T>,
    state: &State,
    candidates: &[StepAction],
    chosen: usize,
) -> Result<FeatureVector<T>, PolicyError> {
    let feats = candidate_features(params, state, candidates);
    grad_log_prob_from_features(params, &feats, chosen)
}

pub fn grad_log_prob_from_features<T: Scalar>(
    params: &PolicyParams<T>,
    feats: &[FeatureVector<T>],
    chosen: usize,
) -> Result<FeatureVector<T>, PolicyError> {
    if chosen >= feats.len() {
        return Err(PolicyError::IndexOutOfRange {
            chosen,
            len: feats.len(),
        });
    }
    let log_probs = log_probs_from_features(params, feats)?;
    let mut grad = feats[chosen].clone();
    for (f, &lp) in feats.iter().zip(log_probs.iter()) {
        grad = FeatureVector::axpy(&grad, -lp.exp(), f);
    }
    Ok(grad)
}

/// On-disk checkpoint shared by policy and value parameters.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub kind: String,
    pub feature_dim: usize,
    pub version: u64,
    pub weights: Vec<T>,
}

pub fn save_checkpoint<T: Scalar>(
    kind: &str,
    feature_dim: usize,
    version: u64,
    weights: &[T],
    path: &Path,
) -> Result<(), PolicyError> {
    let checkpoint = Checkpoint {
        kind: kind.to_string(),
        feature_dim,
        version,
        weights: weights.to_vec(),
    };
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut file, &checkpoint)?;
    use std::io::Write;
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(kind: &str, path: &Path) -> Result<Checkpoint<T>, PolicyError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let checkpoint: Checkpoint<T> = serde_json::from_reader(file)?;
    if checkpoint.kind != kind {
        return Err(PolicyError::CheckpointKind {
            expected: kind.to_string(),
            found: checkpoint.kind,
        });
    }
    Ok(checkpoint)
}

impl<T: Scalar> PolicyParams<T> {
    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        save_checkpoint("policy", self.feature_dim, self.version, &self.weights, path)
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let c = load_checkpoint::<T>("policy", path)?;
        Ok(PolicyParams {
            weights: c.weights,
            feature_dim: c.feature_dim,
            version: c.version,
        })
    }
}
