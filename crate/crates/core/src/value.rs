//! State-value estimator trained against search-derived value targets.
//!
//! `predict` squashes a linear score through tanh so estimates stay inside
//! (-1, 1), matching the +/-1 terminal rewards that bound every backed-up
//! tree value. Fitting minimizes mean squared error by full-batch gradient
//! descent.

use crate::features::FeatureVector;
use crate::policy::{featurize_state_key, load_checkpoint, save_checkpoint, PolicyError};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ValueError {
    #[error("label set is empty")]
    EmptyLabels,
    #[error("learning rate must be > 0, got {0}")]
    BadLearningRate(f64),
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Checkpoint(#[from] PolicyError),
}

/// Weights of the tanh-squashed linear value model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueParams<T> {
    pub weights: Vec<T>,
    pub feature_dim: usize,
    pub round: u64,
}

impl<T: Scalar> ValueParams<T> {
    /// Zero-initialized model: predicts 0 for every state.
    pub fn zeros(feature_dim: usize) -> Self {
        ValueParams {
            weights: vec![T::zero(); feature_dim],
            feature_dim,
            round: 0,
        }
    }

    /// Seeded random init, uniform in [-scale, scale]. A zero model makes
    /// cold-start search degenerate to level-filling (every leaf evaluates to
    /// exactly 0 and the exploration term alone drives selection), so round 1
    /// starts from small random weights; terminal rewards overwrite the noise
    /// as simulations proceed.
    pub fn random(feature_dim: usize, seed: u64, scale: T) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros(feature_dim);
        let lo = -scale.to_f64_c();
        let hi = scale.to_f64_c();
        for w in &mut params.weights {
            *w = T::from_f64_c(rng.random_range(lo..=hi));
        }
        params
    }

    pub fn save(&self, path: &Path) -> Result<(), ValueError> {
        save_checkpoint("value", self.feature_dim, self.round, &self.weights, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ValueError> {
        let c = load_checkpoint::<T>("value", path)?;
        Ok(ValueParams {
            weights: c.weights,
            feature_dim: c.feature_dim,
            round: c.version,
        })
    }
}

/// One training example: a state (by canonical key) and its search value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueLabel<T> {
    pub state_key: String,
    pub target: T,
}

/// tanh(<w, phi(state)>), always inside (-1, 1).
pub fn predict<T: Scalar>(params: &ValueParams<T>, state_key: &str) -> T {
    predict_from_features(params, &featurize_state_key(state_key, params.feature_dim))
}

pub fn predict_from_features<T: Scalar>(params: &ValueParams<T>, feats: &FeatureVector<T>) -> T {
    // cap the raw score where tanh still rounds strictly below 1, so
    // predictions stay inside the open interval even for saturated weights
    let cap = (T::from_f64_c(2.0) / T::epsilon()).ln() * T::from_f64_c(0.49);
    let score = feats.dot(&params.weights);
    score.max(-cap).min(cap).tanh()
}

/// Mean squared error over precomputed features.
fn mse<T: Scalar>(params: &ValueParams<T>, feats: &[FeatureVector<T>], targets: &[T]) -> T {
    let mut total = T::zero();
    for (f, &t) in feats.iter().zip(targets.iter()) {
        let diff = predict_from_features(params, f) - t;
        total += diff * diff;
    }
    total / T::from_usize(feats.len()).unwrap()
}

/// Fit by full-batch gradient descent on the MSE. Returns the new parameters
/// and one pre-update loss per epoch; the inputs are untouched.
pub fn fit<T: Scalar>(
    params: &ValueParams<T>,
    labels: &[ValueLabel<T>],
    epochs: usize,
    lr: T,
) -> Result<(ValueParams<T>, Vec<T>), ValueError> {
    if labels.is_empty() {
        return Err(ValueError::EmptyLabels);
    }
    if lr <= T::zero() {
        return Err(ValueError::BadLearningRate(lr.to_f64_c()));
    }
    let feats: Vec<FeatureVector<T>> = labels
        .iter()
        .map(|l| featurize_state_key(&l.state_key, params.feature_dim))
        .collect();
    let targets: Vec<T> = labels.iter().map(|l| l.target).collect();
    let scale = T::from_usize(labels.len()).unwrap();

    let mut fitted = params.clone();
    fitted.round = params.round + 1;
    let mut loss_history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let loss = mse(&fitted, &feats, &targets);
        if !loss.is_finite() {
            return Err(ValueError::Diverged { epoch });
        }
        loss_history.push(loss);
        // d/dw mean (tanh(w.phi) - t)^2 = mean 2 (pred - t)(1 - pred^2) phi
        let mut step = vec![T::zero(); fitted.feature_dim];
        for (f, &t) in feats.iter().zip(targets.iter()) {
            let pred = predict_from_features(&fitted, f);
            let coeff = (T::one() + T::one()) * (pred - t) * (T::one() - pred * pred) / scale;
            f.add_scaled_into(&mut step, coeff);
        }
        for (w, g) in fitted.weights.iter_mut().zip(step.iter()) {
            *w -= lr * *g;
        }
    }
    Ok((fitted, loss_history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{self, Difficulty, EnvKind, State};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const DIM: usize = 1 << 12;

    fn sample_keys() -> Vec<String> {
        let problems = env::generate_problems(EnvKind::ArithChain, 17, 4, Difficulty::Medium);
        let mut keys = Vec::new();
        for p in &problems {
            let mut state = State::initial(p.id.clone());
            keys.push(state.canonical_key());
            while !env::is_terminal(&state, 6) {
                let a = env::golden_action(p, &state, 6).unwrap();
                state = env::apply(p, &state, &a, 6).unwrap();
                keys.push(state.canonical_key());
            }
        }
        keys
    }

    #[test]
    fn zero_params_predict_zero_everywhere() {
        let params = ValueParams::<f64>::zeros(DIM);
        for key in sample_keys() {
            assert_eq!(predict(&params, &key), 0.0);
        }
    }

    #[test]
    fn predictions_stay_inside_open_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ValueParams::<f64>::zeros(DIM);
        for w in &mut params.weights {
            *w = rng.random_range(-2.0..2.0);
        }
        for key in sample_keys() {
            let v = predict(&params, &key);
            assert!(v > -1.0 && v < 1.0);
        }
    }

    #[test]
    fn equal_states_equal_predictions() {
        let params = {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut p = ValueParams::<f64>::zeros(DIM);
            for w in &mut p.weights {
                *w = rng.random_range(-1.0..1.0);
            }
            p
        };
        for key in sample_keys() {
            assert_eq!(predict(&params, &key), predict(&params, &key));
        }
    }

    #[test]
    fn single_label_regression_converges() {
        let params = ValueParams::<f64>::zeros(DIM);
        let labels = vec![ValueLabel {
            state_key: sample_keys()[0].clone(),
            target: 0.8,
        }];
        let (fitted, history) = fit(&params, &labels, 300, 0.05).unwrap();
        assert_eq!(history.len(), 300);
        assert!((predict(&fitted, &labels[0].state_key) - 0.8).abs() < 0.05);
        // input untouched
        assert!(params.weights.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn zero_targets_zero_init_loss_stays_zero() {
        let params = ValueParams::<f64>::zeros(DIM);
        let labels: Vec<ValueLabel<f64>> = sample_keys()
            .into_iter()
            .map(|state_key| ValueLabel {
                state_key,
                target: 0.0,
            })
            .collect();
        let (_, history) = fit(&params, &labels, 5, 0.1).unwrap();
        assert!(history.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn loss_never_increases_for_small_lr() {
        let keys = sample_keys();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels: Vec<ValueLabel<f64>> = keys
            .iter()
            .map(|k| ValueLabel {
                state_key: k.clone(),
                target: rng.random_range(-0.9..0.9),
            })
            .collect();
        let params = ValueParams::<f64>::zeros(DIM);
        let (_, history) = fit(&params, &labels, 50, 0.01).unwrap();
        for pair in history.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let keys = sample_keys();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..50 {
            let labels: Vec<ValueLabel<f64>> = keys
                .iter()
                .skip(trial % 3)
                .take(4)
                .map(|k| ValueLabel {
                    state_key: k.clone(),
                    target: rng.random_range(-0.9..0.9),
                })
                .collect();
            let mut params = ValueParams::<f64>::zeros(DIM);
            for w in &mut params.weights {
                *w = rng.random_range(-0.3..0.3);
            }
            let feats: Vec<_> = labels
                .iter()
                .map(|l| featurize_state_key::<f64>(&l.state_key, DIM))
                .collect();
            let targets: Vec<f64> = labels.iter().map(|l| l.target).collect();

            // analytic gradient, same formula as fit()
            let mut grad = vec![0.0f64; DIM];
            for (f, &t) in feats.iter().zip(targets.iter()) {
                let pred = predict_from_features(&params, f);
                let coeff = 2.0 * (pred - t) * (1.0 - pred * pred) / labels.len() as f64;
                f.add_scaled_into(&mut grad, coeff);
            }

            let eps = 1e-5;
            let touched: Vec<u32> = feats
                .iter()
                .flat_map(|f| f.entries().iter().map(|&(i, _)| i))
                .collect();
            for &idx in touched.iter().take(20) {
                let original = params.weights[idx as usize];
                params.weights[idx as usize] = original + eps;
                let plus = mse(&params, &feats, &targets);
                params.weights[idx as usize] = original - eps;
                let minus = mse(&params, &feats, &targets);
                params.weights[idx as usize] = original;
                let numeric = (plus - minus) / (2.0 * eps);
                let denom = numeric.abs().max(1e-8);
                assert!(
                    ((grad[idx as usize] - numeric) / denom).abs() < 1e-5,
                    "trial {trial} idx {idx}"
                );
            }
        }
    }

    #[test]
    fn empty_labels_and_bad_lr_rejected() {
        let params = ValueParams::<f64>::zeros(DIM);
        assert!(matches!(
            fit::<f64>(&params, &[], 1, 0.1),
            Err(ValueError::EmptyLabels)
        ));
        let labels = vec![ValueLabel {
            state_key: "p|x|planning".to_string(),
            target: 0.5,
        }];
        assert!(matches!(
            fit(&params, &labels, 1, 0.0),
            Err(ValueError::BadLearningRate(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_with_kind_discriminator() {
        let mut params = ValueParams::<f64>::zeros(64);
        params.weights[3] = 0.123456789123456789;
        params.round = 2;
        let dir = std::env::temp_dir().join(format!("plantree-value-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("value.json");
        params.save(&path).unwrap();
        let loaded = ValueParams::<f64>::load(&path).unwrap();
        assert_eq!(params, loaded);
        std::fs::remove_dir_all(&dir).ok();
    }
}
