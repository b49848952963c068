//! Policy training: supervised fine-tuning on correct paths, step-level
//! advantage preference optimization, and the Step-DPO / instance-DPO
//! baselines.
//!
//! The step-level objective scores a sibling pair by the policy/reference
//! log-ratio difference offset by the search value gap of the child states:
//!
//! ```text
//! loss = -log sigma( b*log(pi/ref)(a_w|s) - b*log(pi/ref)(a_l|s)
//!                    - s_f * (V(s_w) - V(s_l)) )
//! ```
//!
//! with `s_f` a scaling factor applied to solution-step pairs. The shared
//! parent value cancels, so the offset equals the advantage difference of the
//! two actions. Step-DPO is the same loss with the value terms zeroed;
//! instance DPO applies the pairwise loss to summed trajectory
//! log-probabilities. Gradients are analytic and finite-difference checked.

use crate::env::{ActionKind, StepAction};
use crate::features::{FeatureVector, TokenSet};
use crate::policy::{self, PolicyParams, PolicySnapshot};
use crate::prefdata::{PreferencePair, SftTrajectory, TrajectoryPair};
use crate::scalar::{neg_log_sigmoid, sigmoid, Scalar};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no trajectories to train on")]
    EmptyTrajectories,
    #[error("no preference pairs to train on")]
    EmptyPairs,
    #[error("trajectory pair mixes problems `{0}` and `{1}`")]
    MismatchedProblems(String, String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss not finite")]
    Diverged { epoch: usize, batch: usize },
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    /// Plain SGD at the scheduled rate.
    Sgd,
    /// Adam with lazy sparse moment updates.
    Adam,
}

/// Hyperparameters shared by every training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, bound(deserialize = "T: Scalar"))]
pub struct TrainConfig<T> {
    pub beta: T,
    /// Scaling applied to solution-step value gaps (plan gaps are unscaled).
    pub solution_scale: T,
    pub lr: T,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Warmup fraction of the cosine learning-rate schedule.
    pub warmup_ratio: T,
    pub seed: u64,
}

impl<T: Scalar> Default for TrainConfig<T> {
    fn default() -> Self {
        TrainConfig {
            beta: T::from_f64_c(0.3),
            solution_scale: T::from_f64_c(0.3),
            lr: T::from_f64_c(0.05),
            epochs: 2,
            batch_size: 64,
            optimizer: OptimizerKind::Adam,
            warmup_ratio: T::from_f64_c(0.1),
            seed: 0,
        }
    }
}

impl<T: Scalar> TrainConfig<T> {
    pub fn sft_default() -> Self {
        TrainConfig {
            lr: T::from_f64_c(0.15),
            epochs: 6,
            batch_size: 32,
            ..Self::default()
        }
    }

    pub fn apo_default() -> Self {
        TrainConfig {
            lr: T::from_f64_c(0.06),
            epochs: 3,
            batch_size: 16,
            ..Self::default()
        }
    }
}

/// Pairwise preference objectives over step pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepObjective {
    /// Advantage-weighted: value gap offsets the logistic argument.
    StepApo,
    /// Plain pairwise logistic on log-ratios.
    StepDpo,
}

/// Per-epoch training metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub mean_loss: f64,
    /// Fraction of pairs the policy orders correctly (positive margin).
    pub pair_accuracy: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epochs: Vec<EpochStats>,
}

impl LossReport {
    /// CSV with one row per epoch: `epoch,mean_loss,pair_accuracy,grad_norm`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,pair_accuracy,grad_norm\n");
        for (i, e) in self.epochs.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                i, e.mean_loss, e.pair_accuracy, e.grad_norm
            ));
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// The pairwise logistic core: -log sigma(delta_w - delta_l - scaled_gap).
fn pairwise_loss<T: Scalar>(delta_w: T, delta_l: T, scaled_gap: T) -> T {
    neg_log_sigmoid(delta_w - delta_l - scaled_gap)
}

/// Cached per-pair tensors: candidate features plus frozen reference
/// log-probs, so epochs only recompute the live-policy side.
struct PreparedPair<T> {
    feats: Vec<FeatureVector<T>>,
    chosen: usize,
    rejected: usize,
    /// s_f * (v_chosen - v_rejected); zero under Step-DPO.
    scaled_gap: T,
    ref_chosen_lp: T,
    ref_rejected_lp: T,
}

fn candidate_features_from_displays<T: Scalar>(
    state_key: &str,
    displays: &[String],
    dim: usize,
) -> Vec<FeatureVector<T>> {
    let tokens: TokenSet = policy::state_tokens_from_key(state_key);
    displays
        .iter()
        .map(|d| {
            let action = StepAction::from_display(d);
            policy::featurize_action(&tokens, &action, dim)
        })
        .collect()
}

fn scaled_gap<T: Scalar>(pair: &PreferencePair<T>, cfg: &TrainConfig<T>) -> T {
    let s_f = match pair.kind {
        ActionKind::Solution => cfg.solution_scale,
        ActionKind::Plan => T::one(),
    };
    s_f * (pair.v_chosen - pair.v_rejected)
}

fn prepare_pair<T: Scalar>(
    pair: &PreferencePair<T>,
    reference: &PolicySnapshot<T>,
    cfg: &TrainConfig<T>,
    objective: StepObjective,
) -> Result<PreparedPair<T>, TrainError> {
    let feats =
        candidate_features_from_displays(&pair.state_key, &pair.candidates, reference.params().feature_dim);
    let ref_lp = policy::log_probs_from_features(reference.params(), &feats)?;
    Ok(PreparedPair {
        chosen: pair.chosen_idx,
        rejected: pair.rejected_idx,
        scaled_gap: match objective {
            StepObjective::StepApo => scaled_gap(pair, cfg),
            StepObjective::StepDpo => T::zero(),
        },
        ref_chosen_lp: ref_lp[pair.chosen_idx],
        ref_rejected_lp: ref_lp[pair.rejected_idx],
        feats,
    })
}

fn prepared_loss<T: Scalar>(
    prepared: &PreparedPair<T>,
    theta: &PolicyParams<T>,
    beta: T,
) -> Result<(T, T), TrainError> {
    let lp = policy::log_probs_from_features(theta, &prepared.feats)?;
    let delta_w = beta * (lp[prepared.chosen] - prepared.ref_chosen_lp);
    let delta_l = beta * (lp[prepared.rejected] - prepared.ref_rejected_lp);
    let margin = delta_w - delta_l;
    Ok((pairwise_loss(delta_w, delta_l, prepared.scaled_gap), margin))
}

fn prepared_grad<T: Scalar>(
    prepared: &PreparedPair<T>,
    theta: &PolicyParams<T>,
    beta: T,
) -> Result<FeatureVector<T>, TrainError> {
    let (_, margin) = prepared_loss(prepared, theta, beta)?;
    // d loss / d theta = -beta * sigma(-(margin - gap)) * (grad_w - grad_l)
    let weight = -beta * sigmoid(prepared.scaled_gap - margin);
    let grad_w = policy::grad_log_prob_from_features(theta, &prepared.feats, prepared.chosen)?;
    let grad_l = policy::grad_log_prob_from_features(theta, &prepared.feats, prepared.rejected)?;
    let mut diff = FeatureVector::axpy(&grad_w, -T::one(), &grad_l);
    diff.scale(weight);
    Ok(diff)
}

/// Step-APO loss of one pair.
pub fn step_apo_loss<T: Scalar>(
    pair: &PreferencePair<T>,
    theta: &PolicyParams<T>,
    reference: &PolicySnapshot<T>,
    cfg: &TrainConfig<T>,
) -> Result<T, TrainError> {
    let prepared = prepare_pair(pair, reference, cfg, StepObjective::StepApo)?;
    Ok(prepared_loss(&prepared, theta, cfg.beta)?.0)
}

/// Analytic gradient of [`step_apo_loss`].
pub fn step_apo_grad<T: Scalar>(
    pair: &PreferencePair<T>,
    theta: &PolicyParams<T>,
    reference: &PolicySnapshot<T>,
    cfg: &TrainConfig<T>,
) -> Result<FeatureVector<T>, TrainError> {
    let prepared = prepare_pair(pair, reference, cfg, StepObjective::StepApo)?;
    prepared_grad(&prepared, theta, cfg.beta)
}

/// Step-DPO: the same pairwise loss with the value terms zeroed.
pub fn step_dpo_loss<T: Scalar>(
    pair: &PreferencePair<T>,
    theta: &PolicyParams<T>,
    reference: &PolicySnapshot<T>,
    beta: T,
) -> Result<T, TrainError> {
    let cfg = TrainConfig {
        beta,
        ..TrainConfig::default()
    };
    let prepared = prepare_pair(pair, reference, &cfg, StepObjective::StepDpo)?;
    Ok(prepared_loss(&prepared, theta, beta)?.0)
}

pub fn step_dpo_grad<T: Scalar>(
    pair: &PreferencePair<T>,
    theta: &PolicyParams<T>,
    reference: &PolicySnapshot<T>,
    beta: T,
) -> Result<FeatureVector<T>, TrainError> {
    let cfg = TrainConfig {
        beta,
        ..TrainConfig::default()
    };
    let prepared = prepare_pair(pair, reference, &cfg, StepObjective::StepDpo)?;
    prepared_grad(&prepared, theta, beta)
}

struct PreparedTrajectory<T> {
    steps: Vec<(Vec<FeatureVector<T>>, usize)>,
    ref_sum: T,
}

fn prepare_trajectory<T: Scalar>(
    traj: &SftTrajectory,
    reference: &PolicySnapshot<T>,
) -> Result<PreparedTrajectory<T>, TrainError> {
    let dim = reference.params().feature_dim;
    let mut steps = Vec::with_capacity(traj.steps.len());
    let mut ref_sum = T::zero();
    for step in &traj.steps {
        let feats = candidate_features_from_displays(&step.state_key, &step.candidates, dim);
        ref_sum += policy::log_probs_from_features(reference.params(), &feats)?[step.chosen_idx];
        steps.push((feats, step.chosen_idx));
    }
    Ok(PreparedTrajectory { steps, ref_sum })
}

fn trajectory_log_prob<T: Scalar>(
    prepared: &PreparedTrajectory<T>,
    theta: &PolicyParams<T>,
) -> Result<T, TrainError> {
    let mut sum = T::zero();
    for (feats, chosen) in &prepared.steps {
        sum += policy::log_probs_from_features(theta, feats)?[*chosen];
    }
    Ok(sum)
}

/// Instance-level DPO over complete trajectories: response log-prob is the
/// sum of step log-probs.
pub fn dpo_loss<T: Scalar>(
    pair: &TrajectoryPair,
    theta: &PolicyParams<T>,
    reference: &PolicySnapshot<T>,
    beta: T,
) -> Result<T, TrainError> {
    if pair.winner.problem_id != pair.loser.problem_id {
        return Err(TrainError::MismatchedProblems(
            pair.winner.problem_id.0.clone(),
            pair.loser.problem_id.0.clone(),
        ));
    }
    let w = prepare_trajectory(&pair.winner, reference)?;
    let l = prepare_trajectory(&pair.loser, reference)?;
    let delta_w = trajectory_log_prob(&w, theta)? - w.ref_sum;
    let delta_l = trajectory_log_prob(&l, theta)? - l.ref_sum;
    Ok(neg_log_sigmoid(beta * (delta_w - delta_l)))
}

pub fn dpo_grad<T: Scalar>(
    pair: &TrajectoryPair,
    theta: &PolicyParams<T>,
    reference: &PolicySnapshot<T>,
    beta: T,
) -> Result<FeatureVector<T>, TrainError> {
    if pair.winner.problem_id != pair.loser.problem_id {
        return Err(TrainError::MismatchedProblems(
            pair.winner.problem_id.0.clone(),
            pair.loser.problem_id.0.clone(),
        ));
    }
    let w = prepare_trajectory(&pair.winner, reference)?;
    let l = prepare_trajectory(&pair.loser, reference)?;
    let delta_w = trajectory_log_prob(&w, theta)? - w.ref_sum;
    let delta_l = trajectory_log_prob(&l, theta)? - l.ref_sum;
    let weight = -beta * sigmoid(-beta * (delta_w - delta_l));
    let mut grad = FeatureVector::zero();
    for (feats, chosen) in &w.steps {
        let g = policy::grad_log_prob_from_features(theta, feats, *chosen)?;
        grad = FeatureVector::axpy(&grad, T::one(), &g);
    }
    for (feats, chosen) in &l.steps {
        let g = policy::grad_log_prob_from_features(theta, feats, *chosen)?;
        grad = FeatureVector::axpy(&grad, -T::one(), &g);
    }
    grad.scale(weight);
    Ok(grad)
}

/// Lazy sparse optimizer state shared by SGD and Adam.
struct Optimizer<T> {
    kind: OptimizerKind,
    m: Vec<T>,
    v: Vec<T>,
    t: usize,
    base_lr: T,
    warmup_steps: usize,
    total_steps: usize,
}

impl<T: Scalar> Optimizer<T> {
    fn new(cfg: &TrainConfig<T>, dim: usize, total_steps: usize) -> Self {
        let warmup = (cfg.warmup_ratio.to_f64_c() * total_steps as f64).floor() as usize;
        Optimizer {
            kind: cfg.optimizer,
            m: vec![T::zero(); dim],
            v: vec![T::zero(); dim],
            t: 0,
            base_lr: cfg.lr,
            warmup_steps: warmup,
            total_steps: total_steps.max(1),
        }
    }

    /// Cosine schedule with linear warmup.
    fn lr(&self) -> T {
        let t = self.t as f64;
        let factor = if self.t < self.warmup_steps {
            (t + 1.0) / (self.warmup_steps as f64).max(1.0)
        } else {
            let span = (self.total_steps - self.warmup_steps).max(1) as f64;
            let progress = ((t - self.warmup_steps as f64) / span).min(1.0);
            0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        };
        self.base_lr * T::from_f64_c(factor)
    }

    /// Apply one descent step along `grad` (touched coordinates only).
    fn step(&mut self, weights: &mut [T], grad_entries: &[(u32, T)]) {
        let lr = self.lr();
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for &(idx, g) in grad_entries {
                    weights[idx as usize] -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                let b1 = T::from_f64_c(0.9);
                let b2 = T::from_f64_c(0.999);
                let eps = T::from_f64_c(1e-8);
                let t = self.t as i32;
                let bc1 = T::one() - b1.powi(t);
                let bc2 = T::one() - b2.powi(t);
                for &(idx, g) in grad_entries {
                    let i = idx as usize;
                    self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
                    self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    weights[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

/// Dense gradient accumulator that remembers which slots it touched.
struct GradBuffer<T> {
    dense: Vec<T>,
    touched: Vec<u32>,
    stamp: Vec<u32>,
    generation: u32,
}

impl<T: Scalar> GradBuffer<T> {
    fn new(dim: usize) -> Self {
        GradBuffer {
            dense: vec![T::zero(); dim],
            touched: Vec::new(),
            stamp: vec![0; dim],
            generation: 0,
        }
    }

    fn begin(&mut self) {
        self.generation += 1;
        self.touched.clear();
    }

    fn add(&mut self, grad: &FeatureVector<T>, scale: T) {
        for &(idx, g) in grad.entries() {
            let i = idx as usize;
            if self.stamp[i] != self.generation {
                self.stamp[i] = self.generation;
                self.dense[i] = T::zero();
                self.touched.push(idx);
            }
            self.dense[i] += scale * g;
        }
    }

    /// Mean gradient entries of the batch, sorted by index.
    fn drain(&mut self, batch_len: usize) -> Vec<(u32, T)> {
        let scale = T::one() / T::from_usize(batch_len).unwrap();
        self.touched.sort_unstable();
        self.touched
            .iter()
            .map(|&idx| (idx, self.dense[idx as usize] * scale))
            .collect()
    }
}

fn grad_entries_norm<T: Scalar>(entries: &[(u32, T)]) -> f64 {
    entries
        .iter()
        .map(|&(_, g)| (g * g).to_f64_c())
        .sum::<f64>()
        .sqrt()
}

/// Supervised fine-tuning: maximize the log-likelihood of chosen actions
/// over all trajectory steps.
pub fn sft_fit<T: Scalar>(
    base: &PolicyParams<T>,
    trajs: &[SftTrajectory],
    cfg: &TrainConfig<T>,
) -> Result<(PolicyParams<T>, LossReport), TrainError> {
    if trajs.is_empty() {
        return Err(TrainError::EmptyTrajectories);
    }
    let dim = base.feature_dim;
    let mut items: Vec<(Vec<FeatureVector<T>>, usize)> = Vec::new();
    for traj in trajs {
        for step in &traj.steps {
            let feats = candidate_features_from_displays(&step.state_key, &step.candidates, dim);
            items.push((feats, step.chosen_idx));
        }
    }

    let mut theta = base.clone();
    theta.version = base.version + 1;
    let batches_per_epoch = items.len().div_ceil(cfg.batch_size);
    let mut optimizer = Optimizer::new(cfg, dim, cfg.epochs * batches_per_epoch);
    let mut buffer = GradBuffer::new(dim);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = LossReport::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut epoch_correct = 0usize;
        let mut norm_sum = 0.0f64;
        let mut norm_count = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            buffer.begin();
            for &i in batch {
                let (feats, chosen) = &items[i];
                let lp = policy::log_probs_from_features(&theta, feats)?;
                let nll = -lp[*chosen];
                if !nll.is_finite() {
                    return Err(TrainError::Diverged {
                        epoch,
                        batch: batch_idx,
                    });
                }
                epoch_loss += nll.to_f64_c();
                let argmax = lp
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                if argmax == *chosen {
                    epoch_correct += 1;
                }
                // gradient of the NLL is minus the log-prob gradient
                let mut g = policy::grad_log_prob_from_features(&theta, feats, *chosen)?;
                g.scale(-T::one());
                buffer.add(&g, T::one());
            }
            let entries = buffer.drain(batch.len());
            norm_sum += grad_entries_norm(&entries);
            norm_count += 1;
            optimizer.step(&mut theta.weights, &entries);
        }
        report.epochs.push(EpochStats {
            mean_loss: epoch_loss / items.len() as f64,
            pair_accuracy: epoch_correct as f64 / items.len() as f64,
            grad_norm: norm_sum / norm_count.max(1) as f64,
        });
    }
    Ok((theta, report))
}

/// Preference optimization over step pairs with the chosen objective.
pub fn fit_preference<T: Scalar>(
    base: &PolicyParams<T>,
    reference: &PolicySnapshot<T>,
    pairs: &[PreferencePair<T>],
    cfg: &TrainConfig<T>,
    objective: StepObjective,
) -> Result<(PolicyParams<T>, LossReport), TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyPairs);
    }
    let dim = base.feature_dim;
    let prepared: Vec<PreparedPair<T>> = pairs
        .iter()
        .map(|p| prepare_pair(p, reference, cfg, objective))
        .collect::<Result<_, _>>()?;

    let mut theta = base.clone();
    theta.version = base.version + 1;
    let batches_per_epoch = prepared.len().div_ceil(cfg.batch_size);
    let mut optimizer = Optimizer::new(cfg, dim, cfg.epochs * batches_per_epoch);
    let mut buffer = GradBuffer::new(dim);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = LossReport::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut epoch_correct = 0usize;
        let mut norm_sum = 0.0f64;
        let mut norm_count = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            buffer.begin();
            for &i in batch {
                let pair = &prepared[i];
                let (loss, margin) = prepared_loss(pair, &theta, cfg.beta)?;
                if !loss.is_finite() {
                    return Err(TrainError::Diverged {
                        epoch,
                        batch: batch_idx,
                    });
                }
                epoch_loss += loss.to_f64_c();
                if margin > T::zero() {
                    epoch_correct += 1;
                }
                let g = prepared_grad(pair, &theta, cfg.beta)?;
                buffer.add(&g, T::one());
            }
            let entries = buffer.drain(batch.len());
            norm_sum += grad_entries_norm(&entries);
            norm_count += 1;
            optimizer.step(&mut theta.weights, &entries);
        }
        report.epochs.push(EpochStats {
            mean_loss: epoch_loss / prepared.len() as f64,
            pair_accuracy: epoch_correct as f64 / prepared.len() as f64,
            grad_norm: norm_sum / norm_count.max(1) as f64,
        });
    }
    Ok((theta, report))
}

/// Step-APO training (the main line).
pub fn apo_fit<T: Scalar>(
    base: &PolicyParams<T>,
    reference: &PolicySnapshot<T>,
    pairs: &[PreferencePair<T>],
    cfg: &TrainConfig<T>,
) -> Result<(PolicyParams<T>, LossReport), TrainError> {
    fit_preference(base, reference, pairs, cfg, StepObjective::StepApo)
}

/// Instance-level DPO training over trajectory pairs.
pub fn dpo_fit<T: Scalar>(
    base: &PolicyParams<T>,
    reference: &PolicySnapshot<T>,
    pairs: &[TrajectoryPair],
    cfg: &TrainConfig<T>,
) -> Result<(PolicyParams<T>, LossReport), TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyPairs);
    }
    let dim = base.feature_dim;
    let mut theta = base.clone();
    theta.version = base.version + 1;
    let batches_per_epoch = pairs.len().div_ceil(cfg.batch_size);
    let mut optimizer = Optimizer::new(cfg, dim, cfg.epochs * batches_per_epoch);
    let mut buffer = GradBuffer::new(dim);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = LossReport::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut epoch_correct = 0usize;
        let mut norm_sum = 0.0f64;
        let mut norm_count = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            buffer.begin();
            for &i in batch {
                let loss = dpo_loss(&pairs[i], &theta, reference, cfg.beta)?;
                if !loss.is_finite() {
                    return Err(TrainError::Diverged {
                        epoch,
                        batch: batch_idx,
                    });
                }
                epoch_loss += loss.to_f64_c();
                if loss < T::from_f64_c(std::f64::consts::LN_2) {
                    epoch_correct += 1;
                }
                let g = dpo_grad(&pairs[i], &theta, reference, cfg.beta)?;
                buffer.add(&g, T::one());
            }
            let entries = buffer.drain(batch.len());
            norm_sum += grad_entries_norm(&entries);
            norm_count += 1;
            optimizer.step(&mut theta.weights, &entries);
        }
        report.epochs.push(EpochStats {
            mean_loss: epoch_loss / pairs.len() as f64,
            pair_accuracy: epoch_correct as f64 / pairs.len() as f64,
            grad_norm: norm_sum / norm_count.max(1) as f64,
        });
    }
    Ok((theta, report))
}
