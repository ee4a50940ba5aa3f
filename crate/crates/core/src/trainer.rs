//! Plain SGD over class-balanced batches with a pluggable gradient estimator.

use std::fmt::Write as _;

use crate::data::Dataset;
use crate::embedding::EmbeddingState;
use crate::error::{check_dim, invalid, Error, Result};
use crate::estimators::{full_gradient, multibatch_gradient_for, pairwise_from_pool, EstimatorKind, GradientEstimate};
use crate::losses::{full_objective, signatures, Weighting};
use crate::tensor::{sq_dist_unchecked, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub estimator: EstimatorKind,
    /// Classes drawn per batch.
    pub classes_per_batch: usize,
    /// Samples drawn from each chosen class.
    pub samples_per_class: usize,
    pub lr: f64,
    /// `(step, lr)`: from the step after `step` on, use `lr`.
    pub lr_drops: Vec<(usize, f64)>,
    pub steps: usize,
    /// Record a history row every this many steps (and after the last one).
    pub eval_every: usize,
    pub seed: u64,
    pub weighting: Weighting,
    /// Stop as soon as a recorded objective is at or below this value.
    pub stop_below: Option<f64>,
}

impl TrainConfig {
    /// Batch size `k = classes_per_batch · samples_per_class`.
    pub fn k(&self) -> usize {
        self.classes_per_batch * self.samples_per_class
    }

    /// k = 16 as 4 classes × 4 samples, lr 0.01 dropping to 0.001 for the
    /// last tenth of the run, balanced pair weights.
    pub fn desk_default(estimator: EstimatorKind, steps: usize, seed: u64) -> Self {
        TrainConfig {
            estimator,
            classes_per_batch: 4,
            samples_per_class: 4,
            lr: 0.01,
            lr_drops: vec![(steps * 9 / 10, 0.001)],
            steps,
            eval_every: (steps / 100).max(1),
            seed,
            weighting: Weighting::Balanced,
            stop_below: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes_per_batch == 0 || self.samples_per_class == 0 {
            return invalid("classes per batch and samples per class must be positive");
        }
        if self.k() < 2 {
            return invalid("batch must hold at least two samples");
        }
        if self.estimator == EstimatorKind::PairwiseMinibatch && self.k() % 2 != 0 {
            return invalid("pairwise training needs an even batch size");
        }
        if !(self.lr > 0.0) || self.lr_drops.iter().any(|&(_, lr)| !(lr > 0.0)) {
            return invalid("learning rates must be positive");
        }
        if self.eval_every == 0 {
            return invalid("eval_every must be positive");
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        let mut drops = self.lr_drops.clone();
        drops.sort_by_key(|&(s, _)| s);
        drops
            .iter()
            .filter(|&&(s, _)| step > s)
            .last()
            .map_or(self.lr, |&(_, lr)| lr)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    /// Cumulative embedding forward passes spent by the estimator.
    pub forward_passes: usize,
    pub objective: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "step,forward_passes,objective,accuracy";

    pub fn csv_rows(&self) -> impl Iterator<Item = String> + '_ {
        self.rows.iter().map(|r| {
            format!("{},{},{:e},{:e}", r.step, r.forward_passes, r.objective, r.accuracy)
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for row in self.csv_rows() {
            let _ = writeln!(out, "{row}");
        }
        out
    }

    /// First recorded row with objective at or below `target`.
    pub fn first_reaching(&self, target: f64) -> Option<&HistoryRow> {
        self.rows.iter().find(|r| r.objective <= target)
    }

    pub fn last(&self) -> Option<&HistoryRow> {
        self.rows.last()
    }
}

/// `c · p` indices: `p` distinct samples from each of `c` distinct classes,
/// drawn uniformly among classes that have at least `p` samples.
pub fn compose_batch(dataset: &Dataset, c: usize, p: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if c == 0 || p == 0 {
        return invalid("batch needs c > 0 and p > 0");
    }
    let members = dataset.class_members();
    let eligible: Vec<usize> = (0..members.len()).filter(|&k| members[k].len() >= p).collect();
    if eligible.len() < c {
        return invalid(format!(
            "only {} classes have at least {p} samples; {c} needed",
            eligible.len()
        ));
    }
    let mut batch = Vec::with_capacity(c * p);
    for class in rng.choose_k(&eligible, c)? {
        batch.extend(rng.choose_k(&members[class], p)?);
    }
    Ok(batch)
}

/// `z ← z − lr · grad` over all parameters including θ.
pub fn sgd_step(state: &mut EmbeddingState, grad: &GradientEstimate, lr: f64) -> Result<()> {
    check_dim(state.num_params(), grad.grad.len())?;
    let n = state.weights.len();
    state
        .weights
        .iter_mut()
        .zip(&grad.grad[..n])
        .for_each(|(w, g)| *w -= lr * g);
    state.theta -= lr * grad.grad[n];
    Ok(())
}

/// Fraction of ordered pairs where `d² < threshold` agrees with whether the
/// pair shares a class. The threshold defaults to the state's θ.
pub fn eval_pair_accuracy(state: &EmbeddingState, dataset: &Dataset, threshold: Option<f64>) -> Result<f64> {
    let m = dataset.len();
    if m < 2 {
        return invalid("accuracy needs at least two samples");
    }
    let theta = threshold.unwrap_or(state.theta);
    let sigs = signatures(state, dataset)?;
    let mut correct = 0usize;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                let close = sq_dist_unchecked(&sigs[i], &sigs[j]) < theta;
                let same = dataset.label(i) == dataset.label(j);
                correct += usize::from(close == same);
            }
        }
    }
    Ok(correct as f64 / (m * m - m) as f64)
}

/// Runs SGD from `state0`, reporting accuracy on the training set.
pub fn train(state0: &EmbeddingState, dataset: &Dataset, config: &TrainConfig) -> Result<(EmbeddingState, TrainHistory)> {
    train_with_holdout(state0, dataset, None, config)
}

/// Runs SGD from `state0`. Each step composes a class-balanced batch and
/// restricts the estimator to it: multibatch scores every pair in the batch,
/// pairwise draws `k/2` pairs from it. The full estimator ignores batching.
/// History rows report the objective on `dataset` and pair accuracy on
/// `holdout` when given, else on `dataset`.
pub fn train_with_holdout(
    state0: &EmbeddingState,
    dataset: &Dataset,
    holdout: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<(EmbeddingState, TrainHistory)> {
    config.validate()?;
    let mut state = state0.clone();
    let mut history = TrainHistory::default();
    let mut rng = Rng::new(config.seed);
    let mut forward_passes = 0usize;
    let k = config.k();
    for step in 1..=config.steps {
        let grad = match config.estimator {
            EstimatorKind::Full => full_gradient(&state, dataset, config.weighting)?,
            kind => {
                let batch = compose_batch(dataset, config.classes_per_batch, config.samples_per_class, &mut rng)?;
                if kind == EstimatorKind::Multibatch {
                    multibatch_gradient_for(&state, dataset, &batch, config.weighting)?
                } else {
                    pairwise_from_pool(&state, dataset, &batch, k, config.weighting, &mut rng)?
                }
            }
        };
        sgd_step(&mut state, &grad, config.lr_at(step))?;
        if !state.weights.is_finite() || !state.theta.is_finite() {
            return Err(Error::Diverged { step });
        }
        forward_passes += grad.meta.forward_passes;
        if step % config.eval_every == 0 || step == config.steps {
            let objective = full_objective(&state, dataset, config.weighting)?;
            let accuracy = eval_pair_accuracy(&state, holdout.unwrap_or(dataset), None)?;
            history.rows.push(HistoryRow {
                step,
                forward_passes,
                objective,
                accuracy,
            });
            if config.stop_below.is_some_and(|t| objective <= t) {
                break;
            }
        }
    }
    Ok((state, history))
}
