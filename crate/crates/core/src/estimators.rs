//! Gradient estimators for the all-pairs objective.
//!
//! All three estimators follow the same pattern: embed each involved sample
//! once, accumulate signature gradients over the pairs that use it, then run
//! a single backward pass per sample. Pair terms cost `O(d)` each; network
//! passes dominate, so an estimator touching `k` samples costs `k` forward
//! and `k` backward passes however many pairs it scores.

use std::fmt;
use std::str::FromStr;

use crate::data::Dataset;
use crate::embedding::EmbeddingState;
use crate::error::{invalid, Error, Result};
use crate::losses::{accumulate_pair_grad, PairLabel, Weighting};
use crate::tensor::{Rng, Vec64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EstimatorKind {
    /// Exact gradient over all `m² − m` ordered pairs.
    Full,
    /// Average over `k/2` i.i.d. ordered pairs.
    PairwiseMinibatch,
    /// All `k² − k` ordered pairs among `k` distinct samples.
    Multibatch,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [
        EstimatorKind::Full,
        EstimatorKind::PairwiseMinibatch,
        EstimatorKind::Multibatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Full => "full",
            EstimatorKind::PairwiseMinibatch => "pairwise",
            EstimatorKind::Multibatch => "multibatch",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(EstimatorKind::Full),
            "pairwise" => Ok(EstimatorKind::PairwiseMinibatch),
            "multibatch" => Ok(EstimatorKind::Multibatch),
            other => invalid(format!(
                "unknown estimator '{other}' (expected full, pairwise or multibatch)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EstimateMeta {
    pub kind: EstimatorKind,
    pub k: usize,
    /// Embedding forward passes spent on this estimate.
    pub forward_passes: usize,
}

/// Flat gradient in parameter order with the θ component last.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate {
    pub grad: Vec64,
    pub meta: EstimateMeta,
}

fn pair_mut(v: &mut [Vec64], a: usize, b: usize) -> (&mut Vec64, &mut Vec64) {
    debug_assert_ne!(a, b);
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

/// Gradient of the average loss over all ordered pairs among `members`,
/// θ component last.
fn all_pairs_gradient(
    state: &EmbeddingState,
    dataset: &Dataset,
    members: &[usize],
    weighting: Weighting,
) -> Result<Vec64> {
    let k = members.len();
    if k < 2 {
        return invalid("need at least two samples to form a pair");
    }
    let xs: Vec<&[f64]> = members.iter().map(|&i| &dataset.features(i)[..]).collect();
    let labels: Vec<usize> = members.iter().map(|&i| dataset.label(i)).collect();
    let weights = weighting.resolve(&labels);
    let (sigs, acts) = state.forward_batch(&xs)?;
    let d = state.spec.output_dim();
    let mut sig_grads = vec![Vec64::zeros(d); k];
    let mut dtheta = 0.0;
    for a in 0..k {
        for b in 0..k {
            if a == b {
                continue;
            }
            let y = PairLabel::of(labels[a], labels[b]);
            let (ga, gb) = pair_mut(&mut sig_grads, a, b);
            dtheta += accumulate_pair_grad(state.theta, &sigs[a], &sigs[b], y, weights.weight(y), ga, gb);
        }
    }
    let mut grad = state.backward_batch(&acts, &sig_grads)?;
    grad.0.push(dtheta);
    grad.scale(1.0 / (k * k - k) as f64);
    Ok(grad)
}

/// Exact gradient of the all-pairs objective.
pub fn full_gradient(
    state: &EmbeddingState,
    dataset: &Dataset,
    weighting: Weighting,
) -> Result<GradientEstimate> {
    let m = dataset.len();
    if m < 2 {
        return invalid("full gradient needs at least two samples");
    }
    let all: Vec<usize> = (0..m).collect();
    Ok(GradientEstimate {
        grad: all_pairs_gradient(state, dataset, &all, weighting)?,
        meta: EstimateMeta {
            kind: EstimatorKind::Full,
            k: m,
            forward_passes: m,
        },
    })
}

/// Multibatch gradient for an explicit set of distinct sample indices: the
/// gradient of the average loss over every ordered pair among them.
pub fn multibatch_gradient_for(
    state: &EmbeddingState,
    dataset: &Dataset,
    members: &[usize],
    weighting: Weighting,
) -> Result<GradientEstimate> {
    let k = members.len();
    if k < 2 {
        return invalid("multibatch needs k ≥ 2");
    }
    let mut sorted = members.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return invalid("multibatch members must be distinct");
    }
    if sorted[k - 1] >= dataset.len() {
        return invalid("multibatch member index out of range");
    }
    // L_π does not depend on the order of the sampled instances; sorting
    // fixes the summation order so k = m reproduces the full gradient bit
    // for bit.
    Ok(GradientEstimate {
        grad: all_pairs_gradient(state, dataset, &sorted, weighting)?,
        meta: EstimateMeta {
            kind: EstimatorKind::Multibatch,
            k,
            forward_passes: k,
        },
    })
}

/// Multibatch estimate: `k` distinct samples drawn uniformly (the first `k`
/// entries of a random permutation), scored on all `k² − k` ordered pairs.
pub fn multibatch_estimate(
    state: &EmbeddingState,
    dataset: &Dataset,
    k: usize,
    weighting: Weighting,
    rng: &mut Rng,
) -> Result<GradientEstimate> {
    if k < 2 || k > dataset.len() {
        return invalid(format!("multibatch needs 2 ≤ k ≤ m (k={k}, m={})", dataset.len()));
    }
    let members = rng.shuffle_k(dataset.len(), k)?;
    multibatch_gradient_for(state, dataset, &members, weighting)
}

/// Pairwise minibatch estimate over the whole dataset.
pub fn pairwise_estimate(
    state: &EmbeddingState,
    dataset: &Dataset,
    k: usize,
    weighting: Weighting,
    rng: &mut Rng,
) -> Result<GradientEstimate> {
    let pool: Vec<usize> = (0..dataset.len()).collect();
    pairwise_from_pool(state, dataset, &pool, k, weighting, rng)
}

/// Pairwise minibatch estimate restricted to `pool`: `k/2` ordered pairs
/// drawn i.i.d. (with replacement across pairs, two distinct members within
/// a pair), averaged. Both members of every pair are embedded, so the cost
/// is `k` forward passes. Balanced weights come from the pool composition.
pub fn pairwise_from_pool(
    state: &EmbeddingState,
    dataset: &Dataset,
    pool: &[usize],
    k: usize,
    weighting: Weighting,
    rng: &mut Rng,
) -> Result<GradientEstimate> {
    if k < 2 || k % 2 != 0 {
        return invalid(format!("pairwise estimator needs an even k ≥ 2 (k={k})"));
    }
    let n = pool.len();
    if n < 2 {
        return invalid("pairwise estimator needs at least two candidate samples");
    }
    if pool.iter().any(|&i| i >= dataset.len()) {
        return invalid("pool index out of range");
    }
    let pool_labels: Vec<usize> = pool.iter().map(|&i| dataset.label(i)).collect();
    let weights = weighting.resolve(&pool_labels);

    let npairs = k / 2;
    let mut slots = Vec::with_capacity(k);
    for _ in 0..npairs {
        let a = rng.below(n);
        let mut b = rng.below(n - 1);
        if b >= a {
            b += 1;
        }
        slots.push(pool[a]);
        slots.push(pool[b]);
    }
    let xs: Vec<&[f64]> = slots.iter().map(|&i| &dataset.features(i)[..]).collect();
    let (sigs, acts) = state.forward_batch(&xs)?;
    let d = state.spec.output_dim();
    let mut sig_grads = vec![Vec64::zeros(d); k];
    let mut dtheta = 0.0;
    for p in 0..npairs {
        let (a, b) = (2 * p, 2 * p + 1);
        let y = PairLabel::of(dataset.label(slots[a]), dataset.label(slots[b]));
        let (ga, gb) = pair_mut(&mut sig_grads, a, b);
        dtheta += accumulate_pair_grad(state.theta, &sigs[a], &sigs[b], y, weights.weight(y), ga, gb);
    }
    let mut grad = state.backward_batch(&acts, &sig_grads)?;
    grad.0.push(dtheta);
    grad.scale(1.0 / npairs as f64);
    Ok(GradientEstimate {
        grad,
        meta: EstimateMeta {
            kind: EstimatorKind::PairwiseMinibatch,
            k,
            forward_passes: k,
        },
    })
}

/// Dispatches on `kind`. `k` is ignored for [`EstimatorKind::Full`].
pub fn estimate(
    kind: EstimatorKind,
    state: &EmbeddingState,
    dataset: &Dataset,
    k: usize,
    weighting: Weighting,
    rng: &mut Rng,
) -> Result<GradientEstimate> {
    match kind {
        EstimatorKind::Full => full_gradient(state, dataset, weighting),
        EstimatorKind::PairwiseMinibatch => pairwise_estimate(state, dataset, k, weighting, rng),
        EstimatorKind::Multibatch => multibatch_estimate(state, dataset, k, weighting, rng),
    }
}
