//! Pairwise hinge loss with a global threshold, the all-pairs objective, and
//! the multiclass hinge loss together with the head construction that turns a
//! zero-loss metric embedding into a zero-loss multiclass classifier.

use crate::data::Dataset;
use crate::embedding::EmbeddingState;
use crate::error::{check_dim, invalid, Error, Result};
use crate::tensor::{sq_dist_unchecked, Mat64, Vec64};

/// `+1` for a same-class pair, `−1` otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairLabel {
    Same,
    NotSame,
}

impl PairLabel {
    pub fn of(a: usize, b: usize) -> Self {
        if a == b {
            PairLabel::Same
        } else {
            PairLabel::NotSame
        }
    }

    pub fn sign(self) -> f64 {
        match self {
            PairLabel::Same => 1.0,
            PairLabel::NotSame => -1.0,
        }
    }
}

/// Per-pair loss weights for same and not-same pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairWeighting {
    pub same_weight: f64,
    pub notsame_weight: f64,
}

impl PairWeighting {
    pub const UNIT: PairWeighting = PairWeighting {
        same_weight: 1.0,
        notsame_weight: 1.0,
    };

    pub fn new(same_weight: f64, notsame_weight: f64) -> Result<Self> {
        if !(same_weight >= 0.0 && notsame_weight >= 0.0) {
            return invalid("pair weights must be nonnegative");
        }
        if same_weight == 0.0 && notsame_weight == 0.0 {
            return invalid("pair weights cannot both be zero");
        }
        Ok(PairWeighting {
            same_weight,
            notsame_weight,
        })
    }

    pub fn weight(&self, label: PairLabel) -> f64 {
        match label {
            PairLabel::Same => self.same_weight,
            PairLabel::NotSame => self.notsame_weight,
        }
    }

    /// Weights that give same and not-same pairs equal aggregate mass over
    /// the ordered pairs of `labels`: same weight 1, not-same weight
    /// `#same / #not-same`. Falls back to unit weights when either kind of
    /// pair is absent.
    pub fn balanced(labels: &[usize]) -> Self {
        let (same, notsame) = count_ordered_pairs(labels);
        if same == 0 || notsame == 0 {
            return PairWeighting::UNIT;
        }
        PairWeighting {
            same_weight: 1.0,
            notsame_weight: same as f64 / notsame as f64,
        }
    }
}

/// How pair weights are chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Weighting {
    /// The same weights for every batch.
    Fixed(PairWeighting),
    /// [`PairWeighting::balanced`] over the realized batch. Estimators using
    /// this are no longer unbiased for a fixed-weight objective.
    Balanced,
}

impl Weighting {
    pub const UNIT: Weighting = Weighting::Fixed(PairWeighting::UNIT);

    pub fn resolve(&self, labels: &[usize]) -> PairWeighting {
        match self {
            Weighting::Fixed(w) => *w,
            Weighting::Balanced => PairWeighting::balanced(labels),
        }
    }
}

impl Default for Weighting {
    fn default() -> Self {
        Weighting::Balanced
    }
}

/// Counts of (same, not-same) ordered pairs `i ≠ j`.
pub fn count_ordered_pairs(labels: &[usize]) -> (usize, usize) {
    let n = labels.len();
    let mut per_class = std::collections::HashMap::<usize, usize>::new();
    for &l in labels {
        *per_class.entry(l).or_default() += 1;
    }
    let same: usize = per_class.values().map(|&c| c * c.saturating_sub(1)).sum();
    (same, n * n.saturating_sub(1) - same)
}

#[inline]
fn hinge_arg(theta: f64, d2: f64, y: PairLabel) -> f64 {
    1.0 - y.sign() * (theta - d2)
}

/// `weight · max(0, 1 − y (θ − ‖s_i − s_j‖²))`.
pub fn pair_loss(theta: f64, sig_i: &[f64], sig_j: &[f64], y: PairLabel, weight: f64) -> Result<f64> {
    check_dim(sig_i.len(), sig_j.len())?;
    Ok(weight * hinge_arg(theta, sq_dist_unchecked(sig_i, sig_j), y).max(0.0))
}

/// Gradient of [`pair_loss`] with respect to one signature pair and θ.
#[derive(Clone, Debug, PartialEq)]
pub struct PairGrad {
    pub dsig_i: Vec64,
    pub dsig_j: Vec64,
    pub dtheta: f64,
}

/// Subgradient of [`pair_loss`]; zero when the hinge is inactive, including
/// exactly at the kink.
pub fn pair_loss_grad(
    theta: f64,
    sig_i: &[f64],
    sig_j: &[f64],
    y: PairLabel,
    weight: f64,
) -> Result<PairGrad> {
    check_dim(sig_i.len(), sig_j.len())?;
    let d = sig_i.len();
    let mut g = PairGrad {
        dsig_i: Vec64::zeros(d),
        dsig_j: Vec64::zeros(d),
        dtheta: 0.0,
    };
    g.dtheta = accumulate_pair_grad(theta, sig_i, sig_j, y, weight, &mut g.dsig_i, &mut g.dsig_j);
    Ok(g)
}

/// Adds the pair's signature gradients into `acc_i`, `acc_j` and returns
/// its θ-gradient. Callers guarantee matching lengths.
#[inline]
pub(crate) fn accumulate_pair_grad(
    theta: f64,
    sig_i: &[f64],
    sig_j: &[f64],
    y: PairLabel,
    weight: f64,
    acc_i: &mut [f64],
    acc_j: &mut [f64],
) -> f64 {
    if weight == 0.0 || hinge_arg(theta, sq_dist_unchecked(sig_i, sig_j), y) <= 0.0 {
        return 0.0;
    }
    let c = 2.0 * weight * y.sign();
    for r in 0..sig_i.len() {
        let g = c * (sig_i[r] - sig_j[r]);
        acc_i[r] += g;
        acc_j[r] -= g;
    }
    -weight * y.sign()
}

/// Same/not-same criterion with margin 1 around the threshold.
pub fn sns_satisfied(theta: f64, sig_i: &[f64], sig_j: &[f64], same: bool) -> bool {
    let d2 = sq_dist_unchecked(sig_i, sig_j);
    if same {
        d2 < theta - 1.0
    } else {
        d2 > theta + 1.0
    }
}

/// Smallest `|1 − y(θ − d²)|` over ordered pairs; how far the objective is
/// from its nearest kink. Infinite for fewer than two signatures.
pub fn min_hinge_margin(theta: f64, sigs: &[Vec64], labels: &[usize]) -> Result<f64> {
    check_dim(sigs.len(), labels.len())?;
    let mut best = f64::INFINITY;
    for i in 0..sigs.len() {
        for j in 0..sigs.len() {
            if i != j {
                check_dim(sigs[i].len(), sigs[j].len())?;
                let y = PairLabel::of(labels[i], labels[j]);
                best = best.min(hinge_arg(theta, sq_dist_unchecked(&sigs[i], &sigs[j]), y).abs());
            }
        }
    }
    Ok(best)
}

/// Embeds every sample of `dataset`.
pub fn signatures(state: &EmbeddingState, dataset: &Dataset) -> Result<Vec<Vec64>> {
    dataset
        .samples()
        .iter()
        .map(|s| state.forward(&s.features))
        .collect()
}

/// Average pair loss over all ordered pairs `i ≠ j` of precomputed
/// signatures. Summation runs in index order.
pub fn objective_from_signatures(
    theta: f64,
    sigs: &[Vec64],
    labels: &[usize],
    weights: PairWeighting,
) -> Result<f64> {
    let m = sigs.len();
    check_dim(m, labels.len())?;
    if m < 2 {
        return invalid("objective needs at least two samples");
    }
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let y = PairLabel::of(labels[i], labels[j]);
            total += pair_loss(theta, &sigs[i], &sigs[j], y, weights.weight(y))?;
        }
    }
    Ok(total / (m * m - m) as f64)
}

/// Average pair loss over all ordered pairs of the dataset.
pub fn full_objective(state: &EmbeddingState, dataset: &Dataset, weighting: Weighting) -> Result<f64> {
    if dataset.len() < 2 {
        return invalid("objective needs at least two samples");
    }
    let labels = dataset.labels();
    let sigs = signatures(state, dataset)?;
    objective_from_signatures(state.theta, &sigs, &labels, weighting.resolve(&labels))
}

/// Per-class linear scorer: row `t` of `w` and entry `t` of `b` score class `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct MulticlassHead {
    pub w: Mat64,
    pub b: Vec64,
}

impl MulticlassHead {
    pub fn new(w: Mat64, b: Vec64) -> Result<Self> {
        check_dim(w.rows(), b.len())?;
        Ok(MulticlassHead { w, b })
    }

    pub fn num_classes(&self) -> usize {
        self.w.rows()
    }

    fn score(&self, t: usize, s: &[f64]) -> f64 {
        self.w.row(t).iter().zip(s).map(|(a, x)| a * x).sum::<f64>() + self.b[t]
    }
}

/// `Σ_i max_t (1[t ≠ y_i] + W_t·s_i + b_t − W_{y_i}·s_i − b_{y_i})`.
pub fn multiclass_hinge(head: &MulticlassHead, sigs: &[Vec64], labels: &[usize]) -> Result<f64> {
    check_dim(sigs.len(), labels.len())?;
    let n = head.num_classes();
    let mut total = 0.0;
    for (s, &y) in sigs.iter().zip(labels) {
        if y >= n {
            return Err(Error::LabelOutOfRange { label: y, num_classes: n });
        }
        check_dim(head.w.cols(), s.len())?;
        let correct = head.score(y, s);
        let worst = (0..n)
            .map(|t| {
                let margin = if t == y { 0.0 } else { 1.0 };
                margin + head.score(t, s) - correct
            })
            .fold(f64::NEG_INFINITY, f64::max);
        total += worst;
    }
    Ok(total)
}

/// Class-mean head: `W_k` is the mean signature of class `k` and
/// `b_k = −(1 / 2|C_k|) Σ_{i∈C_k} ‖s_i‖²`. Scores then rank classes by mean
/// squared distance, so any embedding satisfying the same/not-same margins
/// has zero multiclass hinge loss under this head.
pub fn construct_multiclass_head(sigs: &[Vec64], labels: &[usize]) -> Result<MulticlassHead> {
    check_dim(sigs.len(), labels.len())?;
    let Some(first) = sigs.first() else {
        return invalid("head construction needs at least one signature");
    };
    let d = first.len();
    let n = labels.iter().max().map_or(0, |&l| l + 1);
    let mut rows = vec![Vec64::zeros(d); n];
    let mut b = Vec64::zeros(n);
    let mut counts = vec![0usize; n];
    for (s, &y) in sigs.iter().zip(labels) {
        check_dim(d, s.len())?;
        rows[y].axpy(1.0, s)?;
        b[y] += s.norm_sq();
        counts[y] += 1;
    }
    for k in 0..n {
        if counts[k] == 0 {
            return Err(Error::EmptyClass(k));
        }
        let c = counts[k] as f64;
        rows[k].scale(1.0 / c);
        b[k] *= -1.0 / (2.0 * c);
    }
    MulticlassHead::new(Mat64::from_rows(&rows)?, b)
}
