//! Variance measurements for the gradient estimators.
//!
//! The central object is the [`PairGradTable`]: the exact gradient of every
//! ordered pair loss at a fixed parameter point. Writing
//! `A_ij = ∇ℓ_ij − ∇L` for the centered pair gradients, the table yields
//!
//! * `ν²`, the variance of the single-pair estimator (mean of `‖A_ij‖²`);
//! * the row term `Σ_r mean_i (Ā_i^(r))²` with `Ā_i = mean_{j≠i} A_ij`;
//! * the multibatch bound `ν²/(k² − k) + (c3/k) · row term`;
//! * the exact multibatch variance, by enumerating every `k`-subset;
//! * a split of that variance by how the two pairs of a product share
//!   indices (see [`decomposition_diagnostic`]).
//!
//! Monte-Carlo measurements of the estimators themselves live in
//! [`VarianceSetup`].

use rayon::prelude::*;

use crate::data::Dataset;
use crate::embedding::EmbeddingState;
use crate::error::{check_dim, invalid, Error, Result};
use crate::estimators::{estimate, full_gradient, EstimatorKind};
use crate::losses::{accumulate_pair_grad, PairLabel, Weighting};
use crate::tensor::{Rng, Vec64};

/// Largest dataset [`build_pair_grad_table`] accepts by default.
pub const DEFAULT_TABLE_LIMIT: usize = 200;

/// Above this many ordered `k`-subsequences, enumeration gives way to sampling.
pub const EXHAUSTIVE_LIMIT: u64 = 1_000_000;

/// Default constant on the `1/k` term of the multibatch bound.
pub const DEFAULT_C3: f64 = 4.0;

/// Exact per-pair gradients for every ordered pair `(i, j)`, `i ≠ j`.
#[derive(Clone, Debug)]
pub struct PairGradTable {
    m: usize,
    dim: usize,
    // Row-major: pair (i, j) lives at row pair_index(i, j).
    grads: Vec<f64>,
    full: Vec64,
}

impl PairGradTable {
    /// Builds a table from explicit pair gradients, listed in the order
    /// `(0,1), (0,2), …, (0,m−1), (1,0), (1,2), …`. The full gradient is
    /// their mean.
    pub fn from_pair_grads(m: usize, grads: &[Vec64]) -> Result<Self> {
        if m < 2 {
            return invalid("pair table needs m ≥ 2");
        }
        check_dim(m * (m - 1), grads.len())?;
        let dim = grads[0].len();
        let mut flat = Vec::with_capacity(grads.len() * dim);
        for g in grads {
            check_dim(dim, g.len())?;
            flat.extend_from_slice(g);
        }
        Ok(Self::from_flat(m, dim, flat))
    }

    fn from_flat(m: usize, dim: usize, grads: Vec<f64>) -> Self {
        let n = m * (m - 1);
        let mut full = Vec64::zeros(dim);
        for row in grads.chunks_exact(dim) {
            full.iter_mut().zip(row).for_each(|(f, g)| *f += g);
        }
        full.scale(1.0 / n as f64);
        PairGradTable { m, dim, grads, full }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Length of each gradient (parameters plus θ).
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_pairs(&self) -> usize {
        self.m * (self.m - 1)
    }

    /// Mean of the table, i.e. the full gradient.
    pub fn full(&self) -> &Vec64 {
        &self.full
    }

    #[inline]
    fn pair_index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i != j && i < self.m && j < self.m);
        i * (self.m - 1) + if j < i { j } else { j - 1 }
    }

    /// `∇ℓ_ij`.
    pub fn grad(&self, i: usize, j: usize) -> &[f64] {
        let r = self.pair_index(i, j);
        &self.grads[r * self.dim..(r + 1) * self.dim]
    }

    /// `A_ij = ∇ℓ_ij − ∇L`.
    pub fn centered(&self, i: usize, j: usize) -> Vec64 {
        self.grad(i, j)
            .iter()
            .zip(self.full.iter())
            .map(|(g, f)| g - f)
            .collect::<Vec<_>>()
            .into()
    }

    fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let m = self.m;
        (0..m).flat_map(move |i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)))
    }
}

/// [`build_pair_grad_table_with_limit`] with [`DEFAULT_TABLE_LIMIT`].
pub fn build_pair_grad_table(
    state: &EmbeddingState,
    dataset: &Dataset,
    weighting: Weighting,
) -> Result<PairGradTable> {
    build_pair_grad_table_with_limit(state, dataset, weighting, DEFAULT_TABLE_LIMIT)
}

/// Embeds every sample once and backpropagates each pair's signature
/// gradients through the cached activations. Balanced weighting resolves
/// against the whole dataset.
pub fn build_pair_grad_table_with_limit(
    state: &EmbeddingState,
    dataset: &Dataset,
    weighting: Weighting,
    limit: usize,
) -> Result<PairGradTable> {
    let m = dataset.len();
    if m < 2 {
        return invalid("pair table needs m ≥ 2");
    }
    if m > limit {
        return Err(Error::TableTooLarge { m, limit });
    }
    let labels = dataset.labels();
    let weights = weighting.resolve(&labels);
    let xs: Vec<&[f64]> = dataset.samples().iter().map(|s| &s.features[..]).collect();
    let (sigs, acts) = state.forward_batch(&xs)?;
    let d = state.spec.output_dim();
    let nw = state.spec.num_weights();
    let dim = nw + 1;
    let mut grads = vec![0.0; m * (m - 1) * dim];
    let row_of = |i: usize, j: usize| i * (m - 1) + if j < i { j } else { j - 1 };
    let mut gi = vec![0.0; d];
    let mut gj = vec![0.0; d];
    for i in 0..m {
        for j in (i + 1)..m {
            gi.iter_mut().for_each(|x| *x = 0.0);
            gj.iter_mut().for_each(|x| *x = 0.0);
            let y = PairLabel::of(labels[i], labels[j]);
            let dtheta = accumulate_pair_grad(state.theta, &sigs[i], &sigs[j], y, weights.weight(y), &mut gi, &mut gj);
            let r = row_of(i, j);
            {
                let row = &mut grads[r * dim..(r + 1) * dim];
                state.backward_sample(&acts, i, &gi, &mut row[..nw])?;
                state.backward_sample(&acts, j, &gj, &mut row[..nw])?;
                row[nw] = dtheta;
            }
            // The pair loss is symmetric, so (j, i) has the same gradient.
            grads.copy_within(r * dim..(r + 1) * dim, row_of(j, i) * dim);
        }
    }
    Ok(PairGradTable::from_flat(m, dim, grads))
}

/// `ν² = mean_{i≠j} ‖∇ℓ_ij − ∇L‖²`, the variance of the one-pair estimator.
pub fn vanilla_variance(table: &PairGradTable) -> f64 {
    let full = table.full();
    let total: f64 = table
        .pairs()
        .map(|(i, j)| {
            table
                .grad(i, j)
                .iter()
                .zip(full.iter())
                .map(|(g, f)| (g - f) * (g - f))
                .sum::<f64>()
        })
        .sum();
    total / table.num_pairs() as f64
}

/// `Σ_r mean_i (Ā_i^(r))²` with `Ā_i = mean_{j≠i} (∇ℓ_ij − ∇L)`.
pub fn abar_term(table: &PairGradTable) -> f64 {
    let m = table.m();
    let full = table.full();
    let mut total = 0.0;
    let mut row = vec![0.0; table.dim()];
    for i in 0..m {
        row.iter_mut().for_each(|x| *x = 0.0);
        for j in (0..m).filter(|&j| j != i) {
            row.iter_mut().zip(table.grad(i, j)).for_each(|(r, g)| *r += g);
        }
        total += row
            .iter()
            .zip(full.iter())
            .map(|(r, f)| {
                let a = r / (m - 1) as f64 - f;
                a * a
            })
            .sum::<f64>();
    }
    total / m as f64
}

/// `ν²/(k² − k) + (c3/k) · abar`.
pub fn bound_from_terms(vanilla: f64, abar: f64, k: usize, c3: f64) -> f64 {
    let k = k as f64;
    vanilla / (k * k - k) + c3 / k * abar
}

/// Upper bound on the multibatch variance at batch size `k`.
pub fn theorem1_bound(table: &PairGradTable, k: usize, c3: f64) -> Result<f64> {
    if k < 2 {
        return invalid("bound needs k ≥ 2");
    }
    Ok(bound_from_terms(vanilla_variance(table), abar_term(table), k, c3))
}

/// `2ν²/(k² − k) + 4(k − 2)/(k(k − 1)) · abar`.
///
/// Pair gradients are symmetric, so each subsequence also scores the
/// reversed pair `(j, i)`, which doubles the first term of
/// [`theorem1_bound`]. Every index tuple sharing exactly one sample is
/// bounded by `abar`, giving the second term. The remaining all-distinct
/// tuples are dropped, so the bound is exact for `k ≤ 3` and holds for
/// larger `k` whenever their contribution is nonpositive.
pub fn reversed_pair_bound(table: &PairGradTable, k: usize) -> Result<f64> {
    if k < 2 {
        return invalid("bound needs k ≥ 2");
    }
    let kf = k as f64;
    let pairs = kf * kf - kf;
    Ok(2.0 * vanilla_variance(table) / pairs + 4.0 * (kf - 2.0) / pairs * abar_term(table))
}

/// `m! / (m − k)!`, or `None` on overflow.
pub fn ordered_subsequence_count(m: usize, k: usize) -> Option<u64> {
    if k > m {
        return Some(0);
    }
    ((m - k + 1)..=m).try_fold(1u64, |acc, x| acc.checked_mul(x as u64))
}

/// Lexicographic `k`-subsets of `0..m`.
pub struct Combinations {
    idx: Vec<usize>,
    m: usize,
    done: bool,
}

impl Combinations {
    pub fn new(m: usize, k: usize) -> Self {
        Combinations {
            idx: (0..k).collect(),
            m,
            done: k > m,
        }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.idx.clone();
        let k = self.idx.len();
        let mut i = k;
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            if self.idx[i] < self.m - k + i {
                self.idx[i] += 1;
                for j in i + 1..k {
                    self.idx[j] = self.idx[j - 1] + 1;
                }
                break;
            }
        }
        Some(out)
    }
}

fn multibatch_mean_for(table: &PairGradTable, members: &[usize], out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    for &a in members {
        for &b in members {
            if a != b {
                out.iter_mut().zip(table.grad(a, b)).for_each(|(o, g)| *o += g);
            }
        }
    }
    let k = members.len() as f64;
    out.iter_mut().for_each(|x| *x /= k * k - k);
}

fn deviation_sq(g: &[f64], full: &[f64]) -> f64 {
    g.iter().zip(full).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Exact `E_π ‖∇L_π − ∇L‖²`, averaging over every `k`-subset of the table's
/// samples. Each subset stands for the `k!` ordered subsequences that share
/// it, so this equals the average over ordered subsequences.
pub fn multibatch_variance_exact(table: &PairGradTable, k: usize) -> Result<f64> {
    let m = table.m();
    if k < 2 || k > m {
        return invalid(format!("need 2 ≤ k ≤ m (k={k}, m={m})"));
    }
    match ordered_subsequence_count(m, k) {
        Some(n) if n <= EXHAUSTIVE_LIMIT => {}
        _ => return invalid("too many subsequences for exhaustive enumeration"),
    }
    let mut buf = vec![0.0; table.dim()];
    let mut total = 0.0;
    let mut count = 0usize;
    for members in Combinations::new(m, k) {
        multibatch_mean_for(table, &members, &mut buf);
        total += deviation_sq(&buf, table.full());
        count += 1;
    }
    Ok(total / count as f64)
}

/// Mean of `∇L_π` over every `k`-subset; equals the full gradient when the
/// estimator is unbiased.
pub fn multibatch_mean_exact(table: &PairGradTable, k: usize) -> Result<Vec64> {
    let m = table.m();
    if k < 2 || k > m {
        return invalid(format!("need 2 ≤ k ≤ m (k={k}, m={m})"));
    }
    let mut buf = vec![0.0; table.dim()];
    let mut mean = Vec64::zeros(table.dim());
    let mut count = 0usize;
    for members in Combinations::new(m, k) {
        multibatch_mean_for(table, &members, &mut buf);
        mean.axpy(1.0, &buf)?;
        count += 1;
    }
    mean.scale(1.0 / count as f64);
    Ok(mean)
}

/// Split of the multibatch variance by index sharing between the two pairs
/// `(i, j)` and `(s, t)` of each product `A_{π(i)π(j)} · A_{π(s)π(t)}`:
///
/// * `i1`: the same pair, `i = s` and `j = t`;
/// * `i2`: four distinct indices;
/// * `i3`: everything else, namely exactly one shared index in any position
///   and the reversed pair `i = t`, `j = s`.
///
/// Each term already carries the `1/(k² − k)²` factor, so the three sum to
/// the variance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decomposition {
    pub i1_term: f64,
    pub i2_term: f64,
    pub i3_term: f64,
    /// Whether every subset was enumerated (otherwise a Monte-Carlo mean).
    pub exhaustive: bool,
    /// Subsets evaluated.
    pub subsets: usize,
}

impl Decomposition {
    pub fn total(&self) -> f64 {
        self.i1_term + self.i2_term + self.i3_term
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Partition sums for one subset, before the `1/(k² − k)²` factor.
fn partition_sums(table: &PairGradTable, members: &[usize]) -> [f64; 3] {
    let k = members.len();
    let dim = table.dim();
    let a: Vec<Vec<Option<Vec64>>> = members
        .iter()
        .map(|&p| {
            members
                .iter()
                .map(|&q| (p != q).then(|| table.centered(p, q)))
                .collect()
        })
        .collect();
    let at = |i: usize, j: usize| a[i][j].as_ref().expect("off-diagonal");

    if k <= 8 {
        // Direct walk over every index tuple.
        let mut sums = [0.0; 3];
        for i in 0..k {
            for j in (0..k).filter(|&j| j != i) {
                for s in 0..k {
                    for t in (0..k).filter(|&t| t != s) {
                        let v = dot(at(i, j), at(s, t));
                        let q = if i == s && j == t {
                            0
                        } else if i != s && i != t && j != s && j != t {
                            1
                        } else {
                            2
                        };
                        sums[q] += v;
                    }
                }
            }
        }
        return sums;
    }

    // Inclusion-exclusion over shared positions, O(k² · dim).
    let mut row = vec![Vec64::zeros(dim); k];
    let mut col = vec![Vec64::zeros(dim); k];
    let mut total = Vec64::zeros(dim);
    let mut same = 0.0;
    let mut reversed = 0.0;
    for i in 0..k {
        for j in (0..k).filter(|&j| j != i) {
            let v = at(i, j);
            row[i].axpy(1.0, v).expect("dims match");
            col[j].axpy(1.0, v).expect("dims match");
            total.axpy(1.0, v).expect("dims match");
            same += v.norm_sq();
            reversed += dot(v, at(j, i));
        }
    }
    let share_first: f64 = row.iter().map(|r| r.norm_sq()).sum::<f64>() - same;
    let share_second: f64 = col.iter().map(|c| c.norm_sq()).sum::<f64>() - same;
    let crossed: f64 = row.iter().zip(&col).map(|(r, c)| dot(r, c)).sum::<f64>() - reversed;
    let i3 = reversed + share_first + share_second + 2.0 * crossed;
    [same, total.norm_sq() - same - i3, i3]
}

/// Splits the multibatch variance at batch size `k` into the three index
/// classes of [`Decomposition`]. Enumerates all subsets when there are at
/// most [`EXHAUSTIVE_LIMIT`] ordered subsequences, otherwise averages
/// `trials` random subsets.
pub fn decomposition_diagnostic(
    table: &PairGradTable,
    k: usize,
    rng: &mut Rng,
    trials: usize,
) -> Result<Decomposition> {
    decomposition_with_limit(table, k, rng, trials, EXHAUSTIVE_LIMIT)
}

/// [`decomposition_diagnostic`] with an explicit enumeration limit.
pub fn decomposition_with_limit(
    table: &PairGradTable,
    k: usize,
    rng: &mut Rng,
    trials: usize,
    exhaustive_limit: u64,
) -> Result<Decomposition> {
    let m = table.m();
    if k < 2 || k > m {
        return invalid(format!("need 2 ≤ k ≤ m (k={k}, m={m})"));
    }
    let exhaustive = matches!(ordered_subsequence_count(m, k), Some(n) if n <= exhaustive_limit);
    let mut acc = [0.0; 3];
    let mut subsets = 0usize;
    let mut add = |members: &[usize]| {
        let s = partition_sums(table, members);
        acc.iter_mut().zip(s).for_each(|(a, v)| *a += v);
        subsets += 1;
    };
    if exhaustive {
        Combinations::new(m, k).for_each(|c| add(&c));
    } else {
        if trials == 0 {
            return invalid("sampled decomposition needs trials > 0");
        }
        for _ in 0..trials {
            add(&rng.shuffle_k(m, k)?);
        }
    }
    let kk = (k * k - k) as f64;
    let norm = 1.0 / (kk * kk * subsets as f64);
    Ok(Decomposition {
        i1_term: acc[0] * norm,
        i2_term: acc[1] * norm,
        i3_term: acc[2] * norm,
        exhaustive,
        subsets,
    })
}

/// Outcome of [`lemma1_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lemma1 {
    /// `mean_{s≠t} v_s v_t`
    pub lhs: f64,
    /// `(mean_i v_i)²`
    pub rhs: f64,
    pub holds: bool,
}

/// Checks `mean_{s≠t} v_s v_t ≤ (mean v)²` (up to 1e-12).
pub fn lemma1_check(v: &[f64]) -> Result<Lemma1> {
    let n = v.len();
    if n < 2 {
        return invalid("lemma check needs at least two entries");
    }
    let mut cross = 0.0;
    for s in 0..n {
        for t in 0..n {
            if s != t {
                cross += v[s] * v[t];
            }
        }
    }
    let lhs = cross / (n * n - n) as f64;
    let mean = v.iter().sum::<f64>() / n as f64;
    let rhs = mean * mean;
    Ok(Lemma1 {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-12,
    })
}

/// Least-squares slope of `ln(variance)` against `ln(k)`.
pub fn variance_slope(points: &[(usize, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return invalid("slope needs at least two points");
    }
    if let Some(&(k, v)) = points.iter().find(|&&(k, v)| !(v > 0.0) || k == 0) {
        return invalid(format!("nonpositive point (k={k}, variance={v})"));
    }
    let xs: Vec<f64> = points.iter().map(|&(k, _)| (k as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, v)| v.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return invalid("slope needs at least two distinct k");
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

/// One row of a variance scan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceReport {
    pub estimator: EstimatorKind,
    pub k: usize,
    pub trials: usize,
    /// `mean_t ‖ĝ_t − ∇L‖²`
    pub empirical_variance: f64,
    /// Standard error of `empirical_variance`.
    pub std_error: f64,
    pub vanilla_variance: f64,
    pub abar_term: f64,
    /// Multibatch: the bound at `c3`. Pairwise: its exact variance `2ν²/k`.
    /// Full: 0.
    pub bound_value: f64,
}

impl VarianceReport {
    pub const CSV_HEADER: &'static str =
        "estimator,k,trials,empirical_variance,vanilla_variance,abar_term,bound_value";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:e},{:e},{:e},{:e}",
            self.estimator,
            self.k,
            self.trials,
            self.empirical_variance,
            self.vanilla_variance,
            self.abar_term,
            self.bound_value
        )
    }
}

/// A fixed `(state, dataset, weighting)` with its exact gradient and pair
/// table, ready for repeated variance measurements.
pub struct VarianceSetup<'a> {
    state: &'a EmbeddingState,
    dataset: &'a Dataset,
    weighting: Weighting,
    full: Vec64,
    vanilla: f64,
    abar: f64,
    pub c3: f64,
}

impl<'a> VarianceSetup<'a> {
    pub fn new(state: &'a EmbeddingState, dataset: &'a Dataset, weighting: Weighting) -> Result<Self> {
        if matches!(weighting, Weighting::Balanced) {
            return invalid("variance against a fixed objective needs fixed pair weights");
        }
        let table = build_pair_grad_table(state, dataset, weighting)?;
        let full = full_gradient(state, dataset, weighting)?.grad;
        Ok(VarianceSetup {
            state,
            dataset,
            weighting,
            full,
            vanilla: vanilla_variance(&table),
            abar: abar_term(&table),
            c3: DEFAULT_C3,
        })
    }

    pub fn full_gradient(&self) -> &Vec64 {
        &self.full
    }

    pub fn vanilla_variance(&self) -> f64 {
        self.vanilla
    }

    pub fn abar_term(&self) -> f64 {
        self.abar
    }

    /// Runs `trials` independent estimates. Trial `t` uses the generator
    /// seeded with `seed ^ t`; trials may run on any rayon pool and are
    /// reduced in trial order, so results do not depend on thread count.
    pub fn report(&self, kind: EstimatorKind, k: usize, trials: usize, seed: u64) -> Result<VarianceReport> {
        if trials < 2 {
            return invalid("variance needs at least two trials");
        }
        let devs: Vec<f64> = (0..trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = Rng::new(seed ^ t as u64);
                estimate(kind, self.state, self.dataset, k, self.weighting, &mut rng)
                    .map(|g| deviation_sq(&g.grad, &self.full))
            })
            .collect::<Result<_>>()?;
        let n = trials as f64;
        let mean = devs.iter().sum::<f64>() / n;
        let var = devs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
        let bound_value = match kind {
            EstimatorKind::Full => 0.0,
            EstimatorKind::PairwiseMinibatch => 2.0 * self.vanilla / k as f64,
            EstimatorKind::Multibatch => bound_from_terms(self.vanilla, self.abar, k, self.c3),
        };
        Ok(VarianceReport {
            estimator: kind,
            k,
            trials,
            empirical_variance: mean,
            std_error: (var / n).sqrt(),
            vanilla_variance: self.vanilla,
            abar_term: self.abar,
            bound_value,
        })
    }
}

/// One-shot form of [`VarianceSetup::report`].
pub fn empirical_variance(
    kind: EstimatorKind,
    state: &EmbeddingState,
    dataset: &Dataset,
    k: usize,
    trials: usize,
    seed: u64,
    weighting: Weighting,
) -> Result<VarianceReport> {
    VarianceSetup::new(state, dataset, weighting)?.report(kind, k, trials, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussian_clusters, ClusterSpec};
    use crate::embedding::ModelSpec;

    fn setup(classes: usize, per: usize, seed: u64) -> (EmbeddingState, Dataset) {
        let ds = gen_gaussian_clusters(
            &ClusterSpec { num_classes: classes, per_class: per, dim: 3, center_scale: 1.0, noise_sigma: 0.6 },
            seed,
        )
        .unwrap();
        let st = EmbeddingState::init(ModelSpec::mlp(&[3, 4, 2]).unwrap(), &mut Rng::new(seed * 31 + 1)).unwrap();
        (st, ds)
    }

    fn brute_force_decomposition(table: &PairGradTable, k: usize) -> [f64; 3] {
        // Independent oracle: enumerate ordered subsequences and every index tuple.
        let m = table.m();
        let mut sums = [0.0; 3];
        let mut count = 0.0;
        let mut seq = Vec::new();
        fn rec(m: usize, k: usize, seq: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
            if seq.len() == k {
                f(seq);
                return;
            }
            for x in 0..m {
                if !seq.contains(&x) {
                    seq.push(x);
                    rec(m, k, seq, f);
                    seq.pop();
                }
            }
        }
        rec(m, k, &mut seq, &mut |p: &[usize]| {
            count += 1.0;
            for i in 0..k {
                for j in 0..k {
                    for s in 0..k {
                        for t in 0..k {
                            if i == j || s == t {
                                continue;
                            }
                            let v = table.centered(p[i], p[j]).dot(&table.centered(p[s], p[t])).unwrap();
                            let shared = [i == s, i == t, j == s, j == t];
                            let q = if i == s && j == t {
                                0
                            } else if !shared.iter().any(|&b| b) {
                                1
                            } else {
                                2
                            };
                            sums[q] += v;
                        }
                    }
                }
            }
        });
        let kk = (k * k - k) as f64;
        sums.map(|s| s / (kk * kk * count))
    }

    #[test]
    fn table_mean_is_full_gradient() {
        let (st, ds) = setup(2, 3, 3);
        let table = build_pair_grad_table(&st, &ds, Weighting::UNIT).unwrap();
        let full = full_gradient(&st, &ds, Weighting::UNIT).unwrap();
        for (a, b) in table.full().iter().zip(full.grad.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn centered_table_has_zero_mean() {
        let (st, ds) = setup(2, 2, 4);
        let table = build_pair_grad_table(&st, &ds, Weighting::UNIT).unwrap();
        let mut sum = Vec64::zeros(table.dim());
        for (i, j) in table.pairs() {
            sum.axpy(1.0, &table.centered(i, j)).unwrap();
        }
        assert!(sum.iter().all(|x| x.abs() < 1e-14));
    }

    #[test]
    fn inactive_state_gives_zero_table() {
        let ds = Dataset::from_parts(
            vec![vec![0.0, 0.0].into(), vec![0.1, 0.0].into(), vec![5.0, 0.0].into()],
            vec![0, 0, 1],
        )
        .unwrap();
        let st = EmbeddingState::identity(2, 3.0).unwrap();
        let table = build_pair_grad_table(&st, &ds, Weighting::UNIT).unwrap();
        assert!(table.grads.iter().all(|&x| x == 0.0));
        assert_eq!(vanilla_variance(&table), 0.0);
        assert_eq!(abar_term(&table), 0.0);
    }

    #[test]
    fn table_guard() {
        let (st, ds) = setup(2, 3, 5);
        assert!(matches!(
            build_pair_grad_table_with_limit(&st, &ds, Weighting::UNIT, 5),
            Err(Error::TableTooLarge { m: 6, limit: 5 })
        ));
    }

    #[test]
    fn vanilla_variance_cases() {
        let same = vec![Vec64::from(vec![1.0, 2.0]); 2];
        assert_eq!(vanilla_variance(&PairGradTable::from_pair_grads(2, &same).unwrap()), 0.0);
        let g = Vec64::from(vec![3.0, 4.0]);
        let opp = vec![g.clone(), Vec64::from(vec![-3.0, -4.0])];
        assert_eq!(vanilla_variance(&PairGradTable::from_pair_grads(2, &opp).unwrap()), 25.0);

        let (st, ds) = setup(3, 2, 6);
        let table = build_pair_grad_table(&st, &ds, Weighting::UNIT).unwrap();
        let mut brute = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                if i != j {
                    brute += table.centered(i, j).norm_sq();
                }
            }
        }
        assert!((vanilla_variance(&table) - brute / 30.0).abs() < 1e-15);
    }

    #[test]
    fn abar_cases() {
        let zero = vec![Vec64::zeros(3); 12];
        assert_eq!(abar_term(&PairGradTable::from_pair_grads(4, &zero).unwrap()), 0.0);

        // Rows with zero mean: for m = 3, row i holds (+g, −g).
        let g = Vec64::from(vec![1.0, -2.0]);
        let neg = Vec64::from(vec![-1.0, 2.0]);
        let rows = vec![g.clone(), neg.clone(), g.clone(), neg.clone(), g, neg];
        assert_eq!(abar_term(&PairGradTable::from_pair_grads(3, &rows).unwrap()), 0.0);

        let (st, ds) = setup(2, 3, 8);
        let ds = Dataset::new(ds.samples()[..5].to_vec()).unwrap();
        let table = build_pair_grad_table(&st, &ds, Weighting::UNIT).unwrap();
        let mut brute = 0.0;
        for r in 0..table.dim() {
            for i in 0..5 {
                let mut a = 0.0;
                for j in 0..5 {
                    if j != i {
                        a += table.grad(i, j)[r] - table.full()[r];
                    }
                }
                a /= 4.0;
                brute += a * a / 5.0;
            }
        }
        assert!((abar_term(&table) - brute).abs() < 1e-15);
    }

    #[test]
    fn bound_arithmetic() {
        assert_eq!(bound_from_terms(6.0, 0.0, 3, DEFAULT_C3), 1.0);
        assert_eq!(bound_from_terms(3.0, 0.5, 2, DEFAULT_C3), 1.5 + 1.0);
        let t = PairGradTable::from_pair_grads(2, &[Vec64::from(vec![1.0]), Vec64::from(vec![1.0])]).unwrap();
        assert!(theorem1_bound(&t, 1, DEFAULT_C3).is_err());
    }

    #[test]
    fn reversed_pair_bound_holds_where_c3_bound_fails() {
        let mut violated = 0;
        for seed in 0..5 {
            let (st, ds) = setup(2, 4, 100 + seed);
            let table = build_pair_grad_table(&st, &ds, Weighting::UNIT).unwrap();
            let var = multibatch_variance_exact(&table, 3).unwrap();
            let rp = reversed_pair_bound(&table, 3).unwrap();
            assert!(var <= rp * (1.0 + 1e-12), "seed {seed}: {var} > {rp}");
            if var > theorem1_bound(&table, 3, DEFAULT_C3).unwrap() {
                violated += 1;
            }
        }
        // With ν² well above abar the c3 = 4 form undercounts reversed pairs.
        assert!(violated > 0);
    }

    #[test]
    fn reversed_pair_bound_is_tight_at_k2() {
        let (st, ds) = setup(2, 3, 12);
        let table = build_pair_grad_table(&st, &ds, Weighting::UNIT).unwrap();
        let var = multibatch_variance_exact(&table, 2).unwrap();
        let rp = reversed_pair_bound(&table, 2).unwrap();
        assert!((var - rp).abs() <= 1e-12 * rp);
        assert!((rp - vanilla_variance(&table)).abs() <= 1e-12 * rp);
    }

    #[test]
    fn exhaustive_mean_equals_full() {
        let (st, ds) = setup(3, 2, 9);
        let table = build_pair_grad_table(&st, &ds, Weighting::UNIT).unwrap();
        let mean = multibatch_mean_exact(&table, 3).unwrap();
        for (a, b) in mean.iter().zip(table.full().iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(multibatch_variance_exact(&table, 6).unwrap() < 1e-30);
    }

    #[test]
    fn combinations_enumerate_all_subsets() {
        let all: Vec<Vec<usize>> = Combinations::new(5, 3).collect();
        assert_eq!(all.len(), 10);
        assert_eq!(all[0], vec![0, 1, 2]);
        assert_eq!(all[9], vec![2, 3, 4]);
        assert_eq!(Combinations::new(3, 3).count(), 1);
        assert_eq!(ordered_subsequence_count(6, 3), Some(120));
        assert_eq!(ordered_subsequence_count(200, 32), None);
    }

    #[test]
    fn decomposition_matches_brute_force_and_variance() {
        let (st, ds) = setup(2, 3, 10);
        let table = build_pair_grad_table(&st, &ds, Weighting::UNIT).unwrap();
        for k in [2, 3, 4] {
            let d = decomposition_diagnostic(&table, k, &mut Rng::new(0), 0).unwrap();
            assert!(d.exhaustive);
            let oracle = brute_force_decomposition(&table, k);
            for (a, b) in [d.i1_term, d.i2_term, d.i3_term].iter().zip(oracle) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-12), "k={k}: {a} vs {b}");
            }
            let var = multibatch_variance_exact(&table, k).unwrap();
            assert!((d.total() - var).abs() <= 1e-10 * var);
        }
    }

    #[test]
    fn decomposition_k2_is_single_pair_variance() {
        let (st, ds) = setup(2, 3, 12);
        let table = build_pair_grad_table(&st, &ds, Weighting::UNIT).unwrap();
        let nu2 = vanilla_variance(&table);
        let d = decomposition_diagnostic(&table, 2, &mut Rng::new(0), 0).unwrap();
        assert!((d.i1_term - nu2 / 2.0).abs() < 1e-14);
        assert_eq!(d.i2_term.abs() < 1e-15, true);
        // The reversed pair (j, i) repeats (i, j): another ν²/2.
        assert!((d.i3_term - nu2 / 2.0).abs() < 1e-14);
    }

    #[test]
    fn closed_form_partition_matches_walk() {
        let (st, ds) = setup(3, 4, 14);
        let table = build_pair_grad_table(&st, &ds, Weighting::UNIT).unwrap();
        let members: Vec<usize> = (0..9).collect();
        // k = 9 takes the closed-form branch.
        let fast = partition_sums(&table, &members);
        let walk9 = brute_partition(&table, &members);
        for (a, b) in fast.iter().zip(walk9) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1e-12), "{a} vs {b}");
        }
    }

    fn brute_partition(table: &PairGradTable, p: &[usize]) -> [f64; 3] {
        let k = p.len();
        let mut sums = [0.0; 3];
        for i in 0..k {
            for j in 0..k {
                for s in 0..k {
                    for t in 0..k {
                        if i == j || s == t {
                            continue;
                        }
                        let v = table.centered(p[i], p[j]).dot(&table.centered(p[s], p[t])).unwrap();
                        let q = if i == s && j == t {
                            0
                        } else if i != s && i != t && j != s && j != t {
                            1
                        } else {
                            2
                        };
                        sums[q] += v;
                    }
                }
            }
        }
        sums
    }

    #[test]
    fn disjoint_pair_term_can_be_positive() {
        // A zero-mean table where complementary pairs are positively
        // correlated: the four-distinct-index term is positive.
        let m = 4;
        let a = |i: usize, j: usize| {
            let p = (i.min(j), i.max(j));
            if p == (0, 1) || p == (2, 3) {
                1.0
            } else {
                -0.5
            }
        };
        let mut grads = Vec::new();
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    grads.push(Vec64::from(vec![a(i, j)]));
                }
            }
        }
        let table = PairGradTable::from_pair_grads(m, &grads).unwrap();
        assert_eq!(table.full()[0], 0.0);
        let d = decomposition_diagnostic(&table, 4, &mut Rng::new(0), 0).unwrap();
        assert!((d.i2_term - 1.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_pair_term_nonpositive_for_row_additive_tables() {
        // A_ij = u_i + u_j with Σu = 0.
        let mut rng = Rng::new(77);
        for _ in 0..20 {
            let m = 5 + rng.below(4);
            let mut u: Vec<f64> = (0..m).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let mu = u.iter().sum::<f64>() / m as f64;
            u.iter_mut().for_each(|x| *x -= mu);
            let mut grads = Vec::new();
            for i in 0..m {
                for j in 0..m {
                    if i != j {
                        grads.push(Vec64::from(vec![u[i] + u[j] + 0.3]));
                    }
                }
            }
            let table = PairGradTable::from_pair_grads(m, &grads).unwrap();
            let d = decomposition_diagnostic(&table, 4, &mut Rng::new(0), 0).unwrap();
            assert!(d.i2_term <= 1e-15, "{}", d.i2_term);
        }
    }

    #[test]
    fn sampled_decomposition_is_close() {
        let (st, ds) = setup(2, 5, 15);
        let table = build_pair_grad_table(&st, &ds, Weighting::UNIT).unwrap();
        let exact = decomposition_diagnostic(&table, 3, &mut Rng::new(0), 0).unwrap();
        let sampled = decomposition_with_limit(&table, 3, &mut Rng::new(5), 20_000, 0).unwrap();
        assert!(!sampled.exhaustive);
        assert_eq!(sampled.subsets, 20_000);
        assert!((sampled.i1_term - exact.i1_term).abs() < 0.05 * exact.i1_term);
        assert!((sampled.total() - exact.total()).abs() < 0.1 * exact.total());
        assert!(decomposition_with_limit(&table, 3, &mut Rng::new(5), 0, 0).is_err());
    }

    #[test]
    fn lemma1_cases() {
        let r = lemma1_check(&[1.0, -1.0]).unwrap();
        assert_eq!((r.lhs, r.rhs, r.holds), (-1.0, 0.0, true));
        let r = lemma1_check(&[2.5, 2.5, 2.5]).unwrap();
        assert!((r.lhs - 6.25).abs() < 1e-12 && (r.rhs - 6.25).abs() < 1e-12 && r.holds);
        assert!(lemma1_check(&[1.0]).is_err());
    }

    #[test]
    fn slope_cases() {
        assert!((variance_slope(&[(2, 0.25), (4, 1.0 / 16.0)]).unwrap() + 2.0).abs() < 1e-12);
        assert!((variance_slope(&[(2, 0.5), (4, 0.25)]).unwrap() + 1.0).abs() < 1e-12);
        let noisy = [(4, 1.1 / 16.0), (8, 0.9 / 64.0), (16, 1.05 / 256.0)];
        assert!((variance_slope(&noisy).unwrap() + 2.0).abs() < 0.3);
        assert!(variance_slope(&[(2, 0.0), (4, 1.0)]).is_err());
        assert!(variance_slope(&[(2, 1.0)]).is_err());
    }

    #[test]
    fn full_and_exhaustive_estimators_have_zero_variance() {
        let (st, ds) = setup(2, 3, 16);
        let setup = VarianceSetup::new(&st, &ds, Weighting::UNIT).unwrap();
        assert_eq!(setup.report(EstimatorKind::Full, 0, 4, 1).unwrap().empirical_variance, 0.0);
        assert_eq!(setup.report(EstimatorKind::Multibatch, 6, 4, 1).unwrap().empirical_variance, 0.0);
        assert!(setup.report(EstimatorKind::Multibatch, 3, 1, 1).is_err());
        assert!(VarianceSetup::new(&st, &ds, Weighting::Balanced).is_err());
    }

    #[test]
    fn report_csv_shape() {
        let (st, ds) = setup(2, 3, 17);
        let r = empirical_variance(EstimatorKind::Multibatch, &st, &ds, 3, 10, 2, Weighting::UNIT).unwrap();
        let row = r.csv_row();
        assert_eq!(row.split(',').count(), VarianceReport::CSV_HEADER.split(',').count());
        assert!(row.starts_with("multibatch,3,10,"));
    }

    proptest::proptest! {
        #[test]
        fn lemma1_holds(v in proptest::collection::vec(-10.0f64..10.0, 2..50)) {
            proptest::prop_assert!(lemma1_check(&v).unwrap().holds);
        }
    }
}
