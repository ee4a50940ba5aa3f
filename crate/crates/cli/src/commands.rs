use std::fmt::Write as _;

use multibatch::data::{gen_fig2_dataset, gen_gaussian_clusters, ClusterSpec};
use multibatch::embedding::{central_differences, finite_diff_check, rel_error, HingeProbe};
use multibatch::estimators::{full_gradient, multibatch_estimate, multibatch_gradient_for};
use multibatch::io::save_checkpoint;
use multibatch::losses::{
    construct_multiclass_head, full_objective, min_hinge_margin, multiclass_hinge, signatures,
};
use multibatch::trainer::{train_with_holdout, TrainConfig, TrainHistory};
use multibatch::variance::{ordered_subsequence_count, variance_slope, VarianceReport, VarianceSetup, EXHAUSTIVE_LIMIT};
use multibatch::{
    Combinations, Dataset, EmbeddingState, Error, EstimatorKind, Mat64, MulticlassHead, ModelSpec, Rng, Vec64,
    Weighting,
};
use rayon::prelude::*;

use crate::{
    usage, ClaimArgs, CliError, CompareArgs, DataArgs, GradCheckArgs, Outcome, TrainArgs, TrainSetup,
    UnbiasednessArgs, VarianceScanArgs,
};

type CliResult<T> = Result<T, CliError>;

/// Finite-difference agreement required of analytic gradients.
pub const GRAD_TOL: f64 = 1e-4;
/// Exhaustive unbiasedness tolerance.
pub const EXACT_TOL: f64 = 1e-10;
/// Sampled unbiasedness tolerance, in standard errors.
pub const SAMPLED_SIGMAS: f64 = 4.0;
/// Mean deviations this small are roundoff, not bias.
const ZERO_DEVIATION: f64 = 1e-12;
/// States closer than this to a ReLU or hinge kink are redrawn before a
/// finite-difference check, so the `h = 1e-5` stencil never straddles one.
const KINK_CLEARANCE: f64 = 1e-3;

fn positive(name: &str, v: usize) -> CliResult<usize> {
    if v == 0 {
        return usage(format!("--{name} must be positive"));
    }
    Ok(v)
}

fn finite_nonneg(name: &str, v: f64) -> CliResult<f64> {
    if !(v.is_finite() && v >= 0.0) {
        return usage(format!("--{name} must be a finite nonnegative number"));
    }
    Ok(v)
}

fn finite_pos(name: &str, v: f64) -> CliResult<f64> {
    if !(v.is_finite() && v > 0.0) {
        return usage(format!("--{name} must be a finite positive number"));
    }
    Ok(v)
}

/// `m` samples spread round-robin over `classes` Gaussian clusters.
pub fn cluster_dataset(classes: usize, m: usize, dim: usize, center_scale: f64, noise: f64, seed: u64) -> multibatch::Result<Dataset> {
    let per = m.div_ceil(classes);
    let spec = ClusterSpec { num_classes: classes, per_class: per, dim, center_scale, noise_sigma: noise };
    let full = gen_gaussian_clusters(&spec, seed)?;
    let samples = (0..per)
        .flat_map(|j| (0..classes).map(move |c| c * per + j))
        .take(m)
        .map(|i| full.samples()[i].clone())
        .collect();
    Dataset::new(samples)
}

/// Resolves `--classes` and `--dim` against per-command defaults.
fn small_dataset(data: &DataArgs, m: usize, default_classes: usize, default_dim: usize, seed: u64) -> CliResult<Dataset> {
    if m < 2 {
        return usage("--m must be at least 2");
    }
    let classes = positive("classes", data.classes.unwrap_or(default_classes.min(m)))?;
    if classes > m {
        return usage(format!("--classes {classes} exceeds --m {m}"));
    }
    let dim = positive("dim", data.dim.unwrap_or(default_dim))?;
    let cs = finite_nonneg("center-scale", data.center_scale)?;
    let noise = finite_nonneg("noise", data.noise)?;
    Ok(cluster_dataset(classes, m, dim, cs, noise, seed)?)
}

fn relu_and_hinge_clear(state: &EmbeddingState, ds: &Dataset) -> multibatch::Result<bool> {
    let xs: Vec<&Vec64> = (0..ds.len()).map(|i| ds.features(i)).collect();
    let sigs = signatures(state, ds)?;
    Ok(state.relu_margin(&xs)? >= KINK_CLEARANCE
        && min_hinge_margin(state.theta, &sigs, &ds.labels())? >= KINK_CLEARANCE)
}

/// Max relative error between [`full_gradient`] and central differences of
/// the full objective, over all parameters including θ.
pub fn full_gradient_fd_error(state: &EmbeddingState, ds: &Dataset, weighting: Weighting) -> multibatch::Result<f64> {
    let g = full_gradient(state, ds, weighting)?;
    let mut probe = state.clone();
    let mut failure = None;
    let num = central_differences(&state.params(), |p| {
        let r = probe.set_params(p).and_then(|_| full_objective(&probe, ds, weighting));
        r.unwrap_or_else(|e| {
            failure = Some(e);
            f64::NAN
        })
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(g.grad.iter().zip(&num).map(|(&a, &n)| rel_error(a, n)).fold(0.0, f64::max))
}

/// Draws states from `spec` until one clears every kink, up to 1000 tries.
fn clear_state(spec: &ModelSpec, ds: &Dataset, rng: &mut Rng, probe_theta: Option<f64>) -> CliResult<EmbeddingState> {
    for _ in 0..1000 {
        let st = EmbeddingState::init(spec.clone(), rng)?;
        let ok = match probe_theta {
            None => relu_and_hinge_clear(&st, ds)?,
            Some(theta) => {
                let xs: Vec<&Vec64> = (0..ds.len()).map(|i| ds.features(i)).collect();
                let (sigs, _) = st.forward_batch(&xs)?;
                st.relu_margin(&xs)? >= KINK_CLEARANCE && HingeProbe { theta }.margin(&sigs) >= KINK_CLEARANCE
            }
        };
        if ok {
            return Ok(st);
        }
    }
    Err(CliError::Run(Error::InvalidArgument(
        "no state clear of kinks in 1000 draws; try another --seed".into(),
    )))
}

pub fn grad_check(a: &GradCheckArgs) -> CliResult<Outcome> {
    let ds = small_dataset(&a.data, a.m, 2, 4, a.common.seed)?;
    let states = positive("states", a.states)?;
    let dim = ds.feature_dim();
    let mut rng = Rng::new(a.common.seed.wrapping_add(1));
    let models = [
        ("linear", ModelSpec::linear(dim, dim)?),
        ("mlp", ModelSpec::mlp(&[dim, 2 * dim, dim])?),
    ];
    let mut out = Outcome::default();
    let mut worst = 0.0f64;
    for (name, spec) in &models {
        let mut probe_err = 0.0f64;
        let mut full_err = 0.0f64;
        for _ in 0..states {
            let st = clear_state(spec, &ds, &mut rng, Some(0.5))?;
            let xs: Vec<&Vec64> = (0..ds.len()).map(|i| ds.features(i)).collect();
            probe_err = probe_err.max(finite_diff_check(&st, &xs, &HingeProbe { theta: 0.5 })?);
            let st = clear_state(spec, &ds, &mut rng, None)?;
            full_err = full_err.max(full_gradient_fd_error(&st, &ds, Weighting::UNIT)?);
        }
        let _ = writeln!(out.report, "{name} param_grad max_rel_error {probe_err:e}");
        let _ = writeln!(out.report, "{name} full_gradient max_rel_error {full_err:e}");
        worst = worst.max(probe_err).max(full_err);
    }
    out.success = worst < GRAD_TOL;
    out.note(format!(
        "grad-check: worst relative error {worst:e} over {states} states per model ({})",
        if out.success { "ok" } else { "FAILED" }
    ));
    Ok(out)
}

pub fn unbiasedness(a: &UnbiasednessArgs) -> CliResult<Outcome> {
    let ds = small_dataset(&a.data, a.m, 3, 2, a.common.seed)?;
    let (m, k) = (ds.len(), a.k);
    if k < 2 || k > m {
        return usage(format!("--k must satisfy 2 ≤ k ≤ m (k={k}, m={m})"));
    }
    let mut rng = Rng::new(a.common.seed.wrapping_add(1));
    let st = EmbeddingState::init(ModelSpec::linear(ds.feature_dim(), 2)?, &mut rng)?;
    let full = full_gradient(&st, &ds, Weighting::UNIT)?.grad;
    let mut out = Outcome::default();

    if a.exhaustive {
        match ordered_subsequence_count(m, k) {
            Some(n) if n <= EXHAUSTIVE_LIMIT => {}
            _ => return usage(format!("m={m}, k={k} is too large for --exhaustive")),
        }
        // Each k-subset stands for its k! orderings, which all give the same estimate.
        let subsets: Vec<Vec<usize>> = Combinations::new(m, k).collect();
        let grads = subsets
            .par_iter()
            .map(|s| multibatch_gradient_for(&st, &ds, s, Weighting::UNIT).map(|g| g.grad))
            .collect::<multibatch::Result<Vec<Vec64>>>()?;
        let mut mean = Vec64::zeros(full.len());
        for g in &grads {
            mean.axpy(1.0, g)?;
        }
        mean.scale(1.0 / grads.len() as f64);
        let dev = max_deviation(&mean, &full);
        let _ = writeln!(out.report, "mode exhaustive");
        let _ = writeln!(out.report, "subsets {}", grads.len());
        let _ = writeln!(out.report, "ordered_subsequences {}", ordered_subsequence_count(m, k).unwrap_or(0));
        let _ = writeln!(out.report, "max_deviation {dev:e}");
        out.success = dev < EXACT_TOL;
        out.note(format!("unbiasedness: max deviation {dev:e}, tolerance {EXACT_TOL:e}"));
    } else {
        if a.trials < 2 {
            return usage("--trials must be at least 2");
        }
        let seed = a.common.seed;
        let n = full.len();
        let mut sum = vec![0.0; n];
        let mut sum_sq = vec![0.0; n];
        const CHUNK: usize = 8192;
        for start in (0..a.trials).step_by(CHUNK) {
            let end = (start + CHUNK).min(a.trials);
            let grads = (start..end)
                .into_par_iter()
                .map(|t| {
                    let mut rng = Rng::new(seed ^ t as u64);
                    multibatch_estimate(&st, &ds, k, Weighting::UNIT, &mut rng).map(|g| g.grad)
                })
                .collect::<multibatch::Result<Vec<Vec64>>>()?;
            for g in &grads {
                for r in 0..n {
                    let d = g[r] - full[r];
                    sum[r] += d;
                    sum_sq[r] += d * d;
                }
            }
        }
        let t = a.trials as f64;
        let mut dev = 0.0f64;
        let mut worst_z = 0.0f64;
        for r in 0..n {
            let mean = sum[r] / t;
            let var = ((sum_sq[r] - t * mean * mean) / (t - 1.0)).max(0.0);
            let se = (var / t).sqrt();
            dev = dev.max(mean.abs());
            // Components that vanish identically (bias sums) only carry roundoff.
            let z = if mean.abs() <= ZERO_DEVIATION {
                0.0
            } else if se > 0.0 {
                mean.abs() / se
            } else {
                f64::INFINITY
            };
            worst_z = worst_z.max(z);
        }
        let _ = writeln!(out.report, "mode sampled");
        let _ = writeln!(out.report, "trials {}", a.trials);
        let _ = writeln!(out.report, "max_deviation {dev:e}");
        let _ = writeln!(out.report, "max_standard_errors {worst_z:e}");
        out.success = worst_z <= SAMPLED_SIGMAS;
        out.note(format!(
            "unbiasedness: worst component {worst_z:.3} standard errors from the full gradient, limit {SAMPLED_SIGMAS}"
        ));
    }
    Ok(out)
}

fn max_deviation(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn variance_scan(a: &VarianceScanArgs) -> CliResult<Outcome> {
    if a.trials < 2 {
        return usage("--trials must be at least 2");
    }
    if a.ks.is_empty() {
        return usage("--ks needs at least one batch size");
    }
    let classes = positive("classes", a.classes)?;
    if a.m < 2 || classes > a.m {
        return usage(format!("need 2 ≤ m and classes ≤ m (m={}, classes={classes})", a.m));
    }
    for &k in &a.ks {
        if k < 2 || k > a.m || k % 2 != 0 {
            return usage(format!("batch size {k} must be even and within 2..={}", a.m));
        }
    }
    let dim = positive("dim", a.dim)?;
    let hidden = positive("hidden", a.hidden)?;
    let ds = cluster_dataset(
        classes,
        a.m,
        dim,
        finite_nonneg("center-scale", a.center_scale)?,
        finite_nonneg("noise", a.noise)?,
        a.common.seed,
    )?;
    let st = EmbeddingState::init(ModelSpec::mlp(&[dim, hidden, dim])?, &mut Rng::new(a.common.seed.wrapping_add(1)))?;
    let setup = VarianceSetup::new(&st, &ds, Weighting::UNIT)?;

    let mut out = Outcome::default();
    let _ = writeln!(out.report, "{}", VarianceReport::CSV_HEADER);
    for kind in [EstimatorKind::Multibatch, EstimatorKind::PairwiseMinibatch] {
        let mut points = Vec::new();
        for &k in &a.ks {
            let rep = setup.report(kind, k, a.trials, a.common.seed.wrapping_add(2))?;
            let _ = writeln!(out.report, "{}", rep.csv_row());
            points.push((k, rep.empirical_variance));
        }
        if points.len() >= 2 {
            match variance_slope(&points) {
                Ok(s) => out.note(format!("{} log-log slope {s:.4}", kind.name())),
                Err(e) => out.note(format!("{} slope unavailable: {e}", kind.name())),
            }
        }
    }
    out.note(format!(
        "vanilla variance {:e}, abar term {:e}",
        setup.vanilla_variance(),
        setup.abar_term()
    ));
    out.success = true;
    Ok(out)
}

struct Prepared {
    train: Dataset,
    holdout: Option<Dataset>,
    state: EmbeddingState,
}

fn prepare(s: &TrainSetup, seed: u64) -> CliResult<Prepared> {
    let classes = positive("classes", s.classes)?;
    let per = positive("per-class", s.per_class)?;
    let dim = positive("dim", s.dim)?;
    let out_dim = positive("out-dim", s.out_dim.unwrap_or(dim))?;
    let spec = ClusterSpec {
        num_classes: classes,
        per_class: per + s.holdout_per_class,
        dim,
        center_scale: finite_nonneg("center-scale", s.center_scale)?,
        noise_sigma: finite_nonneg("noise", s.noise)?,
    };
    let all = gen_gaussian_clusters(&spec, seed)?;
    let (train, holdout) = if s.holdout_per_class == 0 {
        (all, None)
    } else {
        let (a, b) = all.split_per_class(per)?;
        (a, Some(b))
    };
    let model = if s.hidden == 0 {
        ModelSpec::linear(dim, out_dim)?
    } else {
        ModelSpec::mlp(&[dim, s.hidden, out_dim])?
    };
    let state = EmbeddingState::init(model, &mut Rng::new(seed.wrapping_add(1)))?;
    Ok(Prepared { train, holdout, state })
}

fn config(s: &TrainSetup, kind: EstimatorKind, steps: usize, lr: f64, drop_at: f64, seed: u64) -> CliResult<TrainConfig> {
    let lr = finite_pos("lr", lr)?;
    if !(0.0..=1.0).contains(&drop_at) {
        return usage("--lr-drop-at must lie in [0, 1]");
    }
    let factor = finite_pos("lr-drop-factor", s.lr_drop_factor)?;
    let drop_step = (drop_at * steps as f64).floor() as usize;
    let cfg = TrainConfig {
        estimator: kind,
        classes_per_batch: positive("classes-per-batch", s.classes_per_batch)?,
        samples_per_class: positive("samples-per-class", s.samples_per_class)?,
        lr,
        lr_drops: if drop_step < steps { vec![(drop_step, lr * factor)] } else { Vec::new() },
        steps,
        eval_every: positive("eval-every", s.eval_every)?,
        seed: seed.wrapping_add(2),
        weighting: s.weighting.into(),
        stop_below: None,
    };
    cfg.validate()?;
    if kind != EstimatorKind::Full && s.classes_per_batch > s.classes {
        return usage("--classes-per-batch exceeds --classes");
    }
    if kind != EstimatorKind::Full && s.samples_per_class > s.per_class {
        return usage("--samples-per-class exceeds --per-class");
    }
    Ok(cfg)
}

pub fn train(a: &TrainArgs) -> CliResult<Outcome> {
    let p = prepare(&a.setup, a.common.seed)?;
    let kind: EstimatorKind = a.estimator.into();
    let cfg = config(&a.setup, kind, a.steps, a.lr, a.setup.lr_drop_at.unwrap_or(0.9), a.common.seed)?;
    let (state, history) = train_with_holdout(&p.state, &p.train, p.holdout.as_ref(), &cfg)?;
    if let Some(path) = &a.checkpoint {
        save_checkpoint(&state, path)?;
    }
    let mut out = Outcome { report: history.to_csv(), success: true, ..Outcome::default() };
    match history.last() {
        Some(r) => out.note(format!(
            "{}: {} steps, {} forward passes, objective {:.6}, accuracy {:.4}",
            kind.name(),
            r.step,
            r.forward_passes,
            r.objective,
            r.accuracy
        )),
        None => out.note(format!("{}: no steps run", kind.name())),
    }
    Ok(out)
}

/// Result of `compare`: the report plus, per estimator, the forward passes
/// at which the target was first reached.
#[derive(Debug, Clone)]
pub struct CompareOutcome {
    pub outcome: Outcome,
    pub multibatch_reach: Option<usize>,
    pub pairwise_reach: Option<usize>,
    /// Forward passes each run may spend.
    pub budget: usize,
}

pub fn compare(a: &CompareArgs) -> CliResult<CompareOutcome> {
    let p = prepare(&a.setup, a.common.seed)?;
    let target = finite_nonneg("target", a.target)?;
    let drop_at = a.setup.lr_drop_at.unwrap_or(1.0);
    let mut out = Outcome { success: true, ..Outcome::default() };
    let _ = writeln!(out.report, "estimator,{}", TrainHistory::CSV_HEADER);
    let mut reach = Vec::new();
    let mut budget = 0;
    for kind in [EstimatorKind::Multibatch, EstimatorKind::PairwiseMinibatch] {
        let cfg = config(&a.setup, kind, a.steps, a.lr, drop_at, a.common.seed)?;
        budget = cfg.steps * cfg.k();
        match train_with_holdout(&p.state, &p.train, p.holdout.as_ref(), &cfg) {
            Ok((_, history)) => {
                for row in history.csv_rows() {
                    let _ = writeln!(out.report, "{},{row}", kind.name());
                }
                let hit = history.first_reaching(target).map(|r| r.forward_passes);
                match hit {
                    Some(fp) => out.note(format!("{} reached objective {target} after {fp} forward passes", kind.name())),
                    None => out.note(format!(
                        "{} did not reach objective {target} within {budget} forward passes (final {:.6})",
                        kind.name(),
                        history.last().map_or(f64::NAN, |r| r.objective)
                    )),
                }
                reach.push(hit);
            }
            Err(Error::Diverged { step }) => {
                out.note(format!("{} diverged at step {step}; counted as not reaching the target", kind.name()));
                reach.push(None);
            }
            Err(e) => return Err(e.into()),
        }
    }
    let (mb, pw) = (reach[0], reach[1]);
    let verdict = match (mb, pw) {
        (Some(x), Some(y)) if x < y => "multibatch first",
        (Some(x), Some(y)) if x > y => "pairwise first",
        (Some(_), Some(_)) => "tie",
        (Some(_), None) => "multibatch only",
        (None, Some(_)) => "pairwise only",
        (None, None) => "neither reached the target",
    };
    out.note(format!("compare: {verdict}"));
    Ok(CompareOutcome { outcome: out, multibatch_reach: mb, pairwise_reach: pw, budget })
}

/// Outcome of the forward direction of the claim.
#[derive(Debug, Clone, Copy)]
pub struct ForwardClaim {
    pub steps: usize,
    pub objective: f64,
    pub multiclass_loss: f64,
}

/// Trains a linear embedding by full-gradient descent until the metric
/// objective is at most `tol`, then scores a class-mean head on the result.
pub fn forward_claim(a: &ClaimArgs) -> CliResult<ForwardClaim> {
    let spec = ClusterSpec {
        num_classes: positive("classes", a.classes)?,
        per_class: positive("per-class", a.per_class)?,
        dim: positive("dim", a.dim)?,
        center_scale: 5.0,
        noise_sigma: 0.1,
    };
    let ds = gen_gaussian_clusters(&spec, a.common.seed)?;
    let st = EmbeddingState::init(ModelSpec::linear(a.dim, a.dim)?, &mut Rng::new(a.common.seed.wrapping_add(1)))?;
    let cfg = TrainConfig {
        estimator: EstimatorKind::Full,
        classes_per_batch: 1,
        samples_per_class: 2,
        lr: finite_pos("lr", a.lr)?,
        lr_drops: Vec::new(),
        steps: a.steps,
        eval_every: 1,
        seed: a.common.seed.wrapping_add(2),
        weighting: Weighting::UNIT,
        stop_below: Some(finite_nonneg("tol", a.tol)?),
    };
    let (state, history) = train_with_holdout(&st, &ds, None, &cfg)?;
    let (steps, objective) = history.last().map_or((0, full_objective(&st, &ds, Weighting::UNIT)?), |r| (r.step, r.objective));
    let sigs = signatures(&state, &ds)?;
    let labels = ds.labels();
    let head = construct_multiclass_head(&sigs, &labels)?;
    Ok(ForwardClaim { steps, objective, multiclass_loss: multiclass_hinge(&head, &sigs, &labels)? })
}

/// Outcome of the converse direction on the three-point fixture.
#[derive(Debug, Clone, Copy)]
pub struct ConverseClaim {
    pub multiclass_loss: f64,
    pub min_objective: f64,
    pub argmin_theta: f64,
}

/// The head `W_0 = e1 + e3`, `W_1 = e2`, `b = 0` for the three-point fixture.
pub fn fig2_head() -> MulticlassHead {
    let w = Mat64::from_row_major(2, 3, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).expect("2x3");
    MulticlassHead::new(w, Vec64::zeros(2)).expect("shapes agree")
}

/// Multiclass loss of [`fig2_head`] on the identity embedding of the
/// fixture, and the smallest unit-weight metric objective over θ in
/// `{0.10, 0.11, ..., 10.00}`.
pub fn converse_claim() -> multibatch::Result<ConverseClaim> {
    let ds = gen_fig2_dataset();
    let mut st = EmbeddingState::identity(3, 1.0)?;
    let sigs = signatures(&st, &ds)?;
    let multiclass_loss = multiclass_hinge(&fig2_head(), &sigs, &ds.labels())?;
    let mut best = (f64::INFINITY, f64::NAN);
    for i in 10..=1000 {
        st.theta = i as f64 / 100.0;
        let obj = full_objective(&st, &ds, Weighting::UNIT)?;
        if obj < best.0 {
            best = (obj, st.theta);
        }
    }
    Ok(ConverseClaim { multiclass_loss, min_objective: best.0, argmin_theta: best.1 })
}

pub fn claim_demo(a: &ClaimArgs) -> CliResult<Outcome> {
    let fwd = forward_claim(a)?;
    let conv = converse_claim()?;
    let mut out = Outcome::default();
    let fwd_ok = fwd.objective <= a.tol && fwd.multiclass_loss <= 1e-9;
    let conv_ok = conv.multiclass_loss == 0.0 && conv.min_objective > 0.5;
    let _ = writeln!(out.report, "forward steps {}", fwd.steps);
    let _ = writeln!(out.report, "forward metric_objective {:e}", fwd.objective);
    let _ = writeln!(out.report, "forward multiclass_hinge {:e}", fwd.multiclass_loss);
    let _ = writeln!(out.report, "converse multiclass_hinge {:e}", conv.multiclass_loss);
    let _ = writeln!(out.report, "converse min_metric_objective {:e}", conv.min_objective);
    let _ = writeln!(out.report, "converse argmin_theta {:.2}", conv.argmin_theta);
    if !fwd_ok {
        out.note(format!(
            "claim-demo: training stopped at objective {:e} after {} steps (need ≤ {:e}) with multiclass loss {:e}; try more --steps or a different --lr",
            fwd.objective, fwd.steps, a.tol, fwd.multiclass_loss
        ));
    }
    if !conv_ok {
        out.note("claim-demo: converse direction failed".to_string());
    }
    out.success = fwd_ok && conv_ok;
    if out.success {
        out.note("claim-demo: both directions hold");
    }
    Ok(out)
}
