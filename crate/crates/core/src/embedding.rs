//! Embedding models `f_w`: stacks of affine layers, optionally with ReLU
//! between them, plus reverse-mode gradients from signature gradients.
//!
//! Parameter layout is fixed: for each layer in order, the weight matrix
//! (row-major, `out × in`) followed by the bias vector. The threshold θ is
//! stored next to the weights and occupies the last slot of every flat
//! gradient.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::tensor::{Rng, Vec64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    /// Affine layers with no nonlinearity.
    Linear,
    /// Affine layers with ReLU on every hidden layer.
    Mlp,
}

/// Architecture description. `dims[0]` is the input dimension and the last
/// entry is the signature dimension.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub dims: Vec<usize>,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, dims: Vec<usize>) -> Result<Self> {
        let spec = ModelSpec { kind, dims };
        spec.validate()?;
        Ok(spec)
    }

    pub fn linear(input: usize, output: usize) -> Result<Self> {
        Self::new(ModelKind::Linear, vec![input, output])
    }

    pub fn mlp(dims: &[usize]) -> Result<Self> {
        Self::new(ModelKind::Mlp, dims.to_vec())
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 {
            return invalid("model needs at least an input and an output dimension");
        }
        if self.dims.iter().any(|&d| d == 0) {
            return invalid("layer dimensions must be positive");
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("validated")
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// Number of network weights and biases (θ excluded).
    pub fn num_weights(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.num_layers());
        let mut at = 0;
        for w in self.dims.windows(2) {
            offs.push(at);
            at += w[0] * w[1] + w[1];
        }
        offs
    }

    fn relu_after(&self, layer: usize) -> bool {
        self.kind == ModelKind::Mlp && layer + 1 < self.num_layers()
    }
}

/// Parameters `z = (w, θ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingState {
    pub spec: ModelSpec,
    pub weights: Vec64,
    pub theta: f64,
}

impl EmbeddingState {
    pub fn new(spec: ModelSpec, weights: Vec64, theta: f64) -> Result<Self> {
        spec.validate()?;
        check_dim(spec.num_weights(), weights.len())?;
        Ok(EmbeddingState {
            spec,
            weights,
            theta,
        })
    }

    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        let n = spec.num_weights();
        Self::new(spec, Vec64::zeros(n), 1.0)
    }

    /// Scaled uniform init: each weight in `[-a, a]` with
    /// `a = sqrt(6 / (fan_in + fan_out))`, biases zero, θ = 1.
    pub fn init(spec: ModelSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut weights = Vec::with_capacity(spec.num_weights());
        for w in spec.dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.extend((0..fan_in * fan_out).map(|_| rng.uniform_in(-a, a)));
            weights.extend(std::iter::repeat(0.0).take(fan_out));
        }
        Self::new(spec, weights.into(), 1.0)
    }

    /// Linear model `x ↦ W x + b` from an explicit matrix.
    pub fn linear_from(w: &crate::tensor::Mat64, b: &[f64], theta: f64) -> Result<Self> {
        check_dim(w.rows(), b.len())?;
        let spec = ModelSpec::linear(w.cols(), w.rows())?;
        let mut weights = w.as_slice().to_vec();
        weights.extend_from_slice(b);
        Self::new(spec, weights.into(), theta)
    }

    /// Linear identity embedding on `dim` dimensions.
    pub fn identity(dim: usize, theta: f64) -> Result<Self> {
        Self::linear_from(
            &crate::tensor::Mat64::identity(dim)?,
            &vec![0.0; dim],
            theta,
        )
    }

    /// Flat parameter count including θ.
    pub fn num_params(&self) -> usize {
        self.weights.len() + 1
    }

    /// Flat parameter vector `(w, θ)`.
    pub fn params(&self) -> Vec64 {
        let mut p = self.weights.clone();
        p.0.push(self.theta);
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim(self.num_params(), params.len())?;
        let n = self.weights.len();
        self.weights.copy_from_slice(&params[..n]);
        self.theta = params[n];
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec64> {
        check_dim(self.spec.input_dim(), x.len())?;
        let mut cur = x.to_vec();
        for (l, off) in self.spec.layer_offsets().into_iter().enumerate() {
            cur = self.layer(l, off, &cur);
        }
        Ok(cur.into())
    }

    fn layer(&self, l: usize, off: usize, input: &[f64]) -> Vec<f64> {
        let (n_in, n_out) = (self.spec.dims[l], self.spec.dims[l + 1]);
        let w = &self.weights[off..off + n_in * n_out];
        let b = &self.weights[off + n_in * n_out..off + n_in * n_out + n_out];
        let relu = self.spec.relu_after(l);
        (0..n_out)
            .map(|o| {
                let row = &w[o * n_in..(o + 1) * n_in];
                let v = b[o] + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>();
                if relu {
                    v.max(0.0)
                } else {
                    v
                }
            })
            .collect()
    }

    /// Forward pass over a batch, caching what the backward pass needs.
    pub fn forward_batch<X: AsRef<[f64]>>(
        &self,
        xs: &[X],
    ) -> Result<(Vec<Vec64>, BatchActivations)> {
        let offsets = self.spec.layer_offsets();
        let mut sigs = Vec::with_capacity(xs.len());
        let mut inputs = Vec::with_capacity(xs.len());
        for x in xs {
            let x = x.as_ref();
            check_dim(self.spec.input_dim(), x.len())?;
            let mut layers = Vec::with_capacity(offsets.len());
            let mut cur = x.to_vec();
            for (l, &off) in offsets.iter().enumerate() {
                let next = self.layer(l, off, &cur);
                layers.push(cur);
                cur = next;
            }
            inputs.push(layers);
            sigs.push(Vec64(cur));
        }
        Ok((
            sigs,
            BatchActivations {
                dims: self.spec.dims.clone(),
                inputs,
            },
        ))
    }

    /// Weight gradient `Σ_i J_iᵀ g_i` for signature gradients `g_i`. The
    /// returned vector has [`ModelSpec::num_weights`] entries (no θ slot).
    pub fn backward_batch<G: AsRef<[f64]>>(
        &self,
        acts: &BatchActivations,
        sig_grads: &[G],
    ) -> Result<Vec64> {
        let mut out = Vec64::zeros(self.spec.num_weights());
        self.backward_into(acts, sig_grads, &mut out)?;
        Ok(out)
    }

    /// Accumulating form of [`backward_batch`](Self::backward_batch).
    pub fn backward_into<G: AsRef<[f64]>>(
        &self,
        acts: &BatchActivations,
        sig_grads: &[G],
        out: &mut [f64],
    ) -> Result<()> {
        if acts.dims != self.spec.dims {
            return invalid("activation cache was produced by a different architecture");
        }
        check_dim(acts.len(), sig_grads.len())?;
        check_dim(self.spec.num_weights(), out.len())?;
        for (i, g) in sig_grads.iter().enumerate() {
            self.backward_sample(acts, i, g.as_ref(), out)?;
        }
        Ok(())
    }

    /// Adds `J_iᵀ g` for one cached sample into `out`.
    pub(crate) fn backward_sample(
        &self,
        acts: &BatchActivations,
        sample: usize,
        sig_grad: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        check_dim(self.spec.output_dim(), sig_grad.len())?;
        if sig_grad.iter().all(|&g| g == 0.0) {
            return Ok(());
        }
        let offsets = self.spec.layer_offsets();
        let layers = &acts.inputs[sample];
        let mut g = sig_grad.to_vec();
        for l in (0..self.spec.num_layers()).rev() {
            let (n_in, n_out) = (self.spec.dims[l], self.spec.dims[l + 1]);
            let off = offsets[l];
            let input = &layers[l];
            for o in 0..n_out {
                if g[o] == 0.0 {
                    continue;
                }
                let row = &mut out[off + o * n_in..off + (o + 1) * n_in];
                row.iter_mut().zip(input).for_each(|(w, x)| *w += g[o] * x);
                out[off + n_in * n_out + o] += g[o];
            }
            if l == 0 {
                break;
            }
            let w = &self.weights[off..off + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                if g[o] == 0.0 {
                    continue;
                }
                let row = &w[o * n_in..(o + 1) * n_in];
                prev.iter_mut().zip(row).for_each(|(p, a)| *p += a * g[o]);
            }
            if self.spec.relu_after(l - 1) {
                // Subgradient 0 at the kink: a cached activation of exactly 0 passes nothing.
                prev.iter_mut()
                    .zip(input)
                    .for_each(|(p, &x)| if x <= 0.0 { *p = 0.0 });
            }
            g = prev;
        }
        Ok(())
    }

    /// Smallest |pre-activation| over all ReLU units for the given inputs,
    /// or `+∞` when the model has no ReLU. Used to keep gradient checks
    /// away from kinks.
    pub fn relu_margin<X: AsRef<[f64]>>(&self, xs: &[X]) -> Result<f64> {
        let offsets = self.spec.layer_offsets();
        let mut margin = f64::INFINITY;
        for x in xs {
            let x = x.as_ref();
            check_dim(self.spec.input_dim(), x.len())?;
            let mut cur = x.to_vec();
            for (l, &off) in offsets.iter().enumerate() {
                let (n_in, n_out) = (self.spec.dims[l], self.spec.dims[l + 1]);
                let w = &self.weights[off..off + n_in * n_out];
                let b = &self.weights[off + n_in * n_out..off + n_in * n_out + n_out];
                let pre: Vec<f64> = (0..n_out)
                    .map(|o| {
                        b[o] + w[o * n_in..(o + 1) * n_in]
                            .iter()
                            .zip(&cur)
                            .map(|(a, v)| a * v)
                            .sum::<f64>()
                    })
                    .collect();
                if self.spec.relu_after(l) {
                    margin = pre.iter().fold(margin, |m, v| m.min(v.abs()));
                    cur = pre.into_iter().map(|v| v.max(0.0)).collect();
                } else {
                    cur = pre;
                }
            }
        }
        Ok(margin)
    }
}

/// Per-sample layer inputs cached by [`EmbeddingState::forward_batch`].
#[derive(Clone, Debug)]
pub struct BatchActivations {
    dims: Vec<usize>,
    // inputs[sample][layer] is the input vector to that layer.
    inputs: Vec<Vec<Vec<f64>>>,
}

impl BatchActivations {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// A scalar function of a batch of signatures with its gradient, used to
/// drive [`finite_diff_check`].
pub trait ProbeLoss {
    fn value(&self, sigs: &[Vec64]) -> f64;
    fn grad(&self, sigs: &[Vec64]) -> Vec<Vec64>;
}

/// `½ Σ_i ‖s_i − t_i‖²`.
#[derive(Clone, Debug)]
pub struct QuadraticProbe {
    pub targets: Vec<Vec64>,
}

impl ProbeLoss for QuadraticProbe {
    fn value(&self, sigs: &[Vec64]) -> f64 {
        sigs.iter()
            .zip(&self.targets)
            .map(|(s, t)| 0.5 * crate::tensor::sq_dist_unchecked(s, t))
            .sum()
    }

    fn grad(&self, sigs: &[Vec64]) -> Vec<Vec64> {
        sigs.iter()
            .zip(&self.targets)
            .map(|(s, t)| s.iter().zip(t.iter()).map(|(a, b)| a - b).collect::<Vec<_>>().into())
            .collect()
    }
}

/// Sum of hinged squared distances over consecutive signature pairs,
/// `Σ_i max(0, 1 + y_i (‖s_i − s_{i+1}‖² − θ))` with alternating `y_i`.
#[derive(Clone, Debug)]
pub struct HingeProbe {
    pub theta: f64,
}

impl HingeProbe {
    fn terms<'a>(&self, sigs: &'a [Vec64]) -> impl Iterator<Item = (usize, f64, f64)> + 'a {
        let theta = self.theta;
        let n = sigs.len();
        (0..n.saturating_sub(1)).map(move |i| {
            let y = if i % 2 == 0 { 1.0 } else { -1.0 };
            let d2 = crate::tensor::sq_dist_unchecked(&sigs[i], &sigs[i + 1]);
            (i, y, 1.0 + y * (d2 - theta))
        })
    }

    /// Smallest |hinge argument| across the probe terms.
    pub fn margin(&self, sigs: &[Vec64]) -> f64 {
        self.terms(sigs).fold(f64::INFINITY, |m, (_, _, a)| m.min(a.abs()))
    }
}

impl ProbeLoss for HingeProbe {
    fn value(&self, sigs: &[Vec64]) -> f64 {
        self.terms(sigs).map(|(_, _, a)| a.max(0.0)).sum()
    }

    fn grad(&self, sigs: &[Vec64]) -> Vec<Vec64> {
        let mut g: Vec<Vec64> = sigs.iter().map(|s| Vec64::zeros(s.len())).collect();
        for (i, y, arg) in self.terms(sigs) {
            if arg <= 0.0 {
                continue;
            }
            for r in 0..sigs[i].len() {
                let d = 2.0 * y * (sigs[i][r] - sigs[i + 1][r]);
                g[i][r] += d;
                g[i + 1][r] -= d;
            }
        }
        g
    }
}

/// Central-difference step used by the gradient checks.
pub const FD_STEP: f64 = 1e-5;

/// Below this magnitude [`rel_error`] compares absolutely. Central
/// differences carry roundoff near `ε·|f|/h ≈ 1e-10` for objectives of
/// order ten, which would swamp a relative comparison of exact zeros.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

/// Relative error `|a − b| / max(|a|, |b|, REL_ERROR_FLOOR)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Central differences of `f` at `point` with step [`FD_STEP`].
pub fn central_differences(point: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = point.to_vec();
    (0..point.len())
        .map(|i| {
            p[i] = point[i] + FD_STEP;
            let hi = f(&p);
            p[i] = point[i] - FD_STEP;
            let lo = f(&p);
            p[i] = point[i];
            (hi - lo) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Compares [`EmbeddingState::backward_batch`] against central differences of
/// `probe` over every network weight. Returns the largest relative error.
pub fn finite_diff_check<X: AsRef<[f64]>>(
    state: &EmbeddingState,
    xs: &[X],
    probe: &dyn ProbeLoss,
) -> Result<f64> {
    let (sigs, acts) = state.forward_batch(xs)?;
    let analytic = state.backward_batch(&acts, &probe.grad(&sigs))?;
    let mut scratch = state.clone();
    let mut failure: Option<Error> = None;
    let numeric = central_differences(&state.weights, |w| {
        scratch.weights.copy_from_slice(w);
        match scratch.forward_batch(xs) {
            Ok((s, _)) => probe.value(&s),
            Err(e) => {
                failure = Some(e);
                f64::NAN
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max))
}
