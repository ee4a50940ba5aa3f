//! Labeled datasets and synthetic generators.

use crate::error::{check_dim, invalid, Error, Result};
use crate::tensor::{Rng, Vec64};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec64,
    pub label: usize,
}

/// Labeled feature vectors. Labels are contiguous `0..num_classes` and every
/// class has at least one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    num_classes: usize,
    feature_dim: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return invalid("dataset needs at least one sample");
        };
        let feature_dim = first.features.len();
        if feature_dim == 0 {
            return invalid("feature dimension must be positive");
        }
        for s in &samples {
            check_dim(feature_dim, s.features.len())?;
            if !s.features.is_finite() {
                return invalid("non-finite feature value");
            }
        }
        let num_classes = samples.iter().map(|s| s.label).max().unwrap_or(0) + 1;
        let mut seen = vec![false; num_classes];
        for s in &samples {
            seen[s.label] = true;
        }
        if let Some(missing) = seen.iter().position(|&x| !x) {
            return Err(Error::EmptyClass(missing));
        }
        Ok(Dataset {
            samples,
            num_classes,
            feature_dim,
        })
    }

    pub fn from_parts(features: Vec<Vec64>, labels: Vec<usize>) -> Result<Self> {
        check_dim(features.len(), labels.len())?;
        Self::new(
            features
                .into_iter()
                .zip(labels)
                .map(|(features, label)| Sample { features, label })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn features(&self, i: usize) -> &Vec64 {
        &self.samples[i].features
    }

    pub fn label(&self, i: usize) -> usize {
        self.samples[i].label
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Sample indices grouped by class.
    pub fn class_members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, s) in self.samples.iter().enumerate() {
            out[s.label].push(i);
        }
        out
    }

    /// Splits each class in two: the first `per_class_train` samples of a
    /// class go to the first dataset, the rest to the second. Labels keep
    /// their ids, so every class must keep at least one sample on each side.
    pub fn split_per_class(&self, per_class_train: usize) -> Result<(Dataset, Dataset)> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for members in self.class_members() {
            if members.len() <= per_class_train || per_class_train == 0 {
                return invalid("split must leave every class nonempty on both sides");
            }
            for (n, &i) in members.iter().enumerate() {
                let s = self.samples[i].clone();
                if n < per_class_train {
                    train.push(s);
                } else {
                    test.push(s);
                }
            }
        }
        Ok((Dataset::new(train)?, Dataset::new(test)?))
    }
}

/// Parameters for [`gen_gaussian_clusters`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub center_scale: f64,
    pub noise_sigma: f64,
}

/// Isotropic Gaussian clusters. Centers are uniform in
/// `[-center_scale, center_scale]^dim`; each sample is its class center plus
/// `N(0, noise_sigma² I)` noise. Samples are ordered class by class.
pub fn gen_gaussian_clusters(spec: &ClusterSpec, seed: u64) -> Result<Dataset> {
    if spec.num_classes == 0 || spec.per_class == 0 || spec.dim == 0 {
        return invalid("class count, samples per class and dim must be positive");
    }
    if !(spec.noise_sigma >= 0.0) || !(spec.center_scale >= 0.0) {
        return invalid("noise_sigma and center_scale must be nonnegative");
    }
    let mut rng = Rng::new(seed);
    let centers: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            (0..spec.dim)
                .map(|_| rng.uniform_in(-spec.center_scale, spec.center_scale))
                .collect()
        })
        .collect();
    let mut samples = Vec::with_capacity(spec.num_classes * spec.per_class);
    for (label, c) in centers.iter().enumerate() {
        for _ in 0..spec.per_class {
            let features = c
                .iter()
                .map(|&x| x + spec.noise_sigma * rng.normal())
                .collect::<Vec<_>>();
            samples.push(Sample {
                features: features.into(),
                label,
            });
        }
    }
    Dataset::new(samples)
}

/// Three equidistant points in ℝ³: `e1`, `e3` in class 0 and `e2` in class 1.
/// Trivial for a linear classifier, yet no single threshold separates the
/// same-class distance from the cross-class ones.
pub fn gen_fig2_dataset() -> Dataset {
    Dataset::from_parts(
        vec![Vec64::basis(3, 0), Vec64::basis(3, 2), Vec64::basis(3, 1)],
        vec![0, 0, 1],
    )
    .expect("fixture is valid")
}

/// Four points in the plane illustrating why single pairs give poor updates:
/// two samples of class 0 ("Alice") with a class-1 sample ("Bob") between
/// them, and a class-2 sample ("Carol") already past the margin from both
/// Alices at threshold 2, but inside it from Bob. Demo only.
pub fn gen_alice_bob_carol() -> Dataset {
    let pts = [[-1.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0, 1.5]];
    Dataset::from_parts(
        pts.iter().map(|p| Vec64::from(&p[..])).collect(),
        vec![0, 0, 1, 2],
    )
    .expect("fixture is valid")
}
