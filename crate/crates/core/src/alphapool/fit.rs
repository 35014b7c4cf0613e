//! Learning alpha jointly with a multinomial-logistic linear head.
//!
//! Full-batch gradient descent on mean cross-entropy plus `lambda/2 ||W||^2`.
//! The head sees post-normalized exact D² descriptors; alpha receives its
//! gradient through the normalization and the pooling operator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{pool, pool_backward, post_normalize, post_normalize_backward, PoolConfig, PoolError};
use crate::featio::Dataset;

/// Largest feature dimension accepted by the trainer (descriptors are D²).
pub const MAX_FIT_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("{0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error("need at least 2 classes, found {0}")]
    TooFewClasses(usize),
    #[error("train and valid datasets disagree on classes")]
    ClassMismatch,
    #[error("feature dimension {0} exceeds the trainer limit of {MAX_FIT_DIM}")]
    DimTooLarge(usize),
    #[error("image {index} has D={found}, expected {expected}")]
    MixedDim {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error(transparent)]
    Pool(#[from] PoolError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitHyper {
    pub learning_rate: f64,
    /// Step size for alpha; 0 freezes alpha at `alpha_init`.
    pub alpha_learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub lambda: f64,
    pub alpha_init: f64,
}

impl Default for FitHyper {
    fn default() -> Self {
        FitHyper {
            learning_rate: 1.0,
            alpha_learning_rate: 0.5,
            epochs: 300,
            seed: 0,
            lambda: 1e-3,
            alpha_init: 1.5,
        }
    }
}

/// `logits = W (z - center) / scale + b`, `W` stored row-major (classes × features).
///
/// `center` and `scale` are the mean training descriptor and the RMS distance
/// to it, recomputed on the full batch each epoch. Post-normalized descriptors
/// share a large common component and their spread grows with alpha, so
/// without this step the loss would reward alpha for spread alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub classes: usize,
    pub features: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub center: Vec<f64>,
    pub scale: f64,
}

impl LinearHead {
    pub fn standardize(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.center).map(|(v, m)| (v - m) / self.scale).collect()
    }

    pub fn logits(&self, z: &[f64]) -> Vec<f64> {
        let u = self.standardize(z);
        (0..self.classes)
            .map(|c| {
                let row = &self.weights[c * self.features..(c + 1) * self.features];
                self.bias[c] + row.iter().zip(&u).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    fn fit_statistics(&mut self, feats: &[(Vec<f64>, Vec<f64>)]) {
        let n = feats.len() as f64;
        let mut mean = vec![0.0; self.features];
        for (_, z) in feats {
            for (m, v) in mean.iter_mut().zip(z) {
                *m += v / n;
            }
        }
        let spread = feats
            .iter()
            .map(|(_, z)| z.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>())
            .sum::<f64>()
            / n;
        self.center = mean;
        self.scale = if spread > 0.0 { spread.sqrt() } else { 1.0 };
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// alpha before the first epoch followed by alpha after every epoch.
    pub alpha_trajectory: Vec<f64>,
    pub loss_trajectory: Vec<f64>,
    pub head: LinearHead,
    pub train_accuracy: f64,
    pub valid_accuracy: f64,
    pub valid_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub alpha: f64,
    pub valid_accuracy: f64,
    pub valid_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub points: Vec<GridPoint>,
    pub best_alpha: f64,
}

struct Prepared {
    dim: usize,
    classes: usize,
    locations: Vec<Vec<Vec<f64>>>,
    labels: Vec<usize>,
}

fn prepare(ds: &Dataset, which: &'static str, dim: Option<usize>) -> Result<Prepared, FitError> {
    if ds.is_empty() {
        return Err(FitError::EmptyDataset(which));
    }
    let expected = dim.unwrap_or_else(|| ds.maps[0].dim());
    if expected > MAX_FIT_DIM {
        return Err(FitError::DimTooLarge(expected));
    }
    let mut locations = Vec::with_capacity(ds.len());
    for (index, fm) in ds.maps.iter().enumerate() {
        if fm.dim() != expected {
            return Err(FitError::MixedDim {
                index,
                expected,
                found: fm.dim(),
            });
        }
        locations.push(fm.vectors().into_iter().map(<[f64]>::to_vec).collect());
    }
    Ok(Prepared {
        dim: expected,
        classes: ds.class_count(),
        locations,
        labels: ds.labels.clone(),
    })
}

fn softmax_xent(logits: &[f64], label: usize) -> (Vec<f64>, f64) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let loss = -(probs[label].max(f64::MIN_POSITIVE)).ln();
    (probs, loss)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn descriptors(data: &Prepared, cfg: &PoolConfig) -> Result<Vec<(Vec<f64>, Vec<f64>)>, PoolError> {
    data.locations
        .par_iter()
        .map(|locs| {
            let raw = pool(locs, cfg)?.into_vec();
            let z = post_normalize(&raw, cfg);
            Ok((raw, z))
        })
        .collect()
}

fn evaluate(head: &LinearHead, feats: &[(Vec<f64>, Vec<f64>)], labels: &[usize]) -> (f64, f64) {
    let mut correct = 0usize;
    let mut loss = 0.0;
    for ((_, z), &label) in feats.iter().zip(labels) {
        let logits = head.logits(z);
        let (_, l) = softmax_xent(&logits, label);
        loss += l;
        if argmax(&logits) == label {
            correct += 1;
        }
    }
    let n = labels.len() as f64;
    (correct as f64 / n, loss / n)
}

/// Jointly learns alpha and a linear head by full-batch gradient descent.
///
/// `cfg` supplies epsilon and the post-normalization switches; its alpha is
/// ignored in favour of `hyper.alpha_init`. alpha is kept at or above 1.
pub fn fit_alpha(train: &Dataset, valid: &Dataset, cfg: &PoolConfig, hyper: &FitHyper) -> Result<FitResult, FitError> {
    if !(hyper.learning_rate >= 0.0 && hyper.alpha_learning_rate >= 0.0 && hyper.lambda >= 0.0) {
        return Err(FitError::InvalidHyper("learning rates and lambda must be nonnegative".into()));
    }
    if !(hyper.alpha_init.is_finite() && hyper.alpha_init >= 1.0) {
        return Err(FitError::InvalidHyper(format!("alpha_init must be >= 1, got {}", hyper.alpha_init)));
    }
    let tr = prepare(train, "train", None)?;
    let va = prepare(valid, "valid", Some(tr.dim))?;
    if tr.classes < 2 {
        return Err(FitError::TooFewClasses(tr.classes));
    }
    if train.class_names != valid.class_names {
        return Err(FitError::ClassMismatch);
    }

    let classes = tr.classes;
    let features = tr.dim * tr.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let init = Normal::new(0.0, 0.01).expect("valid normal");
    let mut head = LinearHead {
        classes,
        features,
        weights: (0..classes * features).map(|_| init.sample(&mut rng)).collect(),
        bias: vec![0.0; classes],
        center: vec![0.0; features],
        scale: 1.0,
    };

    let mut alpha = hyper.alpha_init;
    let mut cfg = cfg.with_alpha(alpha);
    let learn_alpha = hyper.alpha_learning_rate > 0.0;
    let mut alpha_trajectory = vec![alpha];
    let mut loss_trajectory = Vec::with_capacity(hyper.epochs);
    let n = tr.labels.len() as f64;

    let mut feats = descriptors(&tr, &cfg)?;
    for epoch in 0..hyper.epochs {
        if learn_alpha && epoch > 0 {
            feats = descriptors(&tr, &cfg)?;
        }
        head.fit_statistics(&feats);
        let us: Vec<Vec<f64>> = feats.iter().map(|(_, z)| head.standardize(z)).collect();
        let mut grad_w = vec![0.0; head.weights.len()];
        let mut grad_b = vec![0.0; classes];
        let mut loss = 0.0;
        let mut dzs = Vec::with_capacity(feats.len());
        for ((_, z), (&label, u)) in feats.iter().zip(tr.labels.iter().zip(&us)) {
            let (mut probs, l) = softmax_xent(&head.logits(z), label);
            loss += l / n;
            probs[label] -= 1.0;
            for c in 0..classes {
                let g = probs[c] / n;
                grad_b[c] += g;
                let row = c * features;
                for f in 0..features {
                    grad_w[row + f] += g * u[f];
                }
            }
            dzs.push(probs);
        }
        loss += 0.5 * hyper.lambda * head.weights.iter().map(|w| w * w).sum::<f64>();
        if !loss.is_finite() {
            return Err(FitError::Diverged { epoch, loss });
        }
        loss_trajectory.push(loss);

        let d_alpha = if learn_alpha {
            // Gradient with respect to each standardized descriptor, then
            // through the batch mean and scale back to the raw descriptors.
            let hs: Vec<Vec<f64>> = dzs
                .iter()
                .map(|g| {
                    let mut h = vec![0.0; features];
                    for c in 0..classes {
                        let gc = g[c] / n;
                        let row = &head.weights[c * features..(c + 1) * features];
                        for (d, w) in h.iter_mut().zip(row) {
                            *d += gc * w;
                        }
                    }
                    h
                })
                .collect();
            let mut h_mean = vec![0.0; features];
            let mut hu = 0.0;
            for (h, u) in hs.iter().zip(&us) {
                for (m, v) in h_mean.iter_mut().zip(h) {
                    *m += v / n;
                }
                hu += h.iter().zip(u).map(|(a, b)| a * b).sum::<f64>();
            }
            let dzs: Vec<Vec<f64>> = hs
                .iter()
                .zip(&us)
                .map(|(h, u)| {
                    h.iter()
                        .zip(&h_mean)
                        .zip(u)
                        .map(|((hv, hm), uv)| (hv - hm - hu / n * uv) / head.scale)
                        .collect()
                })
                .collect();
            let parts: Vec<f64> = tr
                .locations
                .par_iter()
                .zip(feats.par_iter())
                .zip(dzs.par_iter())
                .map(|((locs, (raw, _)), dz)| {
                    let upstream = post_normalize_backward(raw, &cfg, dz);
                    pool_backward(locs, &cfg, &upstream).map(|g| g.d_alpha)
                })
                .collect::<Result<_, _>>()?;
            parts.iter().sum::<f64>()
        } else {
            0.0
        };

        for (w, g) in head.weights.iter_mut().zip(&grad_w) {
            *w -= hyper.learning_rate * (g + hyper.lambda * *w);
        }
        // The bias curvature is bounded by 1/2 regardless of the descriptors,
        // so its step is capped to stay stable at large weight learning rates.
        let bias_rate = hyper.learning_rate.min(1.0);
        for (b, g) in head.bias.iter_mut().zip(&grad_b) {
            *b -= bias_rate * g;
        }
        if learn_alpha {
            alpha = (alpha - hyper.alpha_learning_rate * d_alpha).max(1.0);
            if !alpha.is_finite() {
                return Err(FitError::Diverged { epoch, loss });
            }
            cfg = cfg.with_alpha(alpha);
        }
        alpha_trajectory.push(alpha);
    }

    if learn_alpha {
        feats = descriptors(&tr, &cfg)?;
        head.fit_statistics(&feats);
    }
    let (train_accuracy, _) = evaluate(&head, &feats, &tr.labels);
    let valid_feats = descriptors(&va, &cfg)?;
    let (valid_accuracy, valid_loss) = evaluate(&head, &valid_feats, &va.labels);
    Ok(FitResult {
        alpha_trajectory,
        loss_trajectory,
        head,
        train_accuracy,
        valid_accuracy,
        valid_loss,
    })
}

/// Trains the head at each fixed alpha and picks the best by validation
/// accuracy; ties go to lower validation loss, then to the smaller alpha.
pub fn alpha_grid_search(train: &Dataset, valid: &Dataset, cfg: &PoolConfig, hyper: &FitHyper, grid: &[f64]) -> Result<GridResult, FitError> {
    if grid.is_empty() {
        return Err(FitError::InvalidHyper("empty alpha grid".into()));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let fixed = FitHyper {
            alpha_init: alpha,
            alpha_learning_rate: 0.0,
            ..*hyper
        };
        let r = fit_alpha(train, valid, cfg, &fixed)?;
        points.push(GridPoint {
            alpha,
            valid_accuracy: r.valid_accuracy,
            valid_loss: r.valid_loss,
        });
    }
    let mut best = points[0];
    for p in &points[1..] {
        let better = p.valid_accuracy > best.valid_accuracy
            || (p.valid_accuracy == best.valid_accuracy && p.valid_loss < best.valid_loss)
            || (p.valid_accuracy == best.valid_accuracy && p.valid_loss == best.valid_loss && p.alpha < best.alpha);
        if better {
            best = *p;
        }
    }
    Ok(GridResult {
        points,
        best_alpha: best.alpha,
    })
}

/// The grid 1.0, 1.25, ..., 3.0.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=8).map(|k| 1.0 + 0.25 * k as f64).collect()
}
