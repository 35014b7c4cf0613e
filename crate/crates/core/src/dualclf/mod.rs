//! One-vs-rest kernel ridge classifier in dual form.
//!
//! Each class solves `(K + lambda I) beta_c = t_c` with `t_c` the +1/-1
//! one-vs-rest target, so every training image carries an explicit weight and
//! the class score of a test image is `sum_k beta_ck <z_k, z~>`.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alphapool::PoolConfig;
use crate::kernelview::KernelMatrix;

pub const PSD_TOLERANCE: f64 = 1e-8;
const SYMMETRY_TOLERANCE: f64 = 1e-10;
const RESIDUAL_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum DualError {
    #[error("gram matrix is empty")]
    Empty,
    #[error("gram matrix is {n}x{n} but {labels} labels were given")]
    LabelCount { n: usize, labels: usize },
    #[error("label {label} of training image {index} is outside 0..{classes}")]
    BadLabel { index: usize, label: usize, classes: usize },
    #[error("lambda must be positive and finite, got {0}")]
    BadLambda(f64),
    #[error("gram matrix is not symmetric at ({i}, {j})")]
    NotSymmetric { i: usize, j: usize },
    #[error("gram matrix is not positive semidefinite within tolerance (pivot {pivot} = {value:e})")]
    NotPsd { pivot: usize, value: f64 },
    #[error("regularized system is singular (pivot {pivot} = {value:e})")]
    Singular { pivot: usize, value: f64 },
    #[error("class {class} solve left residual {residual:e} (target norm {target:e})")]
    Residual { class: usize, residual: f64, target: f64 },
    #[error("non-finite value in gram matrix")]
    NonFinite,
    #[error("kernel row has {found} entries, classifier has {expected} training images")]
    RowLength { expected: usize, found: usize },
    #[error("classifier io: {0}")]
    Io(#[from] std::io::Error),
    #[error("classifier format: {0}")]
    Format(#[from] serde_json::Error),
}

/// Which descriptors the gram matrix was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendTag {
    Exact,
    Sketch { sketch_dim: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualClassifier {
    pub class_names: Vec<String>,
    pub train_ids: Vec<String>,
    pub lambda: f64,
    /// `betas[c][k]`: weight of training image `k` for class `c`.
    pub betas: Vec<Vec<f64>>,
    pub backend: BackendTag,
    pub pool: PoolConfig,
}

/// `1e-3 * trace(K) / N`, floored to stay positive.
pub fn default_lambda(k: &KernelMatrix) -> f64 {
    let l = 1e-3 * k.trace() / k.n as f64;
    if l > 0.0 && l.is_finite() {
        l
    } else {
        1e-12
    }
}

/// Lower Cholesky factor of `a + shift I`, row-major, natural pivot order.
/// On failure returns the offending pivot and its value.
fn cholesky(a: &[f64], n: usize, shift: f64) -> Result<Vec<f64>, (usize, f64)> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j] + shift;
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err((j, d));
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    y
}

fn residual(a: &[f64], n: usize, lambda: f64, x: &[f64], b: &[f64]) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let ax: f64 = a[i * n..(i + 1) * n].iter().zip(x).map(|(p, q)| p * q).sum();
            b[i] - ax - lambda * x[i]
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn train_dual(k: &KernelMatrix, labels: &[usize], classes: usize, lambda: f64) -> Result<DualClassifier, DualError> {
    let n = k.n;
    if n == 0 {
        return Err(DualError::Empty);
    }
    if labels.len() != n {
        return Err(DualError::LabelCount { n, labels: labels.len() });
    }
    for (index, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(DualError::BadLabel { index, label, classes });
        }
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(DualError::BadLambda(lambda));
    }
    if k.values.iter().any(|v| !v.is_finite()) {
        return Err(DualError::NonFinite);
    }
    let scale = k.values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        for j in i + 1..n {
            if (k.get(i, j) - k.get(j, i)).abs() > SYMMETRY_TOLERANCE * scale {
                return Err(DualError::NotSymmetric { i, j });
            }
        }
    }
    cholesky(&k.values, n, PSD_TOLERANCE * scale).map_err(|(pivot, value)| DualError::NotPsd { pivot, value })?;
    let l = cholesky(&k.values, n, lambda).map_err(|(pivot, value)| DualError::Singular { pivot, value })?;

    let betas: Vec<Result<Vec<f64>, DualError>> = (0..classes)
        .into_par_iter()
        .map(|c| {
            let t: Vec<f64> = labels.iter().map(|&y| if y == c { 1.0 } else { -1.0 }).collect();
            let mut x = cholesky_solve(&l, n, &t);
            // one step of iterative refinement
            let r = residual(&k.values, n, lambda, &x, &t);
            let dx = cholesky_solve(&l, n, &r);
            x.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
            let res = norm(&residual(&k.values, n, lambda, &x, &t));
            let target = norm(&t);
            if !(res <= RESIDUAL_TOLERANCE * target) {
                return Err(DualError::Residual { class: c, residual: res, target });
            }
            Ok(x)
        })
        .collect();
    let betas = betas.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(DualClassifier {
        class_names: (0..classes).map(|c| format!("class{c}")).collect(),
        train_ids: (0..n).map(|i| format!("train{i}")).collect(),
        lambda,
        betas,
        backend: BackendTag::Exact,
        pool: PoolConfig::default(),
    })
}

impl DualClassifier {
    pub fn class_count(&self) -> usize {
        self.betas.len()
    }

    pub fn train_count(&self) -> usize {
        self.train_ids.len()
    }

    /// `scores_c = sum_k beta_ck * kernel_row_k`.
    pub fn score(&self, kernel_row: &[f64]) -> Result<Vec<f64>, DualError> {
        score(self, kernel_row)
    }

    pub fn predict(&self, kernel_row: &[f64]) -> Result<usize, DualError> {
        let s = self.score(kernel_row)?;
        Ok((0..s.len()).fold(0, |best, c| if s[c] > s[best] { c } else { best }))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("classifier serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DualError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), DualError> {
        fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, DualError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

pub fn score(clf: &DualClassifier, kernel_row: &[f64]) -> Result<Vec<f64>, DualError> {
    let n = clf.train_count();
    if kernel_row.len() != n || clf.betas.iter().any(|b| b.len() != n) {
        return Err(DualError::RowLength {
            expected: n,
            found: kernel_row.len(),
        });
    }
    Ok(clf.betas.iter().map(|b| b.iter().zip(kernel_row).map(|(x, y)| x * y).sum()).collect())
}
