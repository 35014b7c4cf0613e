//! The alpha-pooling operator.
//!
//! Each location `y` contributes the rank-1 matrix `p(y) y^T` with
//! `p(y)_d = sgn(y_d) (|y_d| + eps)^(alpha - 1)`; the pooled descriptor is the
//! mean over locations. `alpha = 1` gives rows equal to the mean vector
//! (average pooling) and `alpha = 2` gives the mean outer product (bilinear
//! pooling).

mod fit;

pub use fit::{alpha_grid_search, default_alpha_grid, fit_alpha, FitError, FitHyper, FitResult, GridPoint, GridResult, LinearHead, MAX_FIT_DIM};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_EPSILON: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum PoolError {
    #[error("cannot pool an empty location set")]
    Empty,
    #[error("location {index} has dimension {found}, expected {expected}")]
    DimMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in location {index}")]
    NonFinite { index: usize },
    #[error("invalid pool config: {0}")]
    InvalidConfig(String),
    #[error("upstream gradient has {found} entries, expected {expected}")]
    UpstreamShape { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub alpha: f64,
    pub epsilon: f64,
    pub signed_sqrt: bool,
    pub l2_normalize: bool,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            alpha: 1.5,
            epsilon: DEFAULT_EPSILON,
            signed_sqrt: true,
            l2_normalize: true,
        }
    }
}

impl PoolConfig {
    /// Raw pooling (no post-normalization) at the given alpha and epsilon.
    pub fn raw(alpha: f64, epsilon: f64) -> Self {
        PoolConfig {
            alpha,
            epsilon,
            signed_sqrt: false,
            l2_normalize: false,
        }
    }

    pub fn with_alpha(self, alpha: f64) -> Self {
        PoolConfig { alpha, ..self }
    }

    /// The same config with post-normalization switched off.
    pub fn without_post_norm(self) -> Self {
        PoolConfig {
            signed_sqrt: false,
            l2_normalize: false,
            ..self
        }
    }

    /// `epsilon = 0` is accepted and means "unstabilized".
    pub fn validate(&self) -> Result<(), PoolError> {
        if !self.alpha.is_finite() || self.alpha < 1.0 {
            return Err(PoolError::InvalidConfig(format!("alpha must be finite and >= 1, got {}", self.alpha)));
        }
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(PoolError::InvalidConfig(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        Ok(())
    }

    #[inline]
    pub fn signed_power_scalar(&self, y: f64) -> f64 {
        if y == 0.0 {
            0.0
        } else {
            y.signum() * (y.abs() + self.epsilon).powf(self.alpha - 1.0)
        }
    }

    /// `p(y)`: elementwise signed power with exponent `alpha - 1`.
    pub fn signed_power(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|&v| self.signed_power_scalar(v)).collect()
    }
}

/// D×D pooled matrix, stored row-major so the storage is its vectorization.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledDescriptor {
    dim: usize,
    n: usize,
    matrix: Vec<f64>,
}

impl PooledDescriptor {
    pub fn from_parts(dim: usize, n: usize, matrix: Vec<f64>) -> Self {
        assert_eq!(matrix.len(), dim * dim, "pooled matrix must be D×D");
        PooledDescriptor { dim, n, matrix }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of pooled locations.
    pub fn count(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.matrix[row * self.dim + col]
    }

    /// Row-major vectorization of length D².
    pub fn vectorized(&self) -> &[f64] {
        &self.matrix
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.matrix
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.matrix[r * self.dim..(r + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolGradients {
    pub d_inputs: Vec<Vec<f64>>,
    pub d_alpha: f64,
}

fn check_locations<V: AsRef<[f64]>>(locations: &[V]) -> Result<usize, PoolError> {
    let dim = locations.first().ok_or(PoolError::Empty)?.as_ref().len();
    if dim == 0 {
        return Err(PoolError::DimMismatch {
            index: 0,
            expected: 1,
            found: 0,
        });
    }
    for (index, y) in locations.iter().enumerate() {
        let y = y.as_ref();
        if y.len() != dim {
            return Err(PoolError::DimMismatch {
                index,
                expected: dim,
                found: y.len(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(PoolError::NonFinite { index });
        }
    }
    Ok(dim)
}

/// `p(y) y^T` for a single location, row-major.
pub fn alpha_prod(y: &[f64], cfg: &PoolConfig) -> Result<Vec<f64>, PoolError> {
    cfg.validate()?;
    let dim = check_locations(&[y])?;
    let p = cfg.signed_power(y);
    let mut out = vec![0.0; dim * dim];
    for (r, &pr) in p.iter().enumerate() {
        for (c, &yc) in y.iter().enumerate() {
            out[r * dim + c] = pr * yc;
        }
    }
    Ok(out)
}

/// Mean of `alpha_prod` over all locations. Post-normalization is not applied.
pub fn pool<V: AsRef<[f64]>>(locations: &[V], cfg: &PoolConfig) -> Result<PooledDescriptor, PoolError> {
    cfg.validate()?;
    let dim = check_locations(locations)?;
    let n = locations.len();
    let mut acc = vec![0.0; dim * dim];
    let mut p = vec![0.0; dim];
    for y in locations {
        let y = y.as_ref();
        for (pd, &yd) in p.iter_mut().zip(y) {
            *pd = cfg.signed_power_scalar(yd);
        }
        for (r, &pr) in p.iter().enumerate() {
            if pr == 0.0 {
                continue;
            }
            let row = &mut acc[r * dim..(r + 1) * dim];
            for (a, &yc) in row.iter_mut().zip(y) {
                *a += pr * yc;
            }
        }
    }
    let inv = 1.0 / n as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(PooledDescriptor { dim, n, matrix: acc })
}

#[inline]
fn signed_sqrt(v: f64) -> f64 {
    v.signum() * v.abs().sqrt()
}

/// Signed square root then L2 normalization, each when enabled.
pub fn post_normalize(z: &[f64], cfg: &PoolConfig) -> Vec<f64> {
    let mut out: Vec<f64> = if cfg.signed_sqrt {
        z.iter().map(|&v| if v == 0.0 { 0.0 } else { signed_sqrt(v) }).collect()
    } else {
        z.to_vec()
    };
    if cfg.l2_normalize {
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            out.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

/// Gradient of a scalar loss with respect to `z`, given its gradient with
/// respect to `post_normalize(z)`. Entries where `z` is exactly 0 get a zero
/// gradient through the signed square root.
pub fn post_normalize_backward(z: &[f64], cfg: &PoolConfig, upstream: &[f64]) -> Vec<f64> {
    let u: Vec<f64> = if cfg.signed_sqrt {
        z.iter().map(|&v| if v == 0.0 { 0.0 } else { signed_sqrt(v) }).collect()
    } else {
        z.to_vec()
    };
    let mut gu = upstream.to_vec();
    if cfg.l2_normalize {
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            let dot: f64 = u.iter().zip(upstream).map(|(a, b)| a * b).sum::<f64>() / norm;
            for (g, (&ui, &up)) in gu.iter_mut().zip(u.iter().zip(upstream)) {
                *g = (up - ui / norm * dot) / norm;
            }
        }
    }
    if cfg.signed_sqrt {
        for (g, &zi) in gu.iter_mut().zip(z) {
            *g = if zi == 0.0 { 0.0 } else { *g * 0.5 / zi.abs().sqrt() };
        }
    }
    gu
}

/// Analytic gradients of `<upstream, A>` where `A = pool(locations)`.
///
/// `dp_d/dy_d = (alpha - 1)(|y_d| + eps)^(alpha - 2)` away from zero and 0 at
/// `y_d == 0` (subgradient choice at the kink).
pub fn pool_backward<V: AsRef<[f64]>>(locations: &[V], cfg: &PoolConfig, upstream: &[f64]) -> Result<PoolGradients, PoolError> {
    cfg.validate()?;
    let dim = check_locations(locations)?;
    if upstream.len() != dim * dim {
        return Err(PoolError::UpstreamShape {
            expected: dim * dim,
            found: upstream.len(),
        });
    }
    let inv_n = 1.0 / locations.len() as f64;
    let mut d_alpha = 0.0;
    let mut d_inputs = Vec::with_capacity(locations.len());
    let mut gy = vec![0.0; dim];
    for y in locations {
        let y = y.as_ref();
        let p = cfg.signed_power(y);
        // gy = G y, gtp = G^T p
        let mut gtp = vec![0.0; dim];
        for r in 0..dim {
            let row = &upstream[r * dim..(r + 1) * dim];
            gy[r] = row.iter().zip(y).map(|(g, v)| g * v).sum();
            if p[r] != 0.0 {
                for (acc, &g) in gtp.iter_mut().zip(row) {
                    *acc += g * p[r];
                }
            }
        }
        let mut dy = gtp;
        for d in 0..dim {
            if y[d] == 0.0 {
                continue;
            }
            let base = y[d].abs() + cfg.epsilon;
            let dp = (cfg.alpha - 1.0) * base.powf(cfg.alpha - 2.0);
            dy[d] += gy[d] * dp;
            d_alpha += gy[d] * p[d] * base.ln();
        }
        dy.iter_mut().for_each(|v| *v *= inv_n);
        d_inputs.push(dy);
    }
    Ok(PoolGradients {
        d_inputs,
        d_alpha: d_alpha * inv_n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn alpha_prod_bilinear() {
        let m = alpha_prod(&[1.0, 2.0], &PoolConfig::raw(2.0, 0.0)).unwrap();
        assert_eq!(m, vec![1.0, 2.0, 2.0, 4.0]);
    }

    #[test]
    fn alpha_prod_average() {
        let m = alpha_prod(&[1.0, 2.0], &PoolConfig::raw(1.0, 0.0)).unwrap();
        assert_eq!(m, vec![1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn alpha_prod_scalar() {
        let m = alpha_prod(&[4.0], &PoolConfig::raw(1.5, 0.0)).unwrap();
        assert!((m[0] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn alpha_prod_rejects_nan() {
        assert_eq!(alpha_prod(&[f64::NAN], &PoolConfig::default()), Err(PoolError::NonFinite { index: 0 }));
    }

    #[test]
    fn sign_of_zero_is_zero() {
        let m = alpha_prod(&[0.0, 3.0], &PoolConfig::raw(1.0, 1e-4)).unwrap();
        assert_eq!(&m[..2], &[0.0, 0.0]);
    }

    #[test]
    fn pool_one_hots() {
        let a = pool(&[vec![1.0, 0.0], vec![0.0, 1.0]], &PoolConfig::raw(2.0, 0.0)).unwrap();
        assert_eq!(a.vectorized(), &[0.5, 0.0, 0.0, 0.5]);
        assert_eq!(a.count(), 2);
    }

    #[test]
    fn pool_alpha_one_rows_are_mean() {
        let locs = vec![vec![1.0, 2.0, 3.0], vec![0.5, 0.25, 4.0]];
        let a = pool(&locs, &PoolConfig::raw(1.0, 0.0)).unwrap();
        let mean = [0.75, 1.125, 3.5];
        for r in 0..3 {
            assert!(close(a.row(r), &mean, 1e-12));
        }
    }

    #[test]
    fn pool_errors() {
        let empty: Vec<Vec<f64>> = vec![];
        assert_eq!(pool(&empty, &PoolConfig::default()), Err(PoolError::Empty));
        assert!(matches!(
            pool(&[vec![1.0], vec![1.0, 2.0]], &PoolConfig::default()),
            Err(PoolError::DimMismatch { index: 1, .. })
        ));
        assert!(matches!(pool(&[vec![1.0]], &PoolConfig::raw(0.5, 0.0)), Err(PoolError::InvalidConfig(_))));
    }

    #[test]
    fn post_normalize_examples() {
        let cfg = PoolConfig::default();
        let out = post_normalize(&[4.0, -9.0], &cfg);
        let s = 13f64.sqrt();
        assert!(close(&out, &[2.0 / s, -3.0 / s], 1e-15));
        assert_eq!(post_normalize(&[0.0, 0.0], &cfg), vec![0.0, 0.0]);
        let unit = [0.6, 0.8];
        let l2_only = PoolConfig {
            signed_sqrt: false,
            ..cfg
        };
        assert!(close(&post_normalize(&unit, &l2_only), &unit, 1e-15));
    }

    #[test]
    fn post_normalize_backward_matches_finite_differences() {
        let cfg = PoolConfig::default();
        let z = [0.3, 1.7, 0.05, 2.2];
        let up = [0.4, -1.0, 0.7, 0.2];
        let g = post_normalize_backward(&z, &cfg, &up);
        let h = 1e-6;
        for k in 0..z.len() {
            let mut zp = z;
            let mut zm = z;
            zp[k] += h;
            zm[k] -= h;
            let f = |v: &[f64]| post_normalize(v, &cfg).iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();
            let fd = (f(&zp) - f(&zm)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6, "k={k} fd={fd} an={}", g[k]);
        }
    }

    #[test]
    fn backward_zero_upstream() {
        let g = pool_backward(&[vec![0.3, 0.7]], &PoolConfig::default(), &[0.0; 4]).unwrap();
        assert_eq!(g.d_alpha, 0.0);
        assert!(g.d_inputs[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_bilinear_reduces_to_symmetric_form() {
        let locs = vec![vec![0.3, 0.9], vec![1.2, 0.4], vec![0.5, 0.5]];
        let up = [0.2, -0.7, 1.1, 0.4];
        let g = pool_backward(&locs, &PoolConfig::raw(2.0, 0.0), &up).unwrap();
        let n = locs.len() as f64;
        for (y, dy) in locs.iter().zip(&g.d_inputs) {
            // (G + G^T) y / n
            let expect = [
                ((up[0] + up[0]) * y[0] + (up[1] + up[2]) * y[1]) / n,
                ((up[2] + up[1]) * y[0] + (up[3] + up[3]) * y[1]) / n,
            ];
            assert!(close(dy, &expect, 1e-12), "{dy:?} vs {expect:?}");
        }
    }

    #[test]
    fn backward_upstream_shape_checked() {
        assert_eq!(
            pool_backward(&[vec![1.0, 2.0]], &PoolConfig::default(), &[0.0; 3]),
            Err(PoolError::UpstreamShape { expected: 4, found: 3 })
        );
    }
}
