//! Kernels between pooled descriptors and the matching diagnostics behind them.
//!
//! For raw (not post-normalized) descriptors the inner product of two pooled
//! matrices equals a double sum over location pairs:
//! `<A_k, A_l> = sum_ij <y_i, y~_j> <p(y_i), p(y~_j)> / (n_k n_l)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alphapool::{pool, post_normalize, PoolConfig, PoolError, PooledDescriptor};
use crate::featio::FeatureMap;
use crate::sketch::{sketch_pool, SketchError, SketchPlan};

/// Multiply-add budget for the pairwise breakdown before `force` is required.
pub const PAIRWISE_GUARD: u64 = 100_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("descriptor shapes differ ({left} vs {right})")]
    ShapeMismatch { left: usize, right: usize },
    #[error("location set {side} is empty")]
    Empty { side: usize },
    #[error("pairwise breakdown needs {ops} multiply-adds (limit {limit}); use the primal kernel or force it")]
    GuardExceeded { ops: u64, limit: u64 },
    #[error("top_m must be at least 1")]
    InvalidTopM,
    #[error("image {index} has dimension {found}, expected {expected}")]
    MixedDim {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Sketch(#[from] SketchError),
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `<vec(A_k), vec(A_l)>`.
pub fn kernel_primal(a: &PooledDescriptor, b: &PooledDescriptor) -> Result<f64, KernelError> {
    if a.dim() != b.dim() {
        return Err(KernelError::ShapeMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(dot(a.vectorized(), b.vectorized()))
}

/// Summands of the pairwise kernel, row-major `rows × cols`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseBreakdown {
    pub total: f64,
    pub rows: usize,
    pub cols: usize,
    pub contributions: Vec<f64>,
}

impl PairwiseBreakdown {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.contributions[i * self.cols + j]
    }
}

fn check_pair<V: AsRef<[f64]>, W: AsRef<[f64]>>(yk: &[V], yl: &[W]) -> Result<usize, KernelError> {
    if yk.is_empty() {
        return Err(KernelError::Empty { side: 0 });
    }
    if yl.is_empty() {
        return Err(KernelError::Empty { side: 1 });
    }
    let dim = yk[0].as_ref().len();
    for (index, v) in yk.iter().map(|v| v.as_ref()).chain(yl.iter().map(|v| v.as_ref())).enumerate() {
        if v.len() != dim {
            return Err(PoolError::DimMismatch {
                index,
                expected: dim,
                found: v.len(),
            }
            .into());
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(PoolError::NonFinite { index }.into());
        }
    }
    Ok(dim)
}

/// Refuses work above [`PAIRWISE_GUARD`] multiply-adds unless `force` is set.
pub fn check_guard(n_k: usize, n_l: usize, dim: usize, force: bool) -> Result<(), KernelError> {
    let ops = (n_k as u64).saturating_mul(n_l as u64).saturating_mul(2 * dim as u64);
    if !force && ops > PAIRWISE_GUARD {
        return Err(KernelError::GuardExceeded {
            ops,
            limit: PAIRWISE_GUARD,
        });
    }
    Ok(())
}

pub fn kernel_pairwise<V: AsRef<[f64]> + Sync, W: AsRef<[f64]> + Sync>(yk: &[V], yl: &[W], cfg: &PoolConfig) -> Result<PairwiseBreakdown, KernelError> {
    kernel_pairwise_with(yk, yl, cfg, false)
}

pub fn kernel_pairwise_with<V: AsRef<[f64]> + Sync, W: AsRef<[f64]> + Sync>(
    yk: &[V],
    yl: &[W],
    cfg: &PoolConfig,
    force: bool,
) -> Result<PairwiseBreakdown, KernelError> {
    cfg.validate()?;
    let dim = check_pair(yk, yl)?;
    check_guard(yk.len(), yl.len(), dim, force)?;
    let pk: Vec<Vec<f64>> = yk.iter().map(|y| cfg.signed_power(y.as_ref())).collect();
    let pl: Vec<Vec<f64>> = yl.iter().map(|y| cfg.signed_power(y.as_ref())).collect();
    let norm = 1.0 / (yk.len() as f64 * yl.len() as f64);
    let contributions: Vec<f64> = yk
        .par_iter()
        .zip(pk.par_iter())
        .flat_map_iter(|(y, p)| {
            let y = y.as_ref();
            yl.iter().zip(&pl).map(move |(u, q)| dot(y, u.as_ref()) * dot(p, q) * norm)
        })
        .collect();
    let total = contributions.iter().sum();
    Ok(PairwiseBreakdown {
        total,
        rows: yk.len(),
        cols: yl.len(),
        contributions,
    })
}

/// `<y, y~>` recovered from norms and the Euclidean distance.
pub fn inner_via_distance(y: &[f64], other: &[f64]) -> Result<f64, KernelError> {
    if y.len() != other.len() {
        return Err(KernelError::ShapeMismatch {
            left: y.len(),
            right: other.len(),
        });
    }
    let dist2: f64 = y.iter().zip(other).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(0.5 * (dot(y, y) + dot(other, other) - dist2))
}

/// Per-location feature norms divided by a common maximum, one grid per scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormMap {
    pub scales: Vec<NormGrid>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormGrid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl NormMap {
    /// Values in flattened location order.
    pub fn flat(&self) -> Vec<f64> {
        self.scales.iter().flat_map(|g| g.values.iter().copied()).collect()
    }
}

fn raw_norms(fm: &FeatureMap) -> NormMap {
    NormMap {
        scales: fm
            .scales()
            .iter()
            .map(|g| NormGrid {
                height: g.height(),
                width: g.width(),
                values: g.values().chunks_exact(g.dim()).map(|v| dot(v, v).sqrt()).collect(),
            })
            .collect(),
    }
}

fn scale_norms(m: &mut NormMap, max: f64) {
    for g in &mut m.scales {
        for v in &mut g.values {
            *v = if max > 0.0 { *v / max } else { 0.0 };
        }
    }
}

fn max_of(m: &NormMap) -> f64 {
    m.scales.iter().flat_map(|g| g.values.iter()).fold(0.0, |a, &b| a.max(b))
}

pub fn norm_map(fm: &FeatureMap) -> NormMap {
    let mut m = raw_norms(fm);
    let max = max_of(&m);
    scale_norms(&mut m, max);
    m
}

/// Norm maps of two images sharing the larger of their two maxima.
pub fn norm_map_pair(a: &FeatureMap, b: &FeatureMap) -> (NormMap, NormMap) {
    let mut ma = raw_norms(a);
    let mut mb = raw_norms(b);
    let max = max_of(&ma).max(max_of(&mb));
    scale_norms(&mut ma, max);
    scale_norms(&mut mb, max);
    (ma, mb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    L2Best,
    Inner,
    InnerSquared,
}

/// One matched pair, by flattened location index on each side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub i: usize,
    pub j: usize,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub kind: MatchKind,
    pub matches: Vec<Match>,
    /// No positive maximum existed to normalize by.
    pub degenerate: bool,
}

/// The `top_m` closest pairs. Strength is `d_min / d_pair`; distances are
/// floored at a tiny multiple of the feature scale so exact matches score 1
/// and every other pair stays positive.
pub fn best_l2_matches<V: AsRef<[f64]>, W: AsRef<[f64]>>(yk: &[V], yl: &[W], top_m: usize) -> Result<MatchSet, KernelError> {
    if top_m < 1 {
        return Err(KernelError::InvalidTopM);
    }
    check_pair(yk, yl)?;
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(yk.len() * yl.len());
    let mut scale: f64 = 0.0;
    for (i, y) in yk.iter().enumerate() {
        let y = y.as_ref();
        scale = scale.max(dot(y, y).sqrt());
        for (j, u) in yl.iter().enumerate() {
            let u = u.as_ref();
            let d: f64 = y.iter().zip(u).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            pairs.push((d, i, j));
        }
    }
    for u in yl {
        scale = scale.max(dot(u.as_ref(), u.as_ref()).sqrt());
    }
    let floor = 1e-12 * scale.max(1.0);
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let d_min = pairs[0].0.max(floor);
    let matches = pairs
        .iter()
        .take(top_m)
        .map(|&(d, i, j)| Match {
            i,
            j,
            strength: d_min / d.max(floor),
        })
        .collect();
    Ok(MatchSet {
        kind: MatchKind::L2Best,
        matches,
        degenerate: false,
    })
}

/// Pairs whose inner product (or its square) exceeds `threshold` times the
/// maximum over all pairs. The maximum itself is always kept, so a threshold
/// of 1 returns exactly the argmax pair(s). Order is (i, j) lexicographic.
pub fn thresholded_matches<V: AsRef<[f64]>, W: AsRef<[f64]>>(yk: &[V], yl: &[W], threshold: f64, squared: bool) -> Result<MatchSet, KernelError> {
    check_pair(yk, yl)?;
    let kind = if squared { MatchKind::InnerSquared } else { MatchKind::Inner };
    let cols = yl.len();
    let raw: Vec<f64> = yk
        .iter()
        .flat_map(|y| {
            yl.iter().map(move |u| {
                let s = dot(y.as_ref(), u.as_ref());
                if squared {
                    s * s
                } else {
                    s
                }
            })
        })
        .collect();
    let max = raw.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if max <= 0.0 {
        return Ok(MatchSet {
            kind,
            matches: Vec::new(),
            degenerate: true,
        });
    }
    let matches = raw
        .iter()
        .enumerate()
        .filter_map(|(idx, &v)| {
            let strength = v / max;
            (strength > threshold || v == max).then_some(Match {
                i: idx / cols,
                j: idx % cols,
                strength,
            })
        })
        .collect();
    Ok(MatchSet {
        kind,
        matches,
        degenerate: false,
    })
}

#[derive(Debug, Clone)]
pub enum GramBackend {
    Exact,
    Sketch(SketchPlan),
}

/// Symmetric `n × n` kernel matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelMatrix {
    pub n: usize,
    pub values: Vec<f64>,
}

impl KernelMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }
}

fn check_dims(maps: &[FeatureMap]) -> Result<(), KernelError> {
    if let Some(first) = maps.first() {
        for (index, m) in maps.iter().enumerate() {
            if m.dim() != first.dim() {
                return Err(KernelError::MixedDim {
                    index,
                    expected: first.dim(),
                    found: m.dim(),
                });
            }
        }
    }
    Ok(())
}

/// Post-normalized descriptor vector of one image: the exact `D^2` vector or
/// the compact sketch.
pub fn descriptor(fm: &FeatureMap, cfg: &PoolConfig, backend: &GramBackend) -> Result<Vec<f64>, KernelError> {
    let locs = fm.vectors();
    let raw = match backend {
        GramBackend::Exact => pool(&locs, cfg)?.into_vec(),
        GramBackend::Sketch(plan) => sketch_pool(&locs, cfg, plan)?.values,
    };
    Ok(post_normalize(&raw, cfg))
}

/// Descriptors for every map, in input order.
pub fn descriptors(maps: &[FeatureMap], cfg: &PoolConfig, backend: &GramBackend) -> Result<Vec<Vec<f64>>, KernelError> {
    check_dims(maps)?;
    maps.par_iter().map(|m| descriptor(m, cfg, backend)).collect()
}

pub fn gram_from_descriptors(desc: &[Vec<f64>]) -> KernelMatrix {
    let n = desc.len();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (i..n).map(|j| dot(&desc[i], &desc[j])).collect())
        .collect();
    let mut values = vec![0.0; n * n];
    for (i, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            let j = i + off;
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    KernelMatrix { n, values }
}

pub fn gram_matrix(maps: &[FeatureMap], cfg: &PoolConfig, backend: &GramBackend) -> Result<KernelMatrix, KernelError> {
    Ok(gram_from_descriptors(&descriptors(maps, cfg, backend)?))
}

/// Kernel row of `query` against each training descriptor.
pub fn kernel_row(query: &[f64], train: &[Vec<f64>]) -> Vec<f64> {
    train.iter().map(|t| dot(query, t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sketch::{make_plan, DEFAULT_SKETCH_DIM};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..dim).map(|_| rng.random::<f64>()).collect()).collect()
    }

    fn raw(alpha: f64) -> PoolConfig {
        PoolConfig::raw(alpha, 1e-4)
    }

    #[test]
    fn primal_examples() {
        let cfg = PoolConfig::raw(2.0, 0.0);
        let z = pool(&[vec![1.0, 0.0], vec![0.0, 1.0]], &cfg).unwrap();
        assert!((kernel_primal(&z, &z).unwrap() - 0.5).abs() < 1e-15);
        let a = pool(&[vec![1.0, 0.0]], &cfg).unwrap();
        let b = pool(&[vec![0.0, 1.0]], &cfg).unwrap();
        assert_eq!(kernel_primal(&a, &b).unwrap(), 0.0);
        let c = pool(&[vec![1.0, 2.0, 3.0]], &cfg).unwrap();
        let fro: f64 = c.vectorized().iter().map(|v| v * v).sum();
        assert_eq!(kernel_primal(&c, &c).unwrap(), fro);
        assert!(matches!(kernel_primal(&a, &c), Err(KernelError::ShapeMismatch { .. })));
    }

    #[test]
    fn pairwise_single_locations() {
        let cfg = raw(1.5);
        let y = [0.3, 1.2, 0.0];
        let u = [0.9, 0.1, 2.0];
        let b = kernel_pairwise(&[y], &[u], &cfg).unwrap();
        let want = dot(&y, &u) * dot(&cfg.signed_power(&y), &cfg.signed_power(&u));
        assert!((b.total - want).abs() < 1e-15);
    }

    #[test]
    fn bilinear_contributions_are_squares() {
        let cfg = PoolConfig::raw(2.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_set(&mut rng, 5, 4);
        let b = random_set(&mut rng, 3, 4);
        let br = kernel_pairwise(&a, &b, &cfg).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let want = dot(&a[i], &b[j]).powi(2) / 15.0;
                assert!((br.get(i, j) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn trace_identity_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &alpha in &[1.0, 1.5, 2.0, 2.5, 3.0] {
            let a = random_set(&mut rng, 16, 8);
            let b = random_set(&mut rng, 16, 8);
            let primal = kernel_primal(&pool(&a, &raw(alpha)).unwrap(), &pool(&b, &raw(alpha)).unwrap()).unwrap();
            let pw = kernel_pairwise(&a, &b, &raw(alpha)).unwrap().total;
            assert!(((primal - pw) / primal).abs() < 1e-10, "alpha {alpha}");
        }
    }

    #[test]
    fn pairwise_errors() {
        let empty: Vec<Vec<f64>> = vec![];
        assert_eq!(kernel_pairwise(&empty, &[vec![1.0]], &raw(2.0)).unwrap_err(), KernelError::Empty { side: 0 });
        assert!(matches!(check_guard(10_000, 10_000, 8, false), Err(KernelError::GuardExceeded { .. })));
        assert!(check_guard(10_000, 10_000, 8, true).is_ok());
    }

    #[test]
    fn adding_locations_grows_unnormalized_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = raw(1.7);
        let a = random_set(&mut rng, 6, 5);
        let b = random_set(&mut rng, 4, 5);
        let extra = random_set(&mut rng, 3, 5);
        let grown: Vec<Vec<f64>> = a.iter().chain(&extra).cloned().collect();
        let before = kernel_pairwise(&a, &b, &cfg).unwrap().total * 24.0;
        let after = kernel_pairwise(&grown, &b, &cfg).unwrap().total * 36.0;
        let added = kernel_pairwise(&extra, &b, &cfg).unwrap().total * 12.0;
        assert!(after >= before);
        assert!((after - before - added).abs() < 1e-12 * after);
    }

    #[test]
    fn polarization_examples() {
        assert_eq!(inner_via_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(inner_via_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let v = random_set(&mut rng, 2, 16);
            assert!((inner_via_distance(&v[0], &v[1]).unwrap() - dot(&v[0], &v[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn norm_map_examples() {
        let one_hot = FeatureMap::single("a", 2, 2, 2, vec![0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(norm_map(&one_hot).flat(), vec![0.0, 1.0, 0.0, 0.0]);
        let constant = FeatureMap::single("b", 1, 3, 1, vec![2.0; 3]).unwrap();
        assert_eq!(norm_map(&constant).flat(), vec![1.0; 3]);
        let zero = FeatureMap::single("c", 1, 2, 1, vec![0.0; 2]).unwrap();
        assert_eq!(norm_map(&zero).flat(), vec![0.0; 2]);
        let (pa, pb) = norm_map_pair(&constant, &one_hot);
        assert!(pa.flat().iter().all(|&v| (v - 2.0 / 3.0).abs() < 1e-15));
        assert_eq!(pb.flat()[1], 1.0);
    }

    #[test]
    fn norm_map_argmax_matches_raw_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let vals: Vec<f64> = (0..5 * 4 * 3).map(|_| rng.random::<f64>()).collect();
        let fm = FeatureMap::single("r", 5, 4, 3, vals.clone()).unwrap();
        let flat = norm_map(&fm).flat();
        let norms: Vec<f64> = vals.chunks(3).map(|v| dot(v, v).sqrt()).collect();
        let argmax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        assert_eq!(argmax(&flat), argmax(&norms));
        assert!(flat.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn l2_identical_maps_match_self_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_set(&mut rng, 6, 3);
        let m = best_l2_matches(&a, &a, 6).unwrap();
        for (k, mt) in m.matches.iter().enumerate() {
            assert_eq!((mt.i, mt.j), (k, k));
            assert_eq!(mt.strength, 1.0);
        }
    }

    #[test]
    fn l2_matches_agree_with_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_set(&mut rng, 7, 4);
        let b = random_set(&mut rng, 9, 4);
        let m = best_l2_matches(&a, &b, 5).unwrap();
        let mut all = Vec::new();
        for i in 0..7 {
            for j in 0..9 {
                let d: f64 = (0..4).map(|k| (a[i][k] - b[j][k]).powi(2)).sum::<f64>().sqrt();
                all.push((d, i, j));
            }
        }
        all.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let got: Vec<(usize, usize)> = m.matches.iter().map(|x| (x.i, x.j)).collect();
        let want: Vec<(usize, usize)> = all.iter().take(5).map(|x| (x.1, x.2)).collect();
        assert_eq!(got, want);
        assert_eq!(m.matches[0].strength, 1.0);
        assert!(m.matches.iter().all(|x| x.strength > 0.0 && x.strength <= 1.0));
        assert_eq!(best_l2_matches(&a, &b, 0).unwrap_err(), KernelError::InvalidTopM);
    }

    #[test]
    fn l2_ties_break_lexicographically() {
        let a = vec![vec![0.0], vec![0.0]];
        let b = vec![vec![1.0], vec![1.0]];
        let m = best_l2_matches(&a, &b, 4).unwrap();
        let got: Vec<(usize, usize)> = m.matches.iter().map(|x| (x.i, x.j)).collect();
        assert_eq!(got, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn thresholded_matches_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_set(&mut rng, 8, 4);
        let b = random_set(&mut rng, 8, 4);
        let plain = thresholded_matches(&a, &b, 0.5, false).unwrap();
        let sq = thresholded_matches(&a, &b, 0.5, true).unwrap();
        assert!(sq.matches.len() <= plain.matches.len());
        for m in &sq.matches {
            assert!(plain.matches.iter().any(|p| p.i == m.i && p.j == m.j));
        }
        let top = thresholded_matches(&a, &b, 1.0, false).unwrap();
        assert_eq!(top.matches.len(), 1);
        assert_eq!(top.matches[0].strength, 1.0);
        let zero = vec![vec![0.0; 4]; 3];
        let z = thresholded_matches(&zero, &zero, 0.5, false).unwrap();
        assert!(z.degenerate && z.matches.is_empty());
    }

    #[test]
    fn gram_examples() {
        let cfg = PoolConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let fm = |id: &str, rng: &mut ChaCha8Rng| FeatureMap::from_vectors(id, &random_set(rng, 6, 4)).unwrap();
        let one = vec![fm("a", &mut rng)];
        let g = gram_matrix(&one, &cfg, &GramBackend::Exact).unwrap();
        assert!((g.get(0, 0) - 1.0).abs() < 1e-12);
        let b = fm("b", &mut rng);
        let maps = vec![one[0].clone(), b.clone(), b];
        let g = gram_matrix(&maps, &cfg, &GramBackend::Exact).unwrap();
        assert_eq!(g.row(1), g.row(2));
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(g.get(i, j), g.get(j, i));
            }
        }
        let other = FeatureMap::from_vectors("c", &random_set(&mut rng, 2, 3)).unwrap();
        assert!(matches!(gram_matrix(&[maps[0].clone(), other], &cfg, &GramBackend::Exact), Err(KernelError::MixedDim { index: 1, .. })));
    }

    #[test]
    fn sketch_gram_tracks_exact_gram() {
        let cfg = PoolConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let maps: Vec<FeatureMap> = (0..10).map(|k| FeatureMap::from_vectors(format!("m{k}"), &random_set(&mut rng, 12, 16)).unwrap()).collect();
        let exact = gram_matrix(&maps, &cfg, &GramBackend::Exact).unwrap();
        let plan = make_plan(16, DEFAULT_SKETCH_DIM, 3).unwrap();
        let approx = gram_matrix(&maps, &cfg, &GramBackend::Sketch(plan)).unwrap();
        for (e, a) in exact.values.iter().zip(&approx.values) {
            assert!(((e - a) / e).abs() <= 0.1, "{e} vs {a}");
        }
    }

    #[test]
    fn gram_is_positive_semidefinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let maps: Vec<FeatureMap> = (0..25).map(|k| FeatureMap::from_vectors(format!("m{k}"), &random_set(&mut rng, 9, 5)).unwrap()).collect();
        for backend in [GramBackend::Exact, GramBackend::Sketch(make_plan(5, 256, 1).unwrap())] {
            let g = gram_matrix(&maps, &PoolConfig::default(), &backend).unwrap();
            let m = nalgebra::DMatrix::from_row_slice(g.n, g.n, &g.values);
            let eig = nalgebra::SymmetricEigen::new(m);
            assert!(eig.eigenvalues.iter().all(|&e| e >= -1e-8), "{:?}", eig.eigenvalues.min());
        }
    }
}
