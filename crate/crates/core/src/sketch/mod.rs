//! Tensor-sketch compression of the pooled alpha-product.
//!
//! Each location contributes `IFFT(FFT(CS1(p(y))) * FFT(CS2(y)))`, the sketch of
//! the rank-1 term `p(y) y^T`. Because the transform is linear the spectra are
//! summed first and a single inverse transform is taken per image.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alphapool::{PoolConfig, PoolError};

pub const DEFAULT_SKETCH_DIM: usize = 8096;

/// Locations summed per parallel work item. Fixed so results do not depend on
/// the worker count.
const CHUNK: usize = 32;

const IMAG_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum SketchError {
    #[error("sketch plan needs input and sketch dimensions of at least 1 (got {input_dim}, {sketch_dim})")]
    ZeroDim { input_dim: usize, sketch_dim: usize },
    #[error("plan expects dimension {expected}, location {index} has {found}")]
    DimMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("compact descriptors come from different plans ({left:016x} vs {right:016x})")]
    PlanMismatch { left: u64, right: u64 },
    #[error("compact descriptor lengths differ ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("inverse transform left an imaginary residue of {residue:e}")]
    ImaginaryResidue { residue: f64 },
    #[error(transparent)]
    Pool(#[from] PoolError),
}

/// Hash and sign tables for the two count sketches plus cached transforms.
#[derive(Clone)]
pub struct SketchPlan {
    input_dim: usize,
    sketch_dim: usize,
    seed: u64,
    h1: Vec<usize>,
    h2: Vec<usize>,
    s1: Vec<f64>,
    s2: Vec<f64>,
    id: u64,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for SketchPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SketchPlan")
            .field("input_dim", &self.input_dim)
            .field("sketch_dim", &self.sketch_dim)
            .field("seed", &self.seed)
            .field("id", &format_args!("{:016x}", self.id))
            .finish()
    }
}

impl PartialEq for SketchPlan {
    fn eq(&self, other: &Self) -> bool {
        self.input_dim == other.input_dim
            && self.sketch_dim == other.sketch_dim
            && self.seed == other.seed
            && self.h1 == other.h1
            && self.h2 == other.h2
            && self.s1 == other.s1
            && self.s2 == other.s2
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based draw keyed by (seed, table, index).
fn draw(seed: u64, table: u64, index: u64) -> u64 {
    let key = splitmix64(seed ^ splitmix64(table.wrapping_add(0xA076_1D64_78BD_642F)));
    splitmix64(key ^ index.wrapping_mul(0xE703_7ED1_A0B4_28DB))
}

fn bucket(word: u64, d: usize) -> usize {
    ((word as u128 * d as u128) >> 64) as usize
}

fn sign(word: u64) -> f64 {
    if word >> 63 == 0 {
        1.0
    } else {
        -1.0
    }
}

// FNV-1a over the plan contents.
fn fingerprint(input_dim: usize, sketch_dim: usize, seed: u64, h1: &[usize], h2: &[usize], s1: &[f64], s2: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |v: u64| {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    };
    eat(input_dim as u64);
    eat(sketch_dim as u64);
    eat(seed);
    for t in [h1, h2] {
        t.iter().for_each(|&v| eat(v as u64));
    }
    for t in [s1, s2] {
        t.iter().for_each(|&v| eat((v > 0.0) as u64));
    }
    h
}

pub fn make_plan(input_dim: usize, sketch_dim: usize, seed: u64) -> Result<SketchPlan, SketchError> {
    if input_dim == 0 || sketch_dim == 0 {
        return Err(SketchError::ZeroDim { input_dim, sketch_dim });
    }
    let table = |t: u64| -> Vec<u64> { (0..input_dim as u64).map(|i| draw(seed, t, i)).collect() };
    let h1: Vec<usize> = table(0).into_iter().map(|w| bucket(w, sketch_dim)).collect();
    let h2: Vec<usize> = table(1).into_iter().map(|w| bucket(w, sketch_dim)).collect();
    let s1: Vec<f64> = table(2).into_iter().map(sign).collect();
    let s2: Vec<f64> = table(3).into_iter().map(sign).collect();
    let id = fingerprint(input_dim, sketch_dim, seed, &h1, &h2, &s1, &s2);
    let mut planner = FftPlanner::new();
    let forward = planner.plan_fft_forward(sketch_dim);
    let inverse = planner.plan_fft_inverse(sketch_dim);
    Ok(SketchPlan {
        input_dim,
        sketch_dim,
        seed,
        h1,
        h2,
        s1,
        s2,
        id,
        forward,
        inverse,
    })
}

impl SketchPlan {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn sketch_dim(&self) -> usize {
        self.sketch_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn plan_id(&self) -> u64 {
        self.id
    }

    pub fn hashes(&self) -> (&[usize], &[usize]) {
        (&self.h1, &self.h2)
    }

    pub fn signs(&self) -> (&[f64], &[f64]) {
        (&self.s1, &self.s2)
    }

    /// First count sketch, `CS1(v)`.
    pub fn count_sketch_1(&self, v: &[f64]) -> Vec<f64> {
        count_sketch(v, &self.h1, &self.s1, self.sketch_dim)
    }

    /// Second count sketch, `CS2(v)`.
    pub fn count_sketch_2(&self, v: &[f64]) -> Vec<f64> {
        count_sketch(v, &self.h2, &self.s2, self.sketch_dim)
    }

    /// Unnormalized forward DFT in place.
    pub fn dft(&self, buf: &mut [Complex64]) {
        self.forward.process(buf);
    }

    /// Unnormalized inverse DFT in place.
    pub fn idft(&self, buf: &mut [Complex64]) {
        self.inverse.process(buf);
    }

    fn spectrum(&self, p: &[f64], y: &[f64], scratch: &mut [Complex64], out: &mut [Complex64]) {
        let a = self.count_sketch_1(p);
        let b = self.count_sketch_2(y);
        // Both sketches are real, so one complex transform of a + ib yields both spectra.
        for (s, (&x, &w)) in scratch.iter_mut().zip(a.iter().zip(&b)) {
            *s = Complex64::new(x, w);
        }
        self.forward.process(scratch);
        let d = self.sketch_dim;
        for k in 0..d {
            let z = scratch[k];
            let zc = scratch[(d - k) % d].conj();
            let fa = (z + zc) * 0.5;
            let fb = (z - zc) * Complex64::new(0.0, -0.5);
            out[k] += fa * fb;
        }
    }
}

pub fn count_sketch(v: &[f64], hashes: &[usize], signs: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for ((&x, &h), &s) in v.iter().zip(hashes).zip(signs) {
        out[h] += s * x;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactDescriptor {
    pub values: Vec<f64>,
    pub plan_id: u64,
    /// Number of locations that were pooled.
    pub n: usize,
}

impl CompactDescriptor {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Sketch of the pooled descriptor: the mean over locations of the per-location
/// tensor sketch of `p(y) y^T`. Post-normalization is not applied.
pub fn sketch_pool<V: AsRef<[f64]> + Sync>(locations: &[V], cfg: &PoolConfig, plan: &SketchPlan) -> Result<CompactDescriptor, SketchError> {
    cfg.validate()?;
    if locations.is_empty() {
        return Err(PoolError::Empty.into());
    }
    for (index, y) in locations.iter().enumerate() {
        let y = y.as_ref();
        if y.len() != plan.input_dim {
            return Err(SketchError::DimMismatch {
                index,
                expected: plan.input_dim,
                found: y.len(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(PoolError::NonFinite { index }.into());
        }
    }
    let d = plan.sketch_dim;
    let partials: Vec<Vec<Complex64>> = locations
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = vec![Complex64::new(0.0, 0.0); d];
            let mut scratch = vec![Complex64::new(0.0, 0.0); d];
            for y in chunk {
                let y = y.as_ref();
                let p = cfg.signed_power(y);
                plan.spectrum(&p, y, &mut scratch, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![Complex64::new(0.0, 0.0); d];
    for part in &partials {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    plan.inverse.process(&mut total);
    let scale = 1.0 / (d as f64 * locations.len() as f64);
    let values: Vec<f64> = total.iter().map(|c| c.re * scale).collect();
    let peak = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let residue = total.iter().fold(0.0f64, |m, c| m.max((c.im * scale).abs()));
    if residue > IMAG_TOLERANCE * peak.max(1.0) {
        return Err(SketchError::ImaginaryResidue { residue });
    }
    Ok(CompactDescriptor {
        values,
        plan_id: plan.id,
        n: locations.len(),
    })
}

pub fn compact_inner(a: &CompactDescriptor, b: &CompactDescriptor) -> Result<f64, SketchError> {
    if a.plan_id != b.plan_id {
        return Err(SketchError::PlanMismatch {
            left: a.plan_id,
            right: b.plan_id,
        });
    }
    if a.values.len() != b.values.len() {
        return Err(SketchError::LengthMismatch {
            left: a.values.len(),
            right: b.values.len(),
        });
    }
    Ok(a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum())
}
