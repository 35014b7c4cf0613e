//! Invariant suites run by `alpha-pool verify`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use super::{write_file, CliError, CommonArgs, Reporter, VerifyArgs};
use crate::alphapool::{pool, pool_backward, PoolConfig};
use crate::dualclf::{default_lambda, train_dual};
use crate::featio::FeatureMap;
use crate::influence::{influence_triplets, nms_group, positive_total, relative_influence, NMS_RADIUS};
use crate::kernelview::{dot, gram_matrix, inner_via_distance, kernel_pairwise_with, GramBackend};
use crate::sketch::{compact_inner, make_plan, sketch_pool};

pub const SUITES: [&str; 7] = [
    "fixture_io",
    "trace_identity",
    "reductions",
    "gradients",
    "sketch_statistics",
    "polarization",
    "influence_accounting",
];

/// Coordinates closer than this to zero are left out of the gradient check:
/// the signed power jumps at 0 and, with epsilon 0, its slope is unbounded near it.
pub const KINK_RADIUS: f64 = 1e-2;
const FD_STEP: f64 = 1e-5;
const SKETCH_PLANS: usize = 200;
const SKETCH_DIM: usize = 512;

const BUNDLED: [(&str, &[u8]); 6] = [
    ("dense.fmap", include_bytes!("../../fixtures/dense.fmap")),
    ("sparse.fmap", include_bytes!("../../fixtures/sparse.fmap")),
    ("multiscale.fmap", include_bytes!("../../fixtures/multiscale.fmap")),
    ("signed.fmap", include_bytes!("../../fixtures/signed.fmap")),
    ("zeros.fmap", include_bytes!("../../fixtures/zeros.fmap")),
    ("narrow.fmap", include_bytes!("../../fixtures/narrow.fmap")),
];

#[derive(Debug, Clone, Serialize)]
pub struct SuiteOutcome {
    pub suite: &'static str,
    pub passed: bool,
    pub checks: usize,
    pub max_error: f64,
    pub tolerance: f64,
    /// Entries skipped as documented (gradient kinks).
    pub excluded: usize,
    pub detail: String,
}

impl SuiteOutcome {
    fn new(suite: &'static str, tolerance: f64) -> Self {
        SuiteOutcome {
            suite,
            passed: true,
            checks: 0,
            max_error: 0.0,
            tolerance,
            excluded: 0,
            detail: String::new(),
        }
    }

    fn check(&mut self, err: f64) {
        self.checks += 1;
        if !(err <= self.tolerance) {
            self.passed = false;
        }
        if err.is_nan() || err > self.max_error {
            self.max_error = err;
        }
    }

    fn fail(mut self, why: impl Into<String>) -> Self {
        self.passed = false;
        self.detail = why.into();
        self
    }
}

struct Fixture {
    name: String,
    bytes: Vec<u8>,
}

fn load_fixtures(dir: Option<&Path>) -> Result<Vec<Fixture>, CliError> {
    let Some(dir) = dir else {
        return Ok(BUNDLED
            .iter()
            .map(|(n, b)| Fixture {
                name: n.to_string(),
                bytes: b.to_vec(),
            })
            .collect());
    };
    let rd = fs::read_dir(dir).map_err(|e| CliError::File(format!("cannot read fixtures {}: {e}", dir.display())))?;
    let mut paths: Vec<_> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "fmap"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let bytes = fs::read(&p).map_err(|e| CliError::File(format!("cannot read {}: {e}", p.display())))?;
            Ok(Fixture {
                name: p.file_name().unwrap_or_default().to_string_lossy().into_owned(),
                bytes,
            })
        })
        .collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn fixture_io(fx: &[Fixture]) -> SuiteOutcome {
    let mut o = SuiteOutcome::new("fixture_io", 0.0);
    if fx.is_empty() {
        return o.fail("no fixtures found");
    }
    let mut bad = Vec::new();
    for f in fx {
        match FeatureMap::from_bytes(&f.bytes) {
            Ok(m) => {
                let same = m.to_bytes() == f.bytes;
                let count = m.scales().iter().map(|g| g.height() * g.width()).sum::<usize>() == m.flatten_locations().len();
                o.check(if same && count { 0.0 } else { 1.0 });
                if !(same && count) {
                    bad.push(format!("{} does not round-trip", f.name));
                }
            }
            Err(e) => {
                o.check(1.0);
                bad.push(format!("{}: {e}", f.name));
            }
        }
    }
    o.detail = if bad.is_empty() { format!("{} fixtures parse and round-trip", fx.len()) } else { bad.join("; ") };
    o
}

/// Alpha values exercised by the numeric suites.
fn alphas(alpha: f64) -> Vec<f64> {
    let mut v = vec![1.0, 1.5, 2.0, 3.0];
    if !v.contains(&alpha) {
        v.push(alpha);
    }
    v
}

fn same_dim_pairs(maps: &[FeatureMap]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for a in 0..maps.len() {
        for b in a..maps.len() {
            if maps[a].dim() == maps[b].dim() {
                out.push((a, b));
            }
        }
    }
    out
}

fn trace_identity(maps: &[FeatureMap], alpha: f64, eps: f64) -> Result<SuiteOutcome, CliError> {
    let mut o = SuiteOutcome::new("trace_identity", 1e-9);
    for a in alphas(alpha) {
        let cfg = PoolConfig::raw(a, eps);
        for &(i, j) in &same_dim_pairs(maps) {
            let (yi, yj) = (maps[i].vectors(), maps[j].vectors());
            let primal = dot(pool(&yi, &cfg)?.vectorized(), pool(&yj, &cfg)?.vectorized());
            let pair = kernel_pairwise_with(&yi, &yj, &cfg, true)?.total;
            o.check(rel(primal, pair));
        }
    }
    o.detail = format!("pooled inner product vs pairwise sum over {} checks", o.checks);
    Ok(o)
}

fn reductions(maps: &[FeatureMap]) -> Result<SuiteOutcome, CliError> {
    let mut o = SuiteOutcome::new("reductions", 1e-12);
    for m in maps {
        let ys = m.vectors();
        let d = m.dim();
        let n = ys.len() as f64;
        for (alpha, left) in [(2.0, (|v: f64| v) as fn(f64) -> f64), (1.0, |v: f64| if v == 0.0 { 0.0 } else { v.signum() })] {
            let got = pool(&ys, &PoolConfig::raw(alpha, 0.0))?;
            let mut want = vec![0.0; d * d];
            for y in &ys {
                for r in 0..d {
                    for c in 0..d {
                        want[r * d + c] += left(y[r]) * y[c] / n;
                    }
                }
            }
            for (g, w) in got.vectorized().iter().zip(&want) {
                o.check(rel(*g, *w));
            }
        }
    }
    o.detail = "alpha 1 gives sign-weighted average pooling, alpha 2 gives bilinear pooling (epsilon 0)".into();
    Ok(o)
}

/// Copies of each fixture with its first location and one coordinate of every
/// other location set to exactly zero.
fn with_zeros(maps: &[FeatureMap]) -> Vec<Vec<Vec<f64>>> {
    maps.iter()
        .map(|m| {
            let mut ys: Vec<Vec<f64>> = m.vectors().into_iter().map(|v| v.to_vec()).collect();
            let d = m.dim();
            for (k, y) in ys.iter_mut().enumerate() {
                if k == 0 {
                    y.iter_mut().for_each(|v| *v = 0.0);
                } else {
                    y[k % d] = 0.0;
                }
            }
            ys
        })
        .collect()
}

fn gradients(maps: &[FeatureMap], alpha: f64, eps: f64, seed: u64) -> Result<SuiteOutcome, CliError> {
    let mut o = SuiteOutcome::new("gradients", 1e-4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let mut instances: Vec<Vec<Vec<f64>>> = maps.iter().map(|m| m.vectors().into_iter().map(|v| v.to_vec()).collect()).collect();
    instances.extend(with_zeros(maps));
    let mut avals: Vec<f64> = alphas(alpha).into_iter().filter(|&a| a >= 1.0 + 10.0 * FD_STEP).collect();
    avals.dedup();
    let h = FD_STEP;
    for ys in &instances {
        let d = ys[0].len();
        for &a in &avals {
            let cfg = PoolConfig::raw(a, eps);
            let g: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let loss = |ys: &[Vec<f64>], cfg: &PoolConfig| -> Result<f64, CliError> { Ok(dot(pool(ys, cfg)?.vectorized(), &g)) };
            let an = pool_backward(ys, &cfg, &g)?;
            let mut work = ys.clone();
            for k in 0..ys.len() {
                for c in 0..d {
                    if ys[k][c].abs() < KINK_RADIUS {
                        o.excluded += 1;
                        continue;
                    }
                    work[k][c] = ys[k][c] + h;
                    let up = loss(&work, &cfg)?;
                    work[k][c] = ys[k][c] - h;
                    let down = loss(&work, &cfg)?;
                    work[k][c] = ys[k][c];
                    let num = (up - down) / (2.0 * h);
                    let a = an.d_inputs[k][c];
                    o.check((a - num).abs() / a.abs().max(0.1));
                }
            }
            let up = loss(ys, &cfg.with_alpha(a + h))?;
            let down = loss(ys, &cfg.with_alpha(a - h))?;
            let num = (up - down) / (2.0 * h);
            o.check((an.d_alpha - num).abs() / an.d_alpha.abs().max(0.1));
        }
    }
    o.detail = format!(
        "central differences, step {h}; {} coordinates within {KINK_RADIUS} of zero excluded as kinks (epsilon {eps})",
        o.excluded
    );
    Ok(o)
}

fn sketch_statistics(maps: &[FeatureMap], alpha: f64, eps: f64, seed: u64) -> Result<SuiteOutcome, CliError> {
    let mut o = SuiteOutcome::new("sketch_statistics", 4.0);
    let cfg = PoolConfig::raw(alpha, eps);
    let pairs = same_dim_pairs(maps);
    for &(i, j) in pairs.iter().filter(|(i, j)| i != j).take(3) {
        let (yi, yj) = (maps[i].vectors(), maps[j].vectors());
        let exact = dot(pool(&yi, &cfg)?.vectorized(), pool(&yj, &cfg)?.vectorized());
        let mut est = Vec::with_capacity(SKETCH_PLANS);
        for s in 0..SKETCH_PLANS as u64 {
            let plan = make_plan(maps[i].dim(), SKETCH_DIM, seed.wrapping_mul(1_000_003).wrapping_add(s))?;
            let a = sketch_pool(&yi, &cfg, &plan)?;
            let b = sketch_pool(&yj, &cfg, &plan)?;
            if s == 0 && sketch_pool(&yi, &cfg, &plan)? != a {
                return Ok(o.fail("sketch is not deterministic for a fixed plan"));
            }
            est.push(compact_inner(&a, &b)?);
        }
        let m = est.len() as f64;
        let mean = est.iter().sum::<f64>() / m;
        let var = est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (m - 1.0);
        let se = (var / m).sqrt();
        // deviation in standard errors; exact agreement counts as 0
        let z = if se > 0.0 { (mean - exact).abs() / se } else if rel(mean, exact) < 1e-9 { 0.0 } else { f64::INFINITY };
        o.check(z);
    }
    if o.checks == 0 {
        return Ok(o.fail("needs two fixtures of equal dimension"));
    }
    o.detail = format!("mean of {SKETCH_PLANS} sketches (d={SKETCH_DIM}) within 4 standard errors of the exact kernel");
    Ok(o)
}

fn polarization(maps: &[FeatureMap]) -> Result<SuiteOutcome, CliError> {
    let mut o = SuiteOutcome::new("polarization", 1e-12);
    for &(i, j) in &same_dim_pairs(maps) {
        for y in maps[i].vectors() {
            for u in maps[j].vectors() {
                let got = inner_via_distance(y, u)?;
                let scale = (dot(y, y) + dot(u, u)).max(1.0);
                o.check((got - dot(y, u)).abs() / scale);
            }
        }
    }
    o.detail = "inner products recovered from norms and distances".into();
    Ok(o)
}

fn influence_accounting(maps: &[FeatureMap], alpha: f64, eps: f64) -> Result<SuiteOutcome, CliError> {
    let mut o = SuiteOutcome::new("influence_accounting", 1e-8);
    // the largest group of equal-dimension fixtures is the training set
    let mut best: Vec<FeatureMap> = Vec::new();
    for m in maps {
        let group: Vec<FeatureMap> = maps.iter().filter(|x| x.dim() == m.dim()).cloned().collect();
        if group.len() > best.len() {
            best = group;
        }
    }
    if best.len() < 2 {
        return Ok(o.fail("needs two fixtures of equal dimension"));
    }
    let cfg = PoolConfig::raw(alpha, eps);
    let labels: Vec<usize> = (0..best.len()).map(|k| k % 2).collect();
    let k = gram_matrix(&best, &cfg, &GramBackend::Exact)?;
    let clf = train_dual(&k, &labels, 2, default_lambda(&k))?;
    for (t, test) in best.iter().enumerate() {
        for class in 0..2 {
            let trip = influence_triplets(&clf, class, &best, test, &cfg, true)?;
            let betas = &clf.betas[class];
            let score: f64 = betas.iter().enumerate().map(|(j, b)| b * k.get(j, t)).sum();
            let total: f64 = trip.iter().map(|x| x.gamma).sum();
            o.check(rel(total, score));
            let groups = nms_group(&trip, NMS_RADIUS);
            o.check(rel(groups.iter().map(|g| g.gamma).sum(), total));
            o.check(if groups.iter().map(|g| g.members).sum::<usize>() == trip.len() { 0.0 } else { 1.0 });
            let pos = positive_total(&trip, betas);
            let shares = relative_influence(&groups, pos);
            if !shares.degenerate {
                let sum: f64 = groups.iter().zip(&shares.percentages).filter(|(g, _)| betas[g.anchor.train] > 0.0).map(|(_, p)| p).sum();
                o.check(rel(sum, 100.0));
            }
        }
    }
    o.detail = format!("triplet sums vs scores, group conservation and 100% shares over {} training images", best.len());
    Ok(o)
}

/// Runs the named suites (all when `names` is empty) in canonical order.
pub fn run_suites(fixtures: Option<&Path>, names: &[String], alpha: f64, epsilon: f64, seed: u64) -> Result<Vec<SuiteOutcome>, CliError> {
    let fx = load_fixtures(fixtures)?;
    let maps: Vec<FeatureMap> = fx.iter().filter_map(|f| FeatureMap::from_bytes(&f.bytes).ok()).collect();
    let wanted = |s: &str| names.is_empty() || names.iter().any(|n| n == s);
    let mut out = Vec::new();
    for suite in SUITES {
        if !wanted(suite) {
            continue;
        }
        if suite != "fixture_io" && maps.is_empty() {
            out.push(SuiteOutcome::new(suite, 0.0).fail("no readable fixtures"));
            continue;
        }
        let r = match suite {
            "fixture_io" => Ok(fixture_io(&fx)),
            "trace_identity" => trace_identity(&maps, alpha, epsilon),
            "reductions" => reductions(&maps),
            "gradients" => gradients(&maps, alpha, epsilon, seed),
            "sketch_statistics" => sketch_statistics(&maps, alpha, epsilon, seed),
            "polarization" => polarization(&maps),
            "influence_accounting" => influence_accounting(&maps, alpha, epsilon),
            _ => unreachable!("suite list is fixed"),
        };
        out.push(r.unwrap_or_else(|e| SuiteOutcome::new(suite, 0.0).fail(e.to_string())));
    }
    Ok(out)
}

pub fn command(c: &CommonArgs, a: &VerifyArgs, rep: &Reporter) -> Result<(), CliError> {
    let results = run_suites(a.fixtures.as_deref(), &a.suites, c.alpha, c.epsilon, c.seed)?;
    for r in &results {
        rep.emit(
            "suite",
            format!(
                "{} {}  checks {}  max error {:.3e} (tolerance {:.0e})  {}",
                if r.passed { "PASS" } else { "FAIL" },
                r.suite,
                r.checks,
                r.max_error,
                r.tolerance,
                r.detail
            ),
            serde_json::to_value(r).expect("outcome serializes"),
        );
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.suite).collect();
    let summary = json!({"passed": failed.is_empty(), "failed": failed, "suites": results});
    write_file(&c.out.join("verify.json"), (serde_json::to_string_pretty(&summary).expect("json") + "\n").as_bytes())?;
    rep.emit(
        "summary",
        if failed.is_empty() { format!("all {} suites passed", results.len()) } else { format!("failed: {}", failed.join(", ")) },
        json!({"passed": failed.is_empty(), "failed": failed}),
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verify(failed.join(", ")))
    }
}
