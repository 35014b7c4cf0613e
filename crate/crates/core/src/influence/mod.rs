//! Decision explanations from the dual classifier.
//!
//! With raw pooled descriptors the class score splits exactly into triplets
//! `gamma_kij = beta_k <y_i, y~_j> <p(y_i), p(y~_j)> / (n_k n_test)` over
//! training image `k`, training location `i` and test location `j`.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alphapool::PoolConfig;
use crate::dualclf::DualClassifier;
use crate::featio::{FeatureMap, LocationRef, PartMask};
use crate::kernelview::{check_guard, dot, kernel_pairwise_with, KernelError};

pub const NMS_RADIUS: f64 = 0.15;
pub const DEFAULT_TOP_IMAGES: usize = 5;
pub const DEFAULT_PART_TOP_N: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum InfluenceError {
    #[error("class {class} out of range (classifier has {classes})")]
    BadClass { class: usize, classes: usize },
    #[error("classifier was trained on {expected} images, training set has {found}")]
    TrainCount { expected: usize, found: usize },
    #[error("training image {index} has dimension {found}, test image has {expected}")]
    DimMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("influence needs {ops} multiply-adds (limit {limit}); pass force to run anyway")]
    GuardExceeded { ops: u64, limit: u64 },
    #[error("{side} image {index} has no part mask")]
    MissingMask { side: &'static str, index: usize },
    #[error("{side} mask {index} does not line up with its feature map")]
    MaskShape { side: &'static str, index: usize },
    #[error("{what} count {found} does not match {expected} images")]
    Count {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("no test image produced any part mass")]
    NoMass,
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfluenceTriplet {
    /// Training image index.
    pub train: usize,
    /// Flattened location index in the training image.
    pub i: usize,
    /// Flattened location index in the test image.
    pub j: usize,
    pub train_loc: Loc,
    pub test_loc: Loc,
    pub gamma: f64,
}

/// A grid location with its cell-center position normalized by the grid size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Loc {
    pub scale: usize,
    pub row: usize,
    pub col: usize,
    pub y: f64,
    pub x: f64,
}

fn locs_of(fm: &FeatureMap) -> Vec<Loc> {
    fm.location_refs()
        .into_iter()
        .map(|r: LocationRef| {
            let (y, x) = r.normalized(fm.shape_of(r.scale));
            Loc {
                scale: r.scale,
                row: r.row,
                col: r.col,
                y,
                x,
            }
        })
        .collect()
}

fn check_query(clf: &DualClassifier, class: usize, train: &[FeatureMap], test: &FeatureMap) -> Result<(), InfluenceError> {
    if class >= clf.class_count() {
        return Err(InfluenceError::BadClass {
            class,
            classes: clf.class_count(),
        });
    }
    if clf.train_count() != train.len() {
        return Err(InfluenceError::TrainCount {
            expected: clf.train_count(),
            found: train.len(),
        });
    }
    for (index, m) in train.iter().enumerate() {
        if m.dim() != test.dim() {
            return Err(InfluenceError::DimMismatch {
                index,
                expected: test.dim(),
                found: m.dim(),
            });
        }
    }
    Ok(())
}

fn guard(train: &[FeatureMap], test: &FeatureMap, force: bool) -> Result<(), InfluenceError> {
    let n_test = test.location_count();
    let total: usize = train.iter().map(|m| m.location_count()).sum();
    check_guard(total, n_test, test.dim(), force).map_err(|e| match e {
        KernelError::GuardExceeded { ops, limit } => InfluenceError::GuardExceeded { ops, limit },
        other => other.into(),
    })
}

/// Every triplet for one (test image, class) query, ordered by training image,
/// then training location, then test location.
pub fn influence_triplets(
    clf: &DualClassifier,
    class: usize,
    train: &[FeatureMap],
    test: &FeatureMap,
    cfg: &PoolConfig,
    force: bool,
) -> Result<Vec<InfluenceTriplet>, InfluenceError> {
    check_query(clf, class, train, test)?;
    guard(train, test, force)?;
    let test_vecs = test.vectors();
    let test_locs = locs_of(test);
    let betas = &clf.betas[class];
    let blocks: Vec<Result<Vec<InfluenceTriplet>, InfluenceError>> = train
        .par_iter()
        .enumerate()
        .map(|(k, m)| {
            let br = kernel_pairwise_with(&m.vectors(), &test_vecs, cfg, true)?;
            let train_locs = locs_of(m);
            let beta = betas[k];
            let mut out = Vec::with_capacity(br.contributions.len());
            for (i, tl) in train_locs.iter().enumerate() {
                for (j, sl) in test_locs.iter().enumerate() {
                    out.push(InfluenceTriplet {
                        train: k,
                        i,
                        j,
                        train_loc: *tl,
                        test_loc: *sl,
                        gamma: beta * br.get(i, j),
                    });
                }
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::new();
    for b in blocks {
        all.extend(b?);
    }
    Ok(all)
}

/// Sum of gamma per training image.
pub fn image_aggregates(triplets: &[InfluenceTriplet], train_count: usize) -> Vec<f64> {
    let mut agg = vec![0.0; train_count];
    for t in triplets {
        agg[t.train] += t.gamma;
    }
    agg
}

/// Total gamma over triplets from training images with positive beta.
pub fn positive_total(triplets: &[InfluenceTriplet], betas: &[f64]) -> f64 {
    triplets.iter().filter(|t| betas[t.train] > 0.0).map(|t| t.gamma).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletGroup {
    /// The highest-gamma triplet of the group.
    pub anchor: InfluenceTriplet,
    /// Anchor gamma plus every absorbed gamma.
    pub gamma: f64,
    pub members: usize,
}

fn distance(a: &Loc, b: &Loc) -> f64 {
    ((a.y - b.y).powi(2) + (a.x - b.x).powi(2)).sqrt()
}

/// Dense 4-d bucket grid over (train y, train x, test y, test x) with cells one
/// radius wide, so only neighbouring cells can hold a match.
struct Buckets {
    side: usize,
    radius: f64,
    cells: Vec<Vec<usize>>,
}

impl Buckets {
    fn new(radius: f64) -> Self {
        let side = ((1.0 / radius).ceil() as usize).clamp(1, 64);
        Buckets {
            side,
            radius,
            cells: vec![Vec::new(); side.pow(4)],
        }
    }

    fn coord(&self, v: f64) -> usize {
        ((v / self.radius).floor().max(0.0) as usize).min(self.side - 1)
    }

    fn key(&self, t: &InfluenceTriplet) -> [usize; 4] {
        [self.coord(t.train_loc.y), self.coord(t.train_loc.x), self.coord(t.test_loc.y), self.coord(t.test_loc.x)]
    }

    fn index(&self, k: [usize; 4]) -> usize {
        ((k[0] * self.side + k[1]) * self.side + k[2]) * self.side + k[3]
    }
}

fn neighbours(c: usize, side: usize) -> std::ops::RangeInclusive<usize> {
    c.saturating_sub(1)..=(c + 1).min(side - 1)
}

/// Greedy grouping of one training image's triplets, visited in `order`.
fn group_image(triplets: &[InfluenceTriplet], order: &[usize], radius: f64) -> Vec<(usize, TripletGroup)> {
    let mut groups: Vec<(usize, TripletGroup)> = Vec::new();
    let mut buckets = Buckets::new(radius);
    let side = buckets.side;
    for &idx in order {
        let t = &triplets[idx];
        let key = buckets.key(t);
        let mut best: Option<usize> = None;
        for a in neighbours(key[0], side) {
            for b in neighbours(key[1], side) {
                for c in neighbours(key[2], side) {
                    for d in neighbours(key[3], side) {
                        for &g in &buckets.cells[buckets.index([a, b, c, d])] {
                            if best.is_some_and(|b| b <= g) {
                                continue;
                            }
                            let anchor = &groups[g].1.anchor;
                            if distance(&anchor.train_loc, &t.train_loc) < radius && distance(&anchor.test_loc, &t.test_loc) < radius {
                                best = Some(g);
                            }
                        }
                    }
                }
            }
        }
        match best {
            Some(g) => {
                groups[g].1.gamma += t.gamma;
                groups[g].1.members += 1;
            }
            None => {
                let cell = buckets.index(key);
                buckets.cells[cell].push(groups.len());
                groups.push((
                    idx,
                    TripletGroup {
                        anchor: *t,
                        gamma: t.gamma,
                        members: 1,
                    },
                ));
            }
        }
    }
    groups
}

/// Visiting order: descending gamma, ties by (train, i, j).
fn greedy_order(triplets: &[InfluenceTriplet]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    order.sort_by(|&a, &b| {
        let (ta, tb) = (&triplets[a], &triplets[b]);
        tb.gamma
            .total_cmp(&ta.gamma)
            .then(ta.train.cmp(&tb.train))
            .then(ta.i.cmp(&tb.i))
            .then(ta.j.cmp(&tb.j))
    });
    order
}

/// Greedy non-maximum suppression. Triplets are visited by descending gamma;
/// one is absorbed into the earliest-selected group of the same training image
/// whose anchor lies closer than `radius` on both the training and the test
/// side (Euclidean, in normalized cell-center coordinates). Groups come back in
/// selection order.
pub fn nms_group(triplets: &[InfluenceTriplet], radius: f64) -> Vec<TripletGroup> {
    let order = greedy_order(triplets);
    let images = triplets.iter().map(|t| t.train + 1).max().unwrap_or(0);
    let mut per_image: Vec<Vec<usize>> = vec![Vec::new(); images];
    for &idx in &order {
        per_image[triplets[idx].train].push(idx);
    }
    let grouped: Vec<Vec<(usize, TripletGroup)>> = per_image.par_iter().map(|ord| group_image(triplets, ord, radius)).collect();
    let mut rank = vec![0usize; triplets.len()];
    for (r, &idx) in order.iter().enumerate() {
        rank[idx] = r;
    }
    let mut all: Vec<(usize, TripletGroup)> = grouped.into_iter().flatten().collect();
    all.sort_by_key(|(idx, _)| rank[*idx]);
    all.into_iter().map(|(_, g)| g).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeInfluence {
    pub percentages: Vec<f64>,
    /// The positive total was not positive, so no percentages exist.
    pub degenerate: bool,
}

/// Each group's gamma as a percentage of `positive_total`.
pub fn relative_influence(groups: &[TripletGroup], positive_total: f64) -> RelativeInfluence {
    if !(positive_total > 0.0) {
        return RelativeInfluence {
            percentages: vec![0.0; groups.len()],
            degenerate: true,
        };
    }
    RelativeInfluence {
        percentages: groups.iter().map(|g| 100.0 * g.gamma / positive_total).collect(),
        degenerate: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub train_index: usize,
    pub train_id: String,
    pub train_loc: Loc,
    pub test_loc: Loc,
    pub gamma: f64,
    pub percent: f64,
    pub members: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedImage {
    pub rank: usize,
    pub train_index: usize,
    pub train_id: String,
    pub beta: f64,
    pub aggregate: f64,
    /// Aggregate as a percentage of the positive total, for positively weighted images.
    pub share: Option<f64>,
    pub best_region: Option<RegionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub test_id: String,
    pub class: usize,
    pub class_name: String,
    /// Triplets are computed on raw pooled kernels; post-normalization is not applied.
    pub raw_kernels: bool,
    /// Sum of every triplet, equal to the class score on raw kernels.
    pub score: f64,
    pub positive_total: f64,
    pub degenerate: bool,
    /// The highest-gamma group over all training images.
    pub top_region: Option<RegionSummary>,
    pub images: Vec<RankedImage>,
    pub note: Option<String>,
}

/// Rank training images by aggregate gamma and report each one's strongest group.
#[allow(clippy::too_many_arguments)]
pub fn top_training_regions(
    clf: &DualClassifier,
    class: usize,
    train: &[FeatureMap],
    test: &FeatureMap,
    cfg: &PoolConfig,
    images: usize,
    radius: f64,
    force: bool,
) -> Result<InfluenceReport, InfluenceError> {
    let triplets = influence_triplets(clf, class, train, test, cfg, force)?;
    let betas = &clf.betas[class];
    let agg = image_aggregates(&triplets, train.len());
    let pos = positive_total(&triplets, betas);
    let groups = nms_group(&triplets, radius);
    let rel = relative_influence(&groups, pos);

    let mut ranking: Vec<usize> = (0..train.len()).collect();
    ranking.sort_by(|&a, &b| agg[b].total_cmp(&agg[a]).then(a.cmp(&b)));
    let note = (images > train.len()).then(|| format!("requested {images} images but the training set has {}", train.len()));

    let mut best: Vec<Option<usize>> = vec![None; train.len()];
    for (g, grp) in groups.iter().enumerate() {
        let slot = &mut best[grp.anchor.train];
        if slot.is_none_or(|b| grp.gamma > groups[b].gamma) {
            *slot = Some(g);
        }
    }
    let train_id = |k: usize| clf.train_ids.get(k).cloned().unwrap_or_else(|| train[k].image_id().to_string());
    let summary = |g: usize| RegionSummary {
        train_index: groups[g].anchor.train,
        train_id: train_id(groups[g].anchor.train),
        train_loc: groups[g].anchor.train_loc,
        test_loc: groups[g].anchor.test_loc,
        gamma: groups[g].gamma,
        percent: rel.percentages[g],
        members: groups[g].members,
    };
    let ranked = ranking
        .iter()
        .take(images)
        .enumerate()
        .map(|(rank, &k)| RankedImage {
            rank: rank + 1,
            train_index: k,
            train_id: train_id(k),
            beta: betas[k],
            aggregate: agg[k],
            share: (betas[k] > 0.0 && !rel.degenerate).then(|| 100.0 * agg[k] / pos),
            best_region: best[k].map(summary),
        })
        .collect();
    Ok(InfluenceReport {
        test_id: test.image_id().to_string(),
        class,
        class_name: clf.class_names.get(class).cloned().unwrap_or_default(),
        raw_kernels: true,
        score: agg.iter().sum(),
        positive_total: pos,
        degenerate: rel.degenerate,
        top_region: (0..groups.len()).reduce(|a, b| if groups[b].gamma > groups[a].gamma { b } else { a }).map(summary),
        images: ranked,
        note,
    })
}

/// `P × P` normalized mass, rows indexed by test part and columns by training part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartContributionMatrix {
    pub part_ids: Vec<u32>,
    pub part_names: Vec<String>,
    pub values: Vec<f64>,
    pub squared: bool,
    pub top_n: usize,
    pub test_images_used: usize,
}

impl PartContributionMatrix {
    pub fn size(&self) -> usize {
        self.part_ids.len()
    }

    /// Entry for (test part id, training part id), 0 when either id is absent.
    pub fn get(&self, test_part: u32, train_part: u32) -> f64 {
        let p = self.size();
        match (self.part_ids.iter().position(|&x| x == test_part), self.part_ids.iter().position(|&x| x == train_part)) {
            (Some(r), Some(c)) => self.values[r * p + c],
            _ => 0.0,
        }
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

pub fn part_name(id: u32) -> String {
    if id == 0 {
        "background".to_string()
    } else {
        format!("part{id}")
    }
}

/// Inputs for [`part_contributions`]: feature maps with aligned masks.
pub struct PartSet<'a> {
    pub maps: &'a [FeatureMap],
    pub masks: &'a [Option<PartMask>],
}

fn aligned<'a>(set: &PartSet<'a>, side: &'static str) -> Result<Vec<Vec<u32>>, InfluenceError> {
    if set.masks.len() != set.maps.len() {
        return Err(InfluenceError::Count {
            what: "mask",
            expected: set.maps.len(),
            found: set.masks.len(),
        });
    }
    set.maps
        .iter()
        .zip(set.masks)
        .enumerate()
        .map(|(index, (m, mask))| {
            let mask = mask.as_ref().ok_or(InfluenceError::MissingMask { side, index })?;
            mask.check_aligned(m, "").map_err(|_| InfluenceError::MaskShape { side, index })?;
            Ok(mask.flat_ids())
        })
        .collect()
}

/// For each test image take its `top_n` training images by aggregate gamma for
/// the test image's true class, accumulate the pairwise kernel summands (squared
/// when `squared`) into (test part, training part) cells, normalize per test
/// image to sum 1 and average over test images.
#[allow(clippy::too_many_arguments)]
pub fn part_contributions(
    test: PartSet<'_>,
    test_labels: &[usize],
    train: PartSet<'_>,
    clf: &DualClassifier,
    cfg: &PoolConfig,
    top_n: usize,
    squared: bool,
    force: bool,
) -> Result<PartContributionMatrix, InfluenceError> {
    let test_ids = aligned(&test, "test")?;
    let train_ids = aligned(&train, "training")?;
    if test_labels.len() != test.maps.len() {
        return Err(InfluenceError::Count {
            what: "label",
            expected: test.maps.len(),
            found: test_labels.len(),
        });
    }
    let mut part_ids: Vec<u32> = test_ids.iter().chain(&train_ids).flatten().copied().collect();
    part_ids.sort_unstable();
    part_ids.dedup();
    let index: HashMap<u32, usize> = part_ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
    let p = part_ids.len();

    let per_test: Vec<Result<Option<Vec<f64>>, InfluenceError>> = test
        .maps
        .par_iter()
        .enumerate()
        .map(|(t, fm)| {
            check_query(clf, test_labels[t], train.maps, fm)?;
            guard(train.maps, fm, force)?;
            // aggregate gamma of image k is beta_k times the raw kernel
            let row = raw_kernel_row(train.maps, fm, cfg)?;
            let agg: Vec<f64> = row.iter().zip(&clf.betas[test_labels[t]]).map(|(k, b)| k * b).collect();
            let mut ranking: Vec<usize> = (0..train.maps.len()).collect();
            ranking.sort_by(|&a, &b| agg[b].total_cmp(&agg[a]).then(a.cmp(&b)));
            let test_vecs = fm.vectors();
            let mut cells = vec![0.0; p * p];
            for &k in ranking.iter().take(top_n) {
                let br = kernel_pairwise_with(&train.maps[k].vectors(), &test_vecs, cfg, true)?;
                for (i, &train_part) in train_ids[k].iter().enumerate() {
                    let col = index[&train_part];
                    for (j, &test_part) in test_ids[t].iter().enumerate() {
                        let s = br.get(i, j);
                        cells[index[&test_part] * p + col] += if squared { s * s } else { s };
                    }
                }
            }
            let total: f64 = cells.iter().sum();
            if !(total > 0.0) {
                return Ok(None);
            }
            cells.iter_mut().for_each(|c| *c /= total);
            Ok(Some(cells))
        })
        .collect();

    let mut values = vec![0.0; p * p];
    let mut used = 0;
    for r in per_test {
        if let Some(cells) = r? {
            values.iter_mut().zip(&cells).for_each(|(v, c)| *v += c);
            used += 1;
        }
    }
    if used == 0 {
        return Err(InfluenceError::NoMass);
    }
    values.iter_mut().for_each(|v| *v /= used as f64);
    Ok(PartContributionMatrix {
        part_names: part_ids.iter().map(|&id| part_name(id)).collect(),
        part_ids,
        values,
        squared,
        top_n,
        test_images_used: used,
    })
}

/// Raw kernel row of `test` against every training map (no post-normalization).
pub fn raw_kernel_row(train: &[FeatureMap], test: &FeatureMap, cfg: &PoolConfig) -> Result<Vec<f64>, KernelError> {
    let raw = PoolConfig {
        signed_sqrt: false,
        l2_normalize: false,
        ..*cfg
    };
    let zt = crate::alphapool::pool(&test.vectors(), &raw)?;
    train
        .par_iter()
        .map(|m| Ok(dot(crate::alphapool::pool(&m.vectors(), &raw)?.vectorized(), zt.vectorized())))
        .collect()
}
