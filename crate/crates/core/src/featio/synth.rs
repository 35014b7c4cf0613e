//! Synthetic feature-map datasets.
//!
//! Every image shares a nonnegative background profile and each class owns a
//! nonnegative prototype. In `generic` mode every location receives the
//! prototype scaled by `discriminative_fraction`. In `fine_grained` mode a
//! contiguous (row-major) block of `ceil(discriminative_fraction * H * W)`
//! locations at a random position receives the full prototype plus a
//! class-independent object profile, and that block is marked with part id 1
//! in the mask. Class-independent distractors land on a random subset of the
//! remaining locations. Gaussian noise is added everywhere and values are
//! clipped at 0.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::fmap::{write_fmap, FeatureMap, FmapError};
use super::manifest::{Dataset, DatasetManifest, ManifestEntry, ManifestError, PartMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMode {
    Generic,
    FineGrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub mode: SynthMode,
    pub classes: usize,
    pub images_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub discriminative_fraction: f64,
    pub noise_scale: f64,
    /// Magnitude of the class prototype shift.
    pub signal: f64,
    /// Magnitude of class-independent distractor activations.
    pub clutter: f64,
    /// Fraction of locations per image hit by a distractor.
    pub clutter_fraction: f64,
    /// Magnitude of the class-shared object component in the fine-grained block.
    pub object: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            mode: SynthMode::FineGrained,
            classes: 4,
            images_per_class: 20,
            height: 8,
            width: 8,
            dim: 8,
            discriminative_fraction: 0.1,
            noise_scale: 0.3,
            signal: 1.0,
            clutter: 1.5,
            clutter_fraction: 0.1,
            object: 2.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    Invalid(String),
    #[error(transparent)]
    Fmap(#[from] FmapError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Invalid(m.into()));
        if self.classes == 0 || self.images_per_class == 0 || self.height == 0 || self.width == 0 || self.dim == 0 {
            return bad("classes, images_per_class, H, W and D must be positive");
        }
        if !(self.discriminative_fraction > 0.0 && self.discriminative_fraction <= 1.0) {
            return bad("discriminative_fraction must lie in (0, 1]");
        }
        if self.mode == SynthMode::FineGrained && self.discriminative_fraction >= 0.25 {
            return bad("fine_grained mode requires discriminative_fraction < 0.25");
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be a nonnegative real");
        }
        if !self.signal.is_finite() || !(self.clutter >= 0.0 && self.clutter.is_finite()) || !(self.object >= 0.0 && self.object.is_finite()) {
            return bad("signal must be finite; clutter and object must be finite and nonnegative");
        }
        if !(0.0..=1.0).contains(&self.clutter_fraction) {
            return bad("clutter_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    /// Number of locations carrying the class signal in fine-grained mode.
    pub fn block_len(&self) -> usize {
        let n = self.height * self.width;
        let m = (self.discriminative_fraction * n as f64 - 1e-9).ceil() as usize;
        m.clamp(1, n)
    }
}

/// The generated dataset plus the manifest that names its files.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub manifest: DatasetManifest,
    pub dataset: Dataset,
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 over (seed, stream)
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthDataset, SynthError> {
    spec.validate()?;
    let d = spec.dim;
    let n = spec.height * spec.width;

    let mut shared = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, 0));
    let background: Vec<f64> = (0..d).map(|_| shared.random_range(0.3..1.0)).collect();
    let prototypes: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..d).map(|_| spec.signal * shared.random_range(0.0..1.0)).collect())
        .collect();
    let object: Vec<f64> = (0..d).map(|_| spec.object * shared.random_range(0.5..1.0)).collect();
    // Generic shifts are scaled so both modes move the average-pooled class
    // mean by the same amount.
    let generic_gain = spec.discriminative_fraction;
    let clutter_len = ((spec.clutter_fraction * n as f64).round() as usize).min(n);

    let block = spec.block_len();
    let total = spec.classes * spec.images_per_class;
    let mut maps = Vec::with_capacity(total);
    let mut masks = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    let mut entries = Vec::with_capacity(total);

    for index in 0..total {
        let class = index / spec.images_per_class;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, 1 + index as u64));
        let (start, len) = match spec.mode {
            SynthMode::Generic => (0, n),
            SynthMode::FineGrained => (rng.random_range(0..=n - block), block),
        };
        let fine = spec.mode == SynthMode::FineGrained;
        // Distractors land on random locations outside the marked block.
        let free: Vec<usize> = (0..n).filter(|&l| !fine || l < start || l >= start + len).collect();
        let mut distract = vec![None; n];
        for &loc in rand::seq::index::sample(&mut rng, free.len(), clutter_len.min(free.len())).iter().map(|i| &free[i]) {
            let v: Vec<f64> = (0..d).map(|_| spec.clutter * rng.random_range(0.0..1.0)).collect();
            distract[loc] = Some(v);
        }
        let mut values = Vec::with_capacity(n * d);
        let mut ids = Vec::with_capacity(n);
        for loc in 0..n {
            let marked = loc >= start && loc < start + len;
            ids.push(u32::from(marked));
            for k in 0..d {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let mut v = background[k] + spec.noise_scale * noise;
                if marked {
                    if fine {
                        v += prototypes[class][k] + object[k];
                    } else {
                        v += generic_gain * prototypes[class][k];
                    }
                }
                if let Some(c) = &distract[loc] {
                    v += c[k];
                }
                values.push(v.max(0.0));
            }
        }
        let id = format!("img_{index:05}");
        let fm = FeatureMap::single(id.clone(), spec.height, spec.width, d, values)?;
        maps.push(fm);
        masks.push(Some(PartMask::single(spec.height, spec.width, ids)));
        labels.push(class);
        entries.push(ManifestEntry {
            fmap: PathBuf::from(format!("maps/{id}.fmap")),
            label: class,
            mask: Some(PathBuf::from(format!("masks/{id}.fmap"))),
        });
    }

    let class_names: Vec<String> = (0..spec.classes).map(|c| format!("class_{c}")).collect();
    Ok(SynthDataset {
        manifest: DatasetManifest {
            class_names: class_names.clone(),
            entries,
            base_dir: PathBuf::new(),
        },
        dataset: Dataset {
            class_names,
            labels,
            maps,
            masks,
        },
    })
}

impl SynthDataset {
    /// Writes maps, masks and `manifest.txt` under `dir`; returns the manifest path.
    pub fn write_to(&self, dir: &Path, manifest_name: &str) -> Result<PathBuf, SynthError> {
        let io = |p: &Path, source| SynthError::Io {
            path: p.display().to_string(),
            source,
        };
        for sub in ["maps", "masks"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| io(&p, e))?;
        }
        for ((entry, fm), mask) in self.manifest.entries.iter().zip(&self.dataset.maps).zip(&self.dataset.masks) {
            write_fmap(fm, dir.join(&entry.fmap))?;
            if let (Some(mp), Some(mask)) = (&entry.mask, mask) {
                write_fmap(&mask.to_fmap(fm.image_id()), dir.join(mp))?;
            }
        }
        let path = dir.join(manifest_name);
        self.manifest.write(&path)?;
        Ok(path)
    }

    /// Splits into (train, valid): within each class, even positions go to train.
    pub fn split_alternate(&self) -> (SynthDataset, SynthDataset) {
        let mut rank = vec![0usize; self.dataset.class_count()];
        let mut picks = (Vec::new(), Vec::new());
        for (i, &label) in self.dataset.labels.iter().enumerate() {
            if rank[label] % 2 == 0 {
                picks.0.push(i);
            } else {
                picks.1.push(i);
            }
            rank[label] += 1;
        }
        (self.subset(&picks.0), self.subset(&picks.1))
    }

    pub fn subset(&self, indices: &[usize]) -> SynthDataset {
        SynthDataset {
            manifest: DatasetManifest {
                class_names: self.manifest.class_names.clone(),
                entries: indices.iter().map(|&i| self.manifest.entries[i].clone()).collect(),
                base_dir: self.manifest.base_dir.clone(),
            },
            dataset: self.dataset.subset(indices),
        }
    }
}

impl Dataset {
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            class_names: self.class_names.clone(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            maps: indices.iter().map(|&i| self.maps[i].clone()).collect(),
            masks: indices.iter().map(|&i| self.masks[i].clone()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = SynthSpec::default();
        let a = synth_dataset(&spec).unwrap();
        let b = synth_dataset(&spec).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let other = synth_dataset(&SynthSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.dataset.maps, other.dataset.maps);
    }

    #[test]
    fn fine_grained_block_size() {
        let spec = SynthSpec {
            discriminative_fraction: 0.1,
            height: 8,
            width: 8,
            ..SynthSpec::default()
        };
        assert_eq!(spec.block_len(), 7);
        let s = synth_dataset(&spec).unwrap();
        for mask in &s.dataset.masks {
            let ids = mask.as_ref().unwrap().flat_ids();
            assert_eq!(ids.iter().filter(|&&i| i == 1).count(), 7);
            // contiguous in row-major order
            let first = ids.iter().position(|&i| i == 1).unwrap();
            assert!(ids[first..first + 7].iter().all(|&i| i == 1));
        }
    }

    #[test]
    fn fine_grained_fraction_guard() {
        let spec = SynthSpec {
            discriminative_fraction: 0.25,
            ..SynthSpec::default()
        };
        assert!(matches!(synth_dataset(&spec), Err(SynthError::Invalid(_))));
        let generic = SynthSpec {
            mode: SynthMode::Generic,
            discriminative_fraction: 0.5,
            ..SynthSpec::default()
        };
        assert!(synth_dataset(&generic).is_ok());
    }

    #[test]
    fn nonnegative_features() {
        let spec = SynthSpec {
            noise_scale: 2.0,
            ..SynthSpec::default()
        };
        let s = synth_dataset(&spec).unwrap();
        assert!(s.dataset.maps.iter().all(|m| m.is_nonnegative()));
    }

    #[test]
    fn generic_mean_difference_everywhere() {
        let spec = SynthSpec {
            mode: SynthMode::Generic,
            classes: 2,
            images_per_class: 100,
            height: 4,
            width: 4,
            dim: 4,
            ..SynthSpec::default()
        };
        let s = synth_dataset(&spec).unwrap();
        let n = 16;
        let mut means = vec![vec![vec![0.0; 4]; n]; 2];
        for (fm, &label) in s.dataset.maps.iter().zip(&s.dataset.labels) {
            for (loc, v) in fm.vectors().iter().enumerate() {
                for k in 0..4 {
                    means[label][loc][k] += v[k] / 100.0;
                }
            }
        }
        for loc in 0..n {
            let diff: f64 = (0..4).map(|k| (means[0][loc][k] - means[1][loc][k]).abs()).sum();
            assert!(diff > 0.05, "location {loc} mean difference {diff}");
        }
    }

    #[test]
    fn split_keeps_classes_balanced() {
        let s = synth_dataset(&SynthSpec::default()).unwrap();
        let (train, valid) = s.split_alternate();
        assert_eq!(train.dataset.len(), 40);
        assert_eq!(valid.dataset.len(), 40);
        assert_eq!(train.manifest.entries.len(), 40);
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            images_per_class: 2,
            classes: 2,
            ..SynthSpec::default()
        };
        let s = synth_dataset(&spec).unwrap();
        let path = s.write_to(dir.path(), "manifest.txt").unwrap();
        let loaded = DatasetManifest::read(&path).unwrap().load().unwrap();
        assert_eq!(loaded, s.dataset);
    }
}
