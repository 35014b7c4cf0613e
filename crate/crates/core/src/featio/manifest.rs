//! Dataset manifests and part masks.
//!
//! A manifest is a tab-separated text file:
//!
//! ```text
//! # comments and blank lines are ignored
//! format	fmap-manifest/1
//! class	sparrow
//! class	finch
//! entry	maps/img_000.fmap	0	masks/img_000.fmap
//! entry	maps/img_001.fmap	1	-
//! ```
//!
//! Class lines are indexed in order of appearance. Entry paths are resolved
//! relative to the manifest's directory. A `-` mask column means no mask.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::fmap::{read_fmap, FeatureMap, FmapError, ScaleGrid};

pub const MANIFEST_FORMAT: &str = "fmap-manifest/1";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("entry {entry} has label {label} but only {classes} classes are declared")]
    BadLabel {
        entry: usize,
        label: usize,
        classes: usize,
    },
    #[error("{path}: {source}")]
    Fmap {
        path: String,
        #[source]
        source: FmapError,
    },
    #[error("mask {path} does not align with its feature map: {reason}")]
    MaskMismatch { path: String, reason: String },
    #[error("mask {path} holds a non-integer or negative part id {value}")]
    BadPartId { path: String, value: f64 },
    #[error("entry {entry} has no part mask")]
    MissingMask { entry: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub fmap: PathBuf,
    pub label: usize,
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    /// Directory relative entry paths are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<(), ManifestError> {
        for (i, e) in self.entries.iter().enumerate() {
            if e.label >= self.class_names.len() {
                return Err(ManifestError::BadLabel {
                    entry: i,
                    label: e.label,
                    classes: self.class_names.len(),
                });
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# alpha-pooling dataset manifest\n");
        let _ = writeln!(out, "format\t{MANIFEST_FORMAT}");
        for name in &self.class_names {
            let _ = writeln!(out, "class\t{name}");
        }
        for e in &self.entries {
            let mask = e.mask.as_ref().map(|m| m.display().to_string()).unwrap_or_else(|| "-".into());
            let _ = writeln!(out, "entry\t{}\t{}\t{}", e.fmap.display(), e.label, mask);
        }
        out
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, ManifestError> {
        let mut m = DatasetManifest {
            base_dir: base_dir.into(),
            ..Default::default()
        };
        let mut saw_format = false;
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let trimmed = raw.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split('\t').collect();
            let err = |message: String| ManifestError::Parse { line, message };
            match fields[0] {
                "format" => {
                    if fields.get(1) != Some(&MANIFEST_FORMAT) {
                        return Err(err(format!("unsupported format {:?}", fields.get(1))));
                    }
                    saw_format = true;
                }
                "class" => {
                    let name = fields.get(1).filter(|s| !s.is_empty()).ok_or_else(|| err("class line without a name".into()))?;
                    m.class_names.push((*name).to_owned());
                }
                "entry" => {
                    if fields.len() < 3 || fields.len() > 4 {
                        return Err(err(format!("entry needs 2 or 3 fields, got {}", fields.len() - 1)));
                    }
                    let label = fields[2].parse::<usize>().map_err(|e| err(format!("bad label {:?}: {e}", fields[2])))?;
                    let mask = match fields.get(3) {
                        None | Some(&"-") | Some(&"") => None,
                        Some(p) => Some(PathBuf::from(p)),
                    };
                    m.entries.push(ManifestEntry {
                        fmap: PathBuf::from(fields[1]),
                        label,
                        mask,
                    });
                }
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        if !saw_format {
            return Err(ManifestError::Parse {
                line: 0,
                message: "missing format line".into(),
            });
        }
        m.validate()?;
        Ok(m)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        DatasetManifest::parse(&text, base)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ManifestError> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Reads every feature map (and mask, when present) named by the manifest.
    pub fn load(&self) -> Result<Dataset, ManifestError> {
        self.validate()?;
        let mut maps = Vec::with_capacity(self.entries.len());
        let mut masks = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let p = self.resolve(&e.fmap);
            let fm = read_fmap(&p).map_err(|source| ManifestError::Fmap {
                path: p.display().to_string(),
                source,
            })?;
            let mask = match &e.mask {
                Some(mp) => {
                    let mp = self.resolve(mp);
                    let raw = read_fmap(&mp).map_err(|source| ManifestError::Fmap {
                        path: mp.display().to_string(),
                        source,
                    })?;
                    let mask = PartMask::from_fmap(&raw, &mp.display().to_string())?;
                    mask.check_aligned(&fm, &mp.display().to_string())?;
                    Some(mask)
                }
                None => None,
            };
            maps.push(fm);
            masks.push(mask);
        }
        Ok(Dataset {
            class_names: self.class_names.clone(),
            labels: self.entries.iter().map(|e| e.label).collect(),
            maps,
            masks,
        })
    }
}

/// A manifest with its feature maps loaded into memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub labels: Vec<usize>,
    pub maps: Vec<FeatureMap>,
    pub masks: Vec<Option<PartMask>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    /// All masks, or the index of the first entry lacking one.
    pub fn require_masks(&self) -> Result<Vec<&PartMask>, ManifestError> {
        self.masks
            .iter()
            .enumerate()
            .map(|(entry, m)| m.as_ref().ok_or(ManifestError::MissingMask { entry }))
            .collect()
    }
}

/// Per-location part ids aligned with a [`FeatureMap`]; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartMask {
    /// (height, width, ids row-major) per scale.
    pub scales: Vec<(usize, usize, Vec<u32>)>,
}

impl PartMask {
    pub fn single(height: usize, width: usize, ids: Vec<u32>) -> Self {
        assert_eq!(ids.len(), height * width, "mask size");
        PartMask {
            scales: vec![(height, width, ids)],
        }
    }

    /// Part ids in flatten order (scale-major, row-major).
    pub fn flat_ids(&self) -> Vec<u32> {
        self.scales.iter().flat_map(|(_, _, ids)| ids.iter().copied()).collect()
    }

    pub fn max_part(&self) -> u32 {
        self.flat_ids().into_iter().max().unwrap_or(0)
    }

    pub fn to_fmap(&self, image_id: &str) -> FeatureMap {
        let grids = self
            .scales
            .iter()
            .map(|(h, w, ids)| ScaleGrid::new(*h, *w, 1, ids.iter().map(|&i| i as f64).collect()).expect("mask grid"))
            .collect();
        FeatureMap::new(image_id, grids, true).expect("mask map")
    }

    pub fn from_fmap(fm: &FeatureMap, path: &str) -> Result<Self, ManifestError> {
        if fm.dim() != 1 {
            return Err(ManifestError::MaskMismatch {
                path: path.into(),
                reason: format!("mask must have D=1, found D={}", fm.dim()),
            });
        }
        let mut scales = Vec::new();
        for g in fm.scales() {
            let ids = g
                .values()
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                        Ok(v as u32)
                    } else {
                        Err(ManifestError::BadPartId { path: path.into(), value: v })
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            scales.push((g.height(), g.width(), ids));
        }
        Ok(PartMask { scales })
    }

    pub fn check_aligned(&self, fm: &FeatureMap, path: &str) -> Result<(), ManifestError> {
        if self.scales.len() != fm.scales().len() {
            return Err(ManifestError::MaskMismatch {
                path: path.into(),
                reason: format!("{} scales vs {}", self.scales.len(), fm.scales().len()),
            });
        }
        for (s, ((h, w, _), g)) in self.scales.iter().zip(fm.scales()).enumerate() {
            if *h != g.height() || *w != g.width() {
                return Err(ManifestError::MaskMismatch {
                    path: path.into(),
                    reason: format!("scale {s}: mask {h}x{w} vs map {}x{}", g.height(), g.width()),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render() {
        let text = "# demo\nformat\tfmap-manifest/1\nclass\ta\nclass\tb\nentry\tx.fmap\t1\tm.fmap\nentry\ty.fmap\t0\t-\n";
        let m = DatasetManifest::parse(text, "/data").unwrap();
        assert_eq!(m.class_names, vec!["a", "b"]);
        assert_eq!(m.entries[0].mask.as_deref(), Some(Path::new("m.fmap")));
        assert_eq!(m.entries[1].mask, None);
        assert_eq!(m.resolve(&m.entries[0].fmap), PathBuf::from("/data/x.fmap"));
        let again = DatasetManifest::parse(&m.to_text(), "/data").unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn label_out_of_range() {
        let text = "format\tfmap-manifest/1\nclass\ta\nentry\tx.fmap\t3\n";
        assert!(matches!(DatasetManifest::parse(text, "."), Err(ManifestError::BadLabel { label: 3, .. })));
    }

    #[test]
    fn missing_format_line() {
        assert!(matches!(DatasetManifest::parse("class\ta\n", "."), Err(ManifestError::Parse { .. })));
    }

    #[test]
    fn mask_round_trip_through_fmap() {
        let m = PartMask::single(2, 2, vec![0, 1, 1, 2]);
        let fm = m.to_fmap("mask");
        assert_eq!(PartMask::from_fmap(&fm, "m").unwrap(), m);
        assert_eq!(m.max_part(), 2);
    }

    #[test]
    fn fractional_part_id_rejected() {
        let fm = FeatureMap::single("m", 1, 1, 1, vec![0.5]).unwrap();
        assert!(matches!(PartMask::from_fmap(&fm, "m"), Err(ManifestError::BadPartId { .. })));
    }
}
