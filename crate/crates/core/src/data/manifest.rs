//! Dataset manifests: JSON documents listing videos, their per-stream
//! feature files, video-level labels and (for evaluation) temporal ground
//! truth. See `docs/manifest.md` for the schema.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{GroundTruthInstance, IntervalUnit};
use crate::losses::VideoLabel;
use crate::model::FeatureSequence;
use crate::training::TrainingVideo;

use super::features::read_features;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Rgb,
    Flow,
}

impl Stream {
    pub const ALL: [Stream; 2] = [Stream::Rgb, Stream::Flow];

    pub fn name(self) -> &'static str {
        match self {
            Stream::Rgb => "rgb",
            Stream::Flow => "flow",
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamPaths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rgb: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<PathBuf>,
}

impl StreamPaths {
    pub fn get(&self, stream: Stream) -> Option<&Path> {
        match stream {
            Stream::Rgb => self.rgb.as_deref(),
            Stream::Flow => self.flow.as_deref(),
        }
    }
}

/// One annotated action instance inside a record; bounds are in the
/// manifest's unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthSpan {
    pub class_id: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRecord {
    pub video_id: String,
    pub subset: Subset,
    pub features: StreamPaths,
    /// ℓ1-normalized video label.
    pub label: Vec<f64>,
    #[serde(default)]
    pub ground_truth: Vec<GroundTruthSpan>,
    /// Per-segment foreground mask as a string of `0`/`1`; synthetic data only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_mask: Option<String>,
}

impl VideoRecord {
    pub fn segment_labels(&self) -> Option<Vec<bool>> {
        self.segment_mask
            .as_ref()
            .map(|m| m.bytes().map(|b| b == b'1').collect())
    }

    pub fn video_label(&self) -> Result<VideoLabel> {
        VideoLabel::new(self.label.clone()).map_err(|e| Error::Manifest {
            video_id: self.video_id.clone(),
            reason: e.to_string(),
        })
    }

    pub fn ground_truth_instances(&self) -> impl Iterator<Item = GroundTruthInstance> + '_ {
        self.ground_truth.iter().map(|g| GroundTruthInstance {
            video_id: self.video_id.clone(),
            class_id: g.class_id,
            start: g.start,
            end: g.end,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub unit: IntervalUnit,
    pub classes: usize,
    pub feature_dim: usize,
    pub records: Vec<VideoRecord>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::invalid(
                "manifest",
                format!("unsupported version {} (expected {MANIFEST_VERSION})", self.version),
            ));
        }
        let mut seen = HashSet::new();
        for r in &self.records {
            let fail = |reason: String| Error::Manifest {
                video_id: r.video_id.clone(),
                reason,
            };
            if !seen.insert(r.video_id.as_str()) {
                return Err(fail("duplicate video_id".into()));
            }
            if r.label.len() != self.classes {
                return Err(fail(format!(
                    "label has {} entries, manifest declares {} classes",
                    r.label.len(),
                    self.classes
                )));
            }
            let label = r.video_label()?;
            for g in &r.ground_truth {
                if g.class_id >= self.classes {
                    return Err(fail(format!("ground-truth class {} out of range", g.class_id)));
                }
                if !(g.start <= g.end) || !g.start.is_finite() || !g.end.is_finite() {
                    return Err(fail(format!("ground-truth span ({}, {}) invalid", g.start, g.end)));
                }
            }
            if !r.ground_truth.is_empty() {
                let support: BTreeSet<usize> = label.support().into_iter().collect();
                let gt_classes: BTreeSet<usize> = r.ground_truth.iter().map(|g| g.class_id).collect();
                if support != gt_classes {
                    return Err(fail(format!(
                        "label classes {support:?} differ from ground-truth classes {gt_classes:?}"
                    )));
                }
            }
            if let Some(mask) = &r.segment_mask {
                if mask.bytes().any(|b| b != b'0' && b != b'1') {
                    return Err(fail("segment_mask must contain only 0 and 1".into()));
                }
            }
            if r.features.rgb.is_none() && r.features.flow.is_none() {
                return Err(fail("no feature files".into()));
            }
        }
        Ok(())
    }

    pub fn records_in(&self, subset: Subset) -> impl Iterator<Item = &VideoRecord> {
        self.records.iter().filter(move |r| r.subset == subset)
    }

    pub fn ground_truth(&self, subset: Subset) -> Vec<GroundTruthInstance> {
        self.records_in(subset)
            .flat_map(|r| r.ground_truth_instances())
            .collect()
    }
}

/// A manifest together with the directory its relative paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
}

impl Dataset {
    pub fn feature_path(&self, record: &VideoRecord, stream: Stream) -> Result<PathBuf> {
        let rel = record.features.get(stream).ok_or_else(|| Error::Manifest {
            video_id: record.video_id.clone(),
            reason: format!("no {stream} features"),
        })?;
        Ok(self.root.join(rel))
    }

    /// Reads one stream's features for a record, checking the declared width.
    pub fn load_features(&self, record: &VideoRecord, stream: Stream) -> Result<FeatureSequence> {
        let m = read_features(&self.feature_path(record, stream)?)?;
        if m.cols() != self.manifest.feature_dim {
            return Err(Error::Manifest {
                video_id: record.video_id.clone(),
                reason: format!(
                    "{stream} features have {} columns, manifest declares {}",
                    m.cols(),
                    self.manifest.feature_dim
                ),
            });
        }
        FeatureSequence::new(m)
    }

    pub fn training_videos(&self, subset: Subset, stream: Stream) -> Result<Vec<TrainingVideo>> {
        self.manifest
            .records_in(subset)
            .map(|r| {
                Ok(TrainingVideo {
                    features: self.load_features(r, stream)?,
                    label: r.video_label()?,
                })
            })
            .collect()
    }
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = serde_json::from_str(text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    manifest.validate()?;
    Ok(manifest)
}

/// Loads and validates a manifest. Feature files are not opened here.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = parse_manifest(&text, path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Dataset { manifest, root })
}

pub fn manifest_to_json(manifest: &DatasetManifest) -> String {
    let mut s = serde_json::to_string_pretty(manifest).expect("manifest is always serializable");
    s.push('\n');
    s
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    std::fs::write(path, manifest_to_json(manifest)).map_err(|e| Error::io(path, e))
}
