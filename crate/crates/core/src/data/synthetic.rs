//! Synthetic action-unit videos.
//!
//! Every class is a short script of latent units. An action instance plays
//! its class's units back to back, each for at least two segments, and
//! background segments sit around a separate direction. The flow stream
//! re-renders the same script with its own prototypes and noise.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::features::write_features;
use super::manifest::{
    save_manifest, DatasetManifest, GroundTruthSpan, StreamPaths, Subset, VideoRecord, MANIFEST_VERSION,
};
use crate::error::{Error, Result};
use crate::evaluation::IntervalUnit;
use crate::losses::VideoLabel;
use crate::numerics::Matrix;

pub const MANIFEST_FILE: &str = "manifest.json";
const MIN_UNIT_SPAN: usize = 2;
const MAX_COSINE: f64 = 0.3;
const PROTOTYPE_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub units: usize,
    pub classes: usize,
    /// Unit script of each class, in playback order.
    pub class_units: Vec<Vec<usize>>,
    pub feature_dim: usize,
    pub videos: usize,
    pub test_videos: usize,
    pub segments_per_video: usize,
    pub instances_per_video: usize,
    pub action_fraction: f64,
    pub noise_std: f64,
    /// Chance that each instance after the first draws a fresh class.
    pub second_class_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            units: 5,
            classes: 4,
            class_units: vec![vec![0, 1], vec![0, 2], vec![1, 3], vec![2, 3, 4]],
            feature_dim: 32,
            videos: 200,
            test_videos: 50,
            segments_per_video: 60,
            instances_per_video: 2,
            action_fraction: 0.2,
            noise_std: 0.1,
            second_class_prob: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("synthetic spec", reason));
        if self.units == 0 || self.classes == 0 {
            return bad("units and classes must be >= 1".into());
        }
        if self.class_units.len() != self.classes {
            return bad(format!(
                "class_units lists {} classes, classes = {}",
                self.class_units.len(),
                self.classes
            ));
        }
        for (c, script) in self.class_units.iter().enumerate() {
            if script.is_empty() {
                return bad(format!("class {c} has no units"));
            }
            if let Some(u) = script.iter().find(|&&u| u >= self.units) {
                return bad(format!("class {c} uses unit {u}, but units = {}", self.units));
            }
        }
        let shared = (0..self.units).any(|u| self.class_units.iter().filter(|s| s.contains(&u)).count() >= 2);
        if !shared {
            return bad("no unit is shared by two or more classes".into());
        }
        if self.feature_dim < 2 {
            return bad("feature_dim must be >= 2".into());
        }
        if self.videos == 0 {
            return bad("videos must be >= 1".into());
        }
        if self.instances_per_video == 0 || self.segments_per_video == 0 {
            return bad("segments_per_video and instances_per_video must be >= 1".into());
        }
        if !(self.action_fraction > 0.0 && self.action_fraction < 1.0) {
            return bad(format!("action_fraction {} must lie in (0, 1)", self.action_fraction));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be finite and >= 0", self.noise_std));
        }
        if !(0.0..=1.0).contains(&self.second_class_prob) {
            return bad(format!("second_class_prob {} must lie in [0, 1]", self.second_class_prob));
        }
        self.instance_length().map(|_| ())
    }

    /// Segments per action instance, or an explanation of why the requested
    /// layout cannot fit.
    pub fn instance_length(&self) -> Result<usize> {
        let l = self.segments_per_video;
        let n = self.instances_per_video;
        let longest = self.class_units.iter().map(Vec::len).max().unwrap_or(1);
        let needed = longest * MIN_UNIT_SPAN;
        let len = (self.action_fraction * l as f64 / n as f64).round() as usize;
        if len < needed {
            return Err(Error::Infeasible(format!(
                "{n} instances at action fraction {} give {len} segments each in a {l}-segment video, \
                 but a {longest}-unit script needs at least {needed}",
                self.action_fraction
            )));
        }
        if n * len + (n - 1) > l {
            return Err(Error::Infeasible(format!(
                "{n} instances of {len} segments separated by background do not fit in {l} segments"
            )));
        }
        Ok(len)
    }
}

/// Unit-norm Gaussian directions, redrawn until every pair has |cos| below
/// the limit.
pub fn draw_prototypes(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > PROTOTYPE_ATTEMPTS {
            return Err(Error::Infeasible(format!(
                "could not draw {count} directions in {dim} dimensions with pairwise |cos| < {MAX_COSINE}"
            )));
        }
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        if out
            .iter()
            .all(|p| p.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>().abs() < MAX_COSINE)
        {
            out.push(v);
        }
    }
    Ok(out)
}

/// Latent content of one video: which unit (or background) each segment shows.
#[derive(Debug, Clone, PartialEq)]
pub struct Script {
    pub segments: Vec<Option<usize>>,
    pub instances: Vec<GroundTruthSpan>,
}

fn split_spans(len: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|i| len / parts + usize::from(i < len % parts))
        .collect()
}

pub fn draw_script(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Script> {
    let l = spec.segments_per_video;
    let n = spec.instances_per_video;
    let len = spec.instance_length()?;
    let first = rng.random_range(0..spec.classes);
    let classes: Vec<usize> = (0..n)
        .map(|i| {
            if i > 0 && spec.classes > 1 && rng.random_bool(spec.second_class_prob) {
                rng.random_range(0..spec.classes)
            } else {
                first
            }
        })
        .collect();

    // Background gaps: one mandatory segment between neighbours, the rest
    // scattered over all n + 1 gaps.
    let mut gaps = vec![0usize; n + 1];
    for g in gaps.iter_mut().take(n).skip(1) {
        *g = 1;
    }
    for _ in 0..(l - n * len - (n - 1)) {
        gaps[rng.random_range(0..=n)] += 1;
    }

    let mut segments = Vec::with_capacity(l);
    let mut instances = Vec::with_capacity(n);
    for (i, &class) in classes.iter().enumerate() {
        segments.extend(std::iter::repeat_n(None, gaps[i]));
        let start = segments.len();
        let script = &spec.class_units[class];
        for (&unit, span) in script.iter().zip(split_spans(len, script.len())) {
            segments.extend(std::iter::repeat_n(Some(unit), span));
        }
        instances.push(GroundTruthSpan {
            class_id: class,
            start: start as f64,
            end: (segments.len() - 1) as f64,
        });
    }
    segments.extend(std::iter::repeat_n(None, gaps[n]));
    debug_assert_eq!(segments.len(), l);
    Ok(Script { segments, instances })
}

/// Renders a script against one stream's prototypes; the background
/// direction is the last prototype.
pub fn render(script: &Script, prototypes: &[Vec<f64>], noise_std: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let dim = prototypes[0].len();
    let background = prototypes.len() - 1;
    let mut m = Matrix::zeros(script.segments.len(), dim);
    for (t, seg) in script.segments.iter().enumerate() {
        let proto = &prototypes[seg.unwrap_or(background)];
        for (x, p) in m.row_mut(t).iter_mut().zip(proto) {
            let z: f64 = StandardNormal.sample(rng);
            *x = p + noise_std * z;
        }
    }
    m
}

/// Writes feature files under `out_dir/features` and `out_dir/manifest.json`.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rgb = draw_prototypes(spec.units + 1, spec.feature_dim, &mut rng)?;
    let flow = draw_prototypes(spec.units + 1, spec.feature_dim, &mut rng)?;

    let feature_dir = out_dir.join("features");
    std::fs::create_dir_all(&feature_dir).map_err(|e| Error::io(&feature_dir, e))?;

    let mut records = Vec::with_capacity(spec.videos + spec.test_videos);
    let subsets = std::iter::repeat_n(Subset::Train, spec.videos).chain(std::iter::repeat_n(Subset::Test, spec.test_videos));
    let mut counters = [0usize; 2];
    for subset in subsets {
        let (prefix, k) = match subset {
            Subset::Train => ("train", &mut counters[0]),
            Subset::Test => ("test", &mut counters[1]),
        };
        let video_id = format!("{prefix}_{:04}", *k);
        *k += 1;

        let script = draw_script(spec, &mut rng)?;
        let present: BTreeSet<usize> = script.instances.iter().map(|g| g.class_id).collect();
        let present: Vec<usize> = present.into_iter().collect();
        let label = VideoLabel::from_classes(spec.classes, &present)?;

        let mut paths = StreamPaths::default();
        for (name, protos) in [("rgb", &rgb), ("flow", &flow)] {
            let m = render(&script, protos, spec.noise_std, &mut rng);
            let rel = PathBuf::from("features").join(format!("{video_id}.{name}.auf"));
            write_features(&out_dir.join(&rel), &m)?;
            match name {
                "rgb" => paths.rgb = Some(rel),
                _ => paths.flow = Some(rel),
            }
        }
        let mask = script
            .segments
            .iter()
            .map(|s| if s.is_some() { '1' } else { '0' })
            .collect();
        records.push(VideoRecord {
            video_id,
            subset,
            features: paths,
            label: label.as_slice().to_vec(),
            ground_truth: script.instances,
            segment_mask: Some(mask),
        });
    }

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        unit: IntervalUnit::Segments,
        classes: spec.classes,
        feature_dim: spec.feature_dim,
        records,
    };
    manifest.validate()?;
    save_manifest(&manifest, &out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
