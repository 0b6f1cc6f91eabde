//! Video samples, the on-disk dataset layout, annotation rasterization and
//! random clip cropping.
//!
//! A dataset directory holds a `manifest.json` plus one `<id>.f32` file per
//! video: raw little-endian `f32`, row-major `T x D`.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::DEFAULT_SNIPPET_DURATION;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FEATURE_EXT: &str = "f32";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthSegment {
    pub class_id: usize,
    /// Seconds from the start of the video.
    pub start: f64,
    pub end: f64,
}

impl GroundTruthSegment {
    pub fn new(class_id: usize, start: f64, end: f64) -> Self {
        GroundTruthSegment {
            class_id,
            start,
            end,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.start.is_finite() && self.end.is_finite() && self.start >= 0.0 && self.start < self.end
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// One untrimmed video: its snippet features and whatever supervision it carries.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub id: String,
    /// `T x D`, row `t` is snippet `t`.
    pub features: Array2<f64>,
    pub labels: BTreeSet<usize>,
    pub segments: Option<Vec<GroundTruthSegment>>,
    pub snippet_duration: f64,
    /// Whether the temporal boundaries of this video supervise the localization loss.
    pub fully_annotated: bool,
}

impl VideoSample {
    pub fn num_snippets(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn duration(&self) -> f64 {
        self.num_snippets() as f64 * self.snippet_duration
    }

    /// Checks every sample invariant; `num_classes` bounds the label indices.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let id = self.id.as_str();
        if self.features.nrows() == 0 || self.features.ncols() == 0 {
            return Err(Error::video(id, "empty feature matrix"));
        }
        if let Some((idx, _)) = self.features.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::video(
                id,
                format!("non-finite feature at snippet {}, dim {}", idx.0, idx.1),
            ));
        }
        if !(self.snippet_duration.is_finite() && self.snippet_duration > 0.0) {
            return Err(Error::video(id, "snippet_duration must be positive"));
        }
        if self.labels.is_empty() {
            return Err(Error::video(id, "label set is empty"));
        }
        if let Some(&c) = self.labels.iter().find(|&&c| c >= num_classes) {
            return Err(Error::video(
                id,
                format!("label {c} out of range for {num_classes} classes"),
            ));
        }
        if let Some(segments) = &self.segments {
            for seg in segments {
                if !seg.is_valid() {
                    return Err(Error::video(
                        id,
                        format!("invalid segment [{}, {})", seg.start, seg.end),
                    ));
                }
                if !self.labels.contains(&seg.class_id) {
                    return Err(Error::video(
                        id,
                        format!("segment class {} not in labels", seg.class_id),
                    ));
                }
            }
        } else if self.fully_annotated {
            return Err(Error::video(id, "fully_annotated without segments"));
        }
        Ok(())
    }

    pub fn rasterize(&self, num_classes: usize) -> RasterizedAnnotation {
        rasterize(
            self.segments.as_deref().unwrap_or(&[]),
            self.num_snippets(),
            num_classes,
            self.snippet_duration,
        )
    }
}

/// Binary `T x C` matrix; entry `(t, c)` is 1 when snippet `t` lies inside a
/// ground-truth segment of class `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterizedAnnotation(pub Array2<f64>);

impl RasterizedAnnotation {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }
}

/// Snippet `t` covers `[t*tau, (t+1)*tau)` and is marked for class `c` when its
/// midpoint falls in `[start, end)` of some class-`c` segment.
pub fn rasterize(
    segments: &[GroundTruthSegment],
    num_snippets: usize,
    num_classes: usize,
    snippet_duration: f64,
) -> RasterizedAnnotation {
    let mut a = Array2::zeros((num_snippets, num_classes));
    for seg in segments.iter().filter(|s| s.class_id < num_classes) {
        for t in 0..num_snippets {
            let mid = (t as f64 + 0.5) * snippet_duration;
            if seg.start <= mid && mid < seg.end {
                a[[t, seg.class_id]] = 1.0;
            }
        }
    }
    RasterizedAnnotation(a)
}

/// Returns a random window of `max_len` snippets when the video is longer.
///
/// Segments are intersected with the window and shifted to clip-local time;
/// video-level labels are kept as they are.
pub fn crop_clip<R: Rng + ?Sized>(
    sample: &VideoSample,
    max_len: usize,
    rng: &mut R,
) -> VideoSample {
    assert!(max_len >= 1, "max_len must be positive");
    let t = sample.num_snippets();
    if t <= max_len {
        return sample.clone();
    }
    let offset = rng.random_range(0..=t - max_len);
    crop_at(sample, offset, max_len)
}

/// Deterministic core of [`crop_clip`].
pub fn crop_at(sample: &VideoSample, offset: usize, len: usize) -> VideoSample {
    let tau = sample.snippet_duration;
    let origin = offset as f64 * tau;
    let window = len as f64 * tau;
    let segments = sample.segments.as_ref().map(|segs| {
        segs.iter()
            .filter_map(|seg| {
                let start = (seg.start - origin).max(0.0);
                let end = (seg.end - origin).min(window);
                (start < end).then(|| GroundTruthSegment::new(seg.class_id, start, end))
            })
            .collect()
    });
    VideoSample {
        id: sample.id.clone(),
        features: sample
            .features
            .slice(s![offset..offset + len, ..])
            .to_owned(),
        labels: sample.labels.clone(),
        segments,
        snippet_duration: tau,
        fully_annotated: sample.fully_annotated,
    }
}

fn default_snippet_duration() -> f64 {
    DEFAULT_SNIPPET_DURATION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRecord {
    pub id: String,
    pub num_snippets: usize,
    pub feature_dim: usize,
    pub labels: BTreeSet<usize>,
    #[serde(default = "default_snippet_duration")]
    pub snippet_duration: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<GroundTruthSegment>>,
    #[serde(default)]
    pub fully_annotated: bool,
}

impl VideoRecord {
    pub fn from_sample(sample: &VideoSample) -> Self {
        VideoRecord {
            id: sample.id.clone(),
            num_snippets: sample.num_snippets(),
            feature_dim: sample.feature_dim(),
            labels: sample.labels.clone(),
            snippet_duration: sample.snippet_duration,
            segments: sample.segments.clone(),
            fully_annotated: sample.fully_annotated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub videos: Vec<VideoRecord>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.class_names.len() != self.num_classes {
            return Err(Error::Config(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        let mut seen = HashSet::new();
        let dim = self.videos.first().map(|v| v.feature_dim);
        for v in &self.videos {
            if !seen.insert(v.id.as_str()) {
                return Err(Error::video(&v.id, "duplicate id"));
            }
            if v.id.is_empty() || v.id.contains(['/', '\\']) {
                return Err(Error::video(&v.id, "id must be a plain file stem"));
            }
            if Some(v.feature_dim) != dim {
                return Err(Error::video(
                    &v.id,
                    format!(
                        "feature_dim {} differs from {}",
                        v.feature_dim,
                        dim.unwrap_or(0)
                    ),
                ));
            }
            if v.num_snippets == 0 || v.feature_dim == 0 {
                return Err(Error::video(
                    &v.id,
                    "num_snippets and feature_dim must be positive",
                ));
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.videos.first().map(|v| v.feature_dim)
    }
}

/// A manifest together with its decoded samples, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<VideoSample>,
}

impl Dataset {
    /// Builds the manifest from samples and checks every invariant.
    pub fn from_samples(class_names: Vec<String>, samples: Vec<VideoSample>) -> Result<Self> {
        let manifest = DatasetManifest {
            num_classes: class_names.len(),
            class_names,
            videos: samples.iter().map(VideoRecord::from_sample).collect(),
        };
        manifest.validate()?;
        for s in &samples {
            s.validate(manifest.num_classes)?;
        }
        Ok(Dataset { manifest, samples })
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    /// Accepts either the manifest file or the directory containing it.
    pub fn load(path: &Path) -> Result<Self> {
        load_dataset(path)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_dataset(dir, &self.manifest, &self.samples)
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path = manifest_path(path);
    let manifest: DatasetManifest = io::read_json(&manifest_path)?;
    manifest.validate()?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let samples = manifest
        .videos
        .iter()
        .map(|record| load_sample(dir, record, manifest.num_classes))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, samples })
}

fn load_sample(dir: &Path, record: &VideoRecord, num_classes: usize) -> Result<VideoSample> {
    let path = dir.join(format!("{}.{FEATURE_EXT}", record.id));
    let bytes = fs::read(&path)
        .map_err(|e| Error::video(&record.id, format!("{}: {e}", path.display())))?;
    let expected = record.num_snippets * record.feature_dim * 4;
    if bytes.len() != expected {
        return Err(Error::video(
            &record.id,
            format!(
                "feature file has {} bytes, expected {} ({} x {} x 4)",
                bytes.len(),
                expected,
                record.num_snippets,
                record.feature_dim
            ),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let features = Array2::from_shape_vec((record.num_snippets, record.feature_dim), values)
        .expect("length checked above");
    let sample = VideoSample {
        id: record.id.clone(),
        features,
        labels: record.labels.clone(),
        segments: record.segments.clone(),
        snippet_duration: record.snippet_duration,
        fully_annotated: record.fully_annotated,
    };
    sample.validate(num_classes)?;
    Ok(sample)
}

/// Encodes features as little-endian `f32`, row-major.
pub fn encode_features(features: &Array2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(features.len() * 4);
    for v in features.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Writes feature files first and the manifest last, each atomically.
///
/// Features are stored as `f32`; values that are already `f32`-representable
/// round-trip bit-exactly.
pub fn write_dataset(
    dir: &Path,
    manifest: &DatasetManifest,
    samples: &[VideoSample],
) -> Result<()> {
    manifest.validate()?;
    if manifest.videos.len() != samples.len() {
        return Err(Error::Config("manifest and sample counts differ".into()));
    }
    for (record, sample) in manifest.videos.iter().zip(samples) {
        if record.id != sample.id
            || record.num_snippets != sample.num_snippets()
            || record.feature_dim != sample.feature_dim()
        {
            return Err(Error::video(
                &record.id,
                "manifest record does not match sample",
            ));
        }
        sample.validate(manifest.num_classes)?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for sample in samples {
        let path = dir.join(format!("{}.{FEATURE_EXT}", sample.id));
        io::write_atomic(&path, &encode_features(&sample.features))?;
    }
    io::write_json_atomic(&dir.join(MANIFEST_FILE), manifest)
}
