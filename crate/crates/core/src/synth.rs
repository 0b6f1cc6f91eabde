//! Synthetic untrimmed videos with planted action segments.
//!
//! Every snippet is a noisy copy of either the background prototype or the
//! prototype of the class whose segment covers it, multiplied by a
//! per-video scale factor. The scale jitter gives videos heterogeneous score
//! magnitudes, which is what a fixed hand-set threshold struggles with.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetManifest, GroundTruthSegment, VideoSample};
use crate::error::{Error, Result};
use crate::DEFAULT_SNIPPET_DURATION;

const MAX_PROTOTYPE_ATTEMPTS: usize = 10_000;
const TEST_STREAM_OFFSET: u64 = 1 << 32;

/// Inclusive `[min, max]` range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range<T> {
    pub min: T,
    pub max: T,
}

impl<T> Range<T> {
    pub const fn new(min: T, max: T) -> Self {
        Range { min, max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub videos_per_class: usize,
    /// Held-out videos per class, generated from the same prototypes.
    #[serde(default)]
    pub test_videos_per_class: usize,
    /// Video length in snippets.
    pub num_snippets: Range<usize>,
    pub segments_per_video: Range<usize>,
    /// Segment length in snippets.
    pub segment_len: Range<usize>,
    pub noise: f64,
    /// Minimum Euclidean distance between any two prototypes.
    pub prototype_separation: f64,
    pub scale_jitter: Range<f64>,
    /// Fraction of each class's training videos flagged fully annotated.
    #[serde(default)]
    pub annotated_fraction: f64,
    #[serde(default = "default_snippet_duration")]
    pub snippet_duration: f64,
    pub seed: u64,
}

fn default_snippet_duration() -> f64 {
    DEFAULT_SNIPPET_DURATION
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// separation / noise = 8, no scale jitter
    Easy,
    /// separation / noise = 4, scale in [0.5, 2]
    Medium,
    /// separation / noise = 2, scale in [0.25, 4]
    Hard,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Preset::Easy),
            "medium" => Ok(Preset::Medium),
            "hard" => Ok(Preset::Hard),
            _ => Err(Error::Config(format!("unknown preset {s:?}"))),
        }
    }
}

impl SynthSpec {
    /// Five classes, 16-dimensional features, 20 training and 10 held-out
    /// videos per class, 40..=100 snippets, one to three segments of 6..=20
    /// snippets each.
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let separation = 2.0;
        let (ratio, jitter) = match preset {
            Preset::Easy => (8.0, Range::new(1.0, 1.0)),
            Preset::Medium => (4.0, Range::new(0.5, 2.0)),
            Preset::Hard => (2.0, Range::new(0.25, 4.0)),
        };
        SynthSpec {
            num_classes: 5,
            feature_dim: 16,
            videos_per_class: 20,
            test_videos_per_class: 10,
            num_snippets: Range::new(40, 100),
            segments_per_video: Range::new(1, 3),
            segment_len: Range::new(6, 20),
            noise: separation / ratio,
            prototype_separation: separation,
            scale_jitter: jitter,
            annotated_fraction: 0.0,
            snippet_duration: DEFAULT_SNIPPET_DURATION,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synth spec: {m}")));
        if self.num_classes < 2 {
            return fail("num_classes must be >= 2");
        }
        if self.feature_dim < 2 {
            return fail("feature_dim must be >= 2");
        }
        if self.videos_per_class == 0 {
            return fail("videos_per_class must be >= 1");
        }
        let ranges = [
            ("num_snippets", self.num_snippets),
            ("segments_per_video", self.segments_per_video),
            ("segment_len", self.segment_len),
        ];
        for (name, r) in ranges {
            if r.min == 0 || r.min > r.max {
                return fail(&format!("{name} must satisfy 1 <= min <= max"));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail("noise must be >= 0");
        }
        if !(self.prototype_separation > 0.0 && self.prototype_separation.is_finite()) {
            return fail("prototype_separation must be > 0");
        }
        let j = self.scale_jitter;
        if !(j.min > 0.0 && j.min <= j.max && j.max.is_finite()) {
            return fail("scale_jitter must satisfy 0 < min <= max");
        }
        if !(0.0..=1.0).contains(&self.annotated_fraction) {
            return fail("annotated_fraction must lie in [0, 1]");
        }
        if !(self.snippet_duration > 0.0 && self.snippet_duration.is_finite()) {
            return fail("snippet_duration must be > 0");
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes)
            .map(|c| format!("class_{c:02}"))
            .collect()
    }
}

/// Training set plus the held-out split drawn from the same prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub train: Dataset,
    pub test: Dataset,
    /// `C + 1` rows; the last one is the background prototype.
    pub prototypes: Array2<f64>,
}

/// Training split only.
pub fn generate(spec: &SynthSpec) -> Result<(DatasetManifest, Vec<VideoSample>)> {
    let out = generate_split(spec)?;
    Ok((out.train.manifest, out.train.samples))
}

pub fn generate_split(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let prototypes = draw_prototypes(spec)?;
    let flagged = (spec.annotated_fraction * spec.videos_per_class as f64).ceil() as usize;

    let mut train = Vec::with_capacity(spec.num_classes * spec.videos_per_class);
    let mut test = Vec::with_capacity(spec.num_classes * spec.test_videos_per_class);
    for class in 0..spec.num_classes {
        for j in 0..spec.videos_per_class {
            let stream = 1 + (class * spec.videos_per_class + j) as u64;
            let id = format!("train_c{class:02}_{j:03}");
            train.push(generate_video(
                spec,
                &prototypes,
                class,
                id,
                stream,
                j < flagged,
            )?);
        }
        for j in 0..spec.test_videos_per_class {
            let stream = TEST_STREAM_OFFSET + (class * spec.test_videos_per_class + j) as u64;
            let id = format!("test_c{class:02}_{j:03}");
            test.push(generate_video(spec, &prototypes, class, id, stream, false)?);
        }
    }
    Ok(SynthDataset {
        train: Dataset::from_samples(spec.class_names(), train)?,
        test: Dataset::from_samples(spec.class_names(), test)?,
        prototypes,
    })
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Gaussian prototypes, each rejection-resampled until it is at least
/// `prototype_separation` away from every earlier one.
fn draw_prototypes(spec: &SynthSpec) -> Result<Array2<f64>> {
    let mut rng = rng_for(spec.seed, 0);
    let d = spec.feature_dim;
    // Typical pairwise distance of N(0, r^2 I_d) draws is r * sqrt(2d).
    let radius = 1.5 * spec.prototype_separation / (2.0 * d as f64).sqrt();
    let n = spec.num_classes + 1;
    let mut protos = Array2::zeros((n, d));
    for i in 0..n {
        let mut attempts = 0;
        loop {
            let cand: Array1<f64> = (0..d)
                .map(|_| radius * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            let far = (0..i).all(|j| {
                let diff = &cand - &protos.row(j);
                diff.dot(&diff).sqrt() >= spec.prototype_separation
            });
            if far {
                protos.row_mut(i).assign(&cand);
                break;
            }
            attempts += 1;
            if attempts >= MAX_PROTOTYPE_ATTEMPTS {
                return Err(Error::Generation {
                    video: "prototypes".into(),
                    reason: format!(
                        "could not separate prototype {i} by {}",
                        spec.prototype_separation
                    ),
                });
            }
        }
    }
    Ok(protos)
}

/// Places `lengths` in `[0, total)` with at least one background snippet
/// between consecutive segments. Returns start indices.
fn place_segments<R: Rng + ?Sized>(
    rng: &mut R,
    lengths: &[usize],
    total: usize,
) -> Option<Vec<usize>> {
    let needed = lengths.iter().sum::<usize>() + lengths.len().saturating_sub(1);
    if needed > total {
        return None;
    }
    let slack = total - needed;
    // Random composition of the slack into len + 1 gaps.
    let mut cuts: Vec<usize> = (0..lengths.len())
        .map(|_| rng.random_range(0..=slack))
        .collect();
    cuts.sort_unstable();
    let mut starts = Vec::with_capacity(lengths.len());
    let mut cursor = 0;
    let mut prev_cut = 0;
    for (i, (&len, &cut)) in lengths.iter().zip(&cuts).enumerate() {
        cursor += cut - prev_cut + usize::from(i > 0);
        starts.push(cursor);
        cursor += len;
        prev_cut = cut;
    }
    Some(starts)
}

const PLACEMENT_ATTEMPTS: usize = 64;

fn generate_video(
    spec: &SynthSpec,
    prototypes: &Array2<f64>,
    class: usize,
    id: String,
    stream: u64,
    fully_annotated: bool,
) -> Result<VideoSample> {
    let mut rng = rng_for(spec.seed, stream);
    let t = rng.random_range(spec.num_snippets.min..=spec.num_snippets.max);
    let n_seg = rng.random_range(spec.segments_per_video.min..=spec.segments_per_video.max);
    // Redraw lengths a bounded number of times before giving up.
    let mut placed = None;
    let mut lengths = Vec::new();
    for _ in 0..PLACEMENT_ATTEMPTS {
        lengths = (0..n_seg)
            .map(|_| rng.random_range(spec.segment_len.min..=spec.segment_len.max))
            .collect();
        placed = place_segments(&mut rng, &lengths, t);
        if placed.is_some() {
            break;
        }
    }
    let starts = placed.ok_or_else(|| Error::Generation {
        video: id.clone(),
        reason: format!("segments of lengths {lengths:?} do not fit in {t} snippets"),
    })?;
    let scale = if spec.scale_jitter.min < spec.scale_jitter.max {
        rng.random_range(spec.scale_jitter.min..=spec.scale_jitter.max)
    } else {
        spec.scale_jitter.min
    };

    let background = spec.num_classes;
    let mut owner = vec![background; t];
    for (&start, &len) in starts.iter().zip(&lengths) {
        owner[start..start + len].fill(class);
    }
    let d = spec.feature_dim;
    let mut features = Array2::zeros((t, d));
    for (ti, &p) in owner.iter().enumerate() {
        for k in 0..d {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let v = scale * (prototypes[[p, k]] + spec.noise * noise);
            // Stored features are f32 on disk; keep them exactly representable.
            features[[ti, k]] = v as f32 as f64;
        }
    }
    let tau = spec.snippet_duration;
    let segments = starts
        .iter()
        .zip(&lengths)
        .map(|(&s, &len)| GroundTruthSegment::new(class, s as f64 * tau, (s + len) as f64 * tau))
        .collect();
    Ok(VideoSample {
        id,
        features,
        labels: BTreeSet::from([class]),
        segments: Some(segments),
        snippet_duration: tau,
        fully_annotated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            videos_per_class: 4,
            test_videos_per_class: 2,
            ..SynthSpec::preset(Preset::Medium, seed)
        }
    }

    #[test]
    fn zero_noise_reproduces_prototypes() {
        let spec = SynthSpec {
            noise: 0.0,
            scale_jitter: Range::new(1.0, 1.0),
            segments_per_video: Range::new(1, 1),
            ..small(3)
        };
        let out = generate_split(&spec).unwrap();
        for v in &out.train.samples {
            let class = *v.labels.iter().next().unwrap();
            let seg = v.segments.as_ref().unwrap()[0];
            let first = (seg.start / v.snippet_duration).round() as usize;
            let last = (seg.end / v.snippet_duration).round() as usize;
            for t in 0..v.num_snippets() {
                let proto = if (first..last).contains(&t) {
                    class
                } else {
                    spec.num_classes
                };
                for k in 0..spec.feature_dim {
                    assert_eq!(v.features[[t, k]], out.prototypes[[proto, k]] as f32 as f64);
                }
            }
        }
    }

    #[test]
    fn annotated_fraction_flags_first_videos() {
        let (_, samples) = generate(&small(1)).unwrap();
        assert!(samples.iter().all(|s| !s.fully_annotated));
        let spec = SynthSpec {
            annotated_fraction: 0.3,
            ..small(1)
        };
        let (m, samples) = generate(&spec).unwrap();
        // ceil(0.3 * 4) = 2 per class
        assert_eq!(
            samples.iter().filter(|s| s.fully_annotated).count(),
            2 * spec.num_classes
        );
        assert!(
            m.videos[0].fully_annotated
                && m.videos[1].fully_annotated
                && !m.videos[2].fully_annotated
        );
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        assert_eq!(
            generate_split(&small(9)).unwrap(),
            generate_split(&small(9)).unwrap()
        );
        assert_ne!(
            generate(&small(9)).unwrap().1,
            generate(&small(10)).unwrap().1
        );
    }

    #[test]
    fn prototypes_are_separated() {
        let out = generate_split(&small(5)).unwrap();
        let p = &out.prototypes;
        for i in 0..p.nrows() {
            for j in 0..i {
                let d = &p.row(i) - &p.row(j);
                assert!(d.dot(&d).sqrt() >= 2.0);
            }
        }
    }

    #[test]
    fn segments_disjoint_and_in_range() {
        let out = generate_split(&SynthSpec {
            segments_per_video: Range::new(3, 5),
            segment_len: Range::new(2, 8),
            ..small(6)
        })
        .unwrap();
        for v in out.train.samples.iter().chain(&out.test.samples) {
            let segs = v.segments.as_ref().unwrap();
            for w in segs.windows(2) {
                assert!(w[0].end < w[1].start, "{}: {w:?}", v.id);
            }
            assert!(segs
                .iter()
                .all(|s| s.start >= 0.0 && s.end <= v.duration() + 1e-9));
        }
    }

    #[test]
    fn infeasible_placement_names_video() {
        let spec = SynthSpec {
            num_snippets: Range::new(10, 10),
            segments_per_video: Range::new(3, 3),
            segment_len: Range::new(5, 5),
            ..small(1)
        };
        let err = generate(&spec).unwrap_err().to_string();
        assert!(err.contains("train_c00_000"), "{err}");
    }

    #[test]
    fn scale_jitter_varies_norms() {
        let (_, samples) = generate(&small(2)).unwrap();
        let norms: Vec<f64> = samples
            .iter()
            .map(|s| {
                (s.features.iter().map(|v| v * v).sum::<f64>() / s.features.len() as f64).sqrt()
            })
            .collect();
        let lo = norms.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = norms.iter().cloned().fold(0.0, f64::max);
        assert!(hi / lo > 1.5, "{lo} {hi}");
    }

    #[test]
    fn invalid_specs_rejected() {
        for bad in [
            SynthSpec {
                num_classes: 1,
                ..small(0)
            },
            SynthSpec {
                feature_dim: 1,
                ..small(0)
            },
            SynthSpec {
                scale_jitter: Range::new(0.0, 1.0),
                ..small(0)
            },
            SynthSpec {
                segment_len: Range::new(5, 3),
                ..small(0)
            },
            SynthSpec {
                noise: -1.0,
                ..small(0)
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn placement_respects_gaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let starts = place_segments(&mut rng, &[3, 2, 4], 12).unwrap();
            assert!(starts[0] + 3 < starts[1] && starts[1] + 2 < starts[2] && starts[2] + 4 <= 12);
        }
        assert!(place_segments(&mut rng, &[3, 2, 4], 10).is_none());
    }
}
