//! Inference: binarize the gate, keep runs of active snippets for the
//! classes the video is predicted to contain, and score each run.

use std::collections::BTreeSet;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::data::VideoSample;
use crate::error::{Error, Result};
use crate::network::{self, sigmoid, Gate, GatingKind, NetworkParams, ScoreMap};
use crate::objectives::{pool_and_classify, Aggregator, ThresholdSource, VideoProbabilities};

/// Gate value a snippet must strictly exceed to count as action.
pub const BINARIZE_AT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// Action where `s_tc > b_t`.
    #[default]
    Predicted,
    /// Action where `s_tc > (max_t s_tc + min_t s_tc) / 2`.
    Manual,
}

impl InferenceMode {
    pub fn name(self) -> &'static str {
        match self {
            InferenceMode::Predicted => "predicted",
            InferenceMode::Manual => "manual",
        }
    }
}

impl std::str::FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predicted" => Ok(InferenceMode::Predicted),
            "manual" => Ok(InferenceMode::Manual),
            _ => Err(Error::Config(format!("unknown inference mode {s:?}"))),
        }
    }
}

/// How the video-level probabilities are pooled; should match training.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InferenceOptions {
    pub mode: InferenceMode,
    pub gating: GatingKind,
    pub aggregator: Aggregator,
    pub pool_threshold: ThresholdSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video_id: String,
    pub class_id: usize,
    /// Seconds.
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

/// Maximal runs of `values[t] > threshold`, as inclusive snippet ranges.
pub fn extract_segments(values: ArrayView1<f64>, threshold: f64) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut open: Option<usize> = None;
    for (t, &v) in values.iter().enumerate() {
        match (v > threshold, open) {
            (true, None) => open = Some(t),
            (false, Some(start)) => {
                runs.push((start, t - 1));
                open = None;
            }
            _ => {}
        }
    }
    if let Some(start) = open {
        runs.push((start, values.len() - 1));
    }
    runs
}

/// Classes whose probability strictly exceeds the mean over the `C` action
/// classes; background does not enter the mean.
pub fn select_classes(probs: &VideoProbabilities) -> BTreeSet<usize> {
    let p = probs.action_probs();
    let mean = p.sum() / p.len() as f64;
    p.iter()
        .enumerate()
        .filter(|(_, &v)| v > mean)
        .map(|(c, _)| c)
        .collect()
}

/// Candidate runs for one class before class selection.
pub fn candidate_segments(
    score_map: &ScoreMap,
    mode: InferenceMode,
    class: usize,
) -> Vec<(usize, usize)> {
    match mode {
        InferenceMode::Predicted => {
            let offsets = &score_map.s.column(class) - &score_map.b;
            // sigmoid(x) > 0.5 <=> x > 0, without rounding near zero
            extract_segments(offsets.view(), 0.0)
        }
        InferenceMode::Manual => {
            let thr = score_map.manual_thresholds()[class];
            extract_segments(score_map.s.column(class), thr)
        }
    }
}

/// Detections for one video given its score map and video-level probabilities.
pub fn localize(
    video_id: &str,
    snippet_duration: f64,
    score_map: &ScoreMap,
    probs: &VideoProbabilities,
    mode: InferenceMode,
) -> Vec<Detection> {
    let mut out = Vec::new();
    for class in select_classes(probs) {
        for (t0, t1) in candidate_segments(score_map, mode, class) {
            let gate_mean = (t0..=t1)
                .map(|t| sigmoid(score_map.s[[t, class]] - score_map.b[t]))
                .sum::<f64>()
                / (t1 - t0 + 1) as f64;
            out.push(Detection {
                video_id: video_id.to_string(),
                class_id: class,
                start: t0 as f64 * snippet_duration,
                end: (t1 + 1) as f64 * snippet_duration,
                score: probs.probs[class] * gate_mean,
            });
        }
    }
    out
}

/// Score map and pooled probabilities of an uncropped video, dropout off.
pub fn score_video(
    params: &NetworkParams,
    sample: &VideoSample,
    options: &InferenceOptions,
) -> Result<(ScoreMap, VideoProbabilities)> {
    let (score_map, _) = network::forward(params, sample.features.view(), None)?;
    let offsets = match options.pool_threshold {
        ThresholdSource::Predicted => score_map.offsets(),
        ThresholdSource::Manual => score_map.offsets_from(score_map.manual_thresholds().view()),
    };
    let gate = Gate::from_offsets(&offsets, options.gating);
    let probs = pool_and_classify(&score_map, &gate, options.aggregator);
    Ok((score_map, probs))
}

pub fn infer_video(
    params: &NetworkParams,
    sample: &VideoSample,
    options: &InferenceOptions,
) -> Result<Vec<Detection>> {
    let (score_map, probs) = score_video(params, sample, options)?;
    Ok(localize(
        &sample.id,
        sample.snippet_duration,
        &score_map,
        &probs,
        options.mode,
    ))
}

pub fn infer_dataset(
    params: &NetworkParams,
    samples: &[VideoSample],
    options: &InferenceOptions,
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for s in samples {
        out.extend(infer_video(params, s, options)?);
    }
    Ok(out)
}

/// One line of a detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub video_id: String,
    pub class_id: usize,
    pub class_name: String,
    pub start_s: f64,
    pub end_s: f64,
    pub score: f64,
}

impl DetectionRecord {
    pub fn new(det: &Detection, class_names: &[String]) -> Self {
        DetectionRecord {
            video_id: det.video_id.clone(),
            class_id: det.class_id,
            class_name: class_names.get(det.class_id).cloned().unwrap_or_default(),
            start_s: det.start,
            end_s: det.end,
            score: det.score,
        }
    }

    pub fn to_detection(&self) -> Detection {
        Detection {
            video_id: self.video_id.clone(),
            class_id: self.class_id,
            start: self.start_s,
            end: self.end_s,
            score: self.score,
        }
    }
}

pub fn parse_detection_lines(text: &str) -> Result<Vec<Detection>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str::<DetectionRecord>(line)
                .map(|r| r.to_detection())
                .map_err(|e| Error::Evaluation(format!("detection line {}: {e}", i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1, Array2};

    #[test]
    fn runs_of_active_snippets() {
        let v = array![0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        assert_eq!(extract_segments(v.view(), BINARIZE_AT), vec![(2, 4)]);
        assert!(extract_segments(Array1::zeros(5).view(), BINARIZE_AT).is_empty());
        let v = array![1.0, 0.0, 1.0];
        assert_eq!(
            extract_segments(v.view(), BINARIZE_AT),
            vec![(0, 0), (2, 2)]
        );
        // strict comparison
        assert!(extract_segments(array![0.5, 0.5].view(), BINARIZE_AT).is_empty());
    }

    fn probs(action: &[f64]) -> VideoProbabilities {
        let mut p = action.to_vec();
        p.push(1.0 - action.iter().sum::<f64>());
        VideoProbabilities {
            pooled_scores: Array1::zeros(action.len()),
            pooled_threshold: 0.0,
            probs: Array1::from(p),
        }
    }

    #[test]
    fn class_selection() {
        assert!(select_classes(&probs(&[0.25, 0.25, 0.25])).is_empty());
        assert_eq!(select_classes(&probs(&[0.6, 0.1])), BTreeSet::from([0]));
        assert_eq!(
            select_classes(&probs(&[0.5, 0.3, 0.2])),
            BTreeSet::from([0])
        );
    }

    #[test]
    fn untrained_network_detects_nothing() {
        let params = NetworkParams::zeros(2, 3, 2);
        let sample = VideoSample {
            id: "v".into(),
            features: Array2::ones((5, 2)),
            labels: BTreeSet::from([0]),
            segments: None,
            snippet_duration: 0.64,
            fully_annotated: false,
        };
        for mode in [InferenceMode::Predicted, InferenceMode::Manual] {
            let opts = InferenceOptions {
                mode,
                ..Default::default()
            };
            assert!(infer_video(&params, &sample, &opts).unwrap().is_empty());
        }
    }

    #[test]
    fn manual_constant_column_has_no_segments() {
        let sm = ScoreMap::new(array![[2.0, 0.0], [2.0, 1.0], [2.0, 0.0]], Array1::zeros(3));
        assert!(candidate_segments(&sm, InferenceMode::Manual, 0).is_empty());
        assert_eq!(
            candidate_segments(&sm, InferenceMode::Manual, 1),
            vec![(1, 1)]
        );
    }

    #[test]
    fn detections_use_snippet_times_and_scores() {
        let sm = ScoreMap::new(
            array![[-1.0, 5.0], [2.0, 5.0], [3.0, 5.0], [-2.0, 5.0]],
            array![0.0, 0.0, 1.0, 0.0],
        );
        let p = probs(&[0.8, 0.1]);
        let dets = localize("v", 0.5, &sm, &p, InferenceMode::Predicted);
        assert_eq!(dets.len(), 1);
        let d = &dets[0];
        assert_eq!((d.start, d.end), (0.5, 1.5));
        let expect = 0.8 * (sigmoid(2.0) + sigmoid(2.0)) / 2.0;
        assert!((d.score - expect).abs() < 1e-15);
    }

    #[test]
    fn single_class_is_never_selected() {
        // the only probability equals the mean
        assert!(select_classes(&probs(&[0.9])).is_empty());
        let sm = ScoreMap::new(array![[4.0], [4.0]], array![0.0, 0.0]);
        assert!(localize("v", 1.0, &sm, &probs(&[0.9]), InferenceMode::Predicted).is_empty());
    }

    #[test]
    fn detection_lines_round_trip() {
        let names = vec!["a".to_string()];
        let det = Detection {
            video_id: "v1".into(),
            class_id: 0,
            start: 0.64,
            end: 1.92,
            score: 0.123456789,
        };
        let text = crate::io::to_json_lines(&[DetectionRecord::new(&det, &names)]);
        assert_eq!(parse_detection_lines(&text).unwrap(), vec![det]);
        assert!(parse_detection_lines("{\"video_id\": 1}").is_err());
    }
}
