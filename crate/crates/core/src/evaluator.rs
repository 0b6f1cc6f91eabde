//! Detection mAP over temporal IoU thresholds.
//!
//! Detections of one class are pooled across videos and ranked by score
//! (ties: earlier start, then lower video id). Each detection greedily claims
//! the unmatched same-video ground truth with the highest IoU at or above the
//! threshold; a ground-truth segment credits at most one detection.
//!
//! AP is **not interpolated**: it is the sum of precision at every true
//! positive divided by the number of ground-truth segments. Numbers are
//! therefore not directly comparable with 11-point or 101-point interpolated
//! protocols.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GroundTruthSegment};
use crate::error::{Error, Result};
use crate::localizer::Detection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoGroundTruth {
    pub video_id: String,
    pub segments: Vec<GroundTruthSegment>,
}

pub fn ground_truth(dataset: &Dataset) -> Vec<VideoGroundTruth> {
    dataset
        .samples
        .iter()
        .map(|s| VideoGroundTruth {
            video_id: s.id.clone(),
            segments: s.segments.clone().unwrap_or_default(),
        })
        .collect()
}

/// IoU of two half-open intervals; 0 when disjoint.
pub fn interval_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.total_cmp(&b.start))
        .then_with(|| a.video_id.cmp(&b.video_id))
}

/// Sorts detections of a single class into ranking order.
pub fn rank<'a>(dets: impl IntoIterator<Item = &'a Detection>) -> Vec<&'a Detection> {
    let mut v: Vec<&Detection> = dets.into_iter().collect();
    v.sort_by(|a, b| rank_order(a, b));
    v
}

/// True-positive flags for `ranked` (already in ranking order) against the
/// ground-truth segments of one class, keyed by video id.
pub fn match_detections(
    ranked: &[&Detection],
    gts: &HashMap<&str, Vec<(f64, f64)>>,
    iou_threshold: f64,
) -> Vec<bool> {
    let mut used: HashMap<&str, Vec<bool>> = gts
        .iter()
        .map(|(k, v)| (*k, vec![false; v.len()]))
        .collect();
    ranked
        .iter()
        .map(|det| {
            let Some(segs) = gts.get(det.video_id.as_str()) else {
                return false;
            };
            let taken = used.get_mut(det.video_id.as_str()).unwrap();
            let mut best: Option<(usize, f64)> = None;
            for (j, &seg) in segs.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let iou = interval_iou((det.start, det.end), seg);
                if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Non-interpolated AP; `None` when there is no ground truth.
pub fn average_precision(flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (i, &hit) in flags.iter().enumerate() {
        if hit {
            tp += 1;
            sum += tp as f64 / (i + 1) as f64;
        }
    }
    Some(sum / num_gt as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub num_gt: usize,
    /// One entry per IoU threshold; `None` for classes without ground truth.
    pub ap: Vec<Option<f64>>,
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_thresholds: Vec<f64>,
    pub classes: Vec<ClassReport>,
    /// Mean AP over classes with at least one ground-truth segment.
    pub map: Vec<f64>,
    /// Mean of `map` over the thresholds.
    pub average_map: f64,
}

impl EvalReport {
    pub fn map_at(&self, iou: f64) -> Option<f64> {
        self.iou_thresholds
            .iter()
            .position(|&t| (t - iou).abs() < 1e-9)
            .map(|i| self.map[i])
    }

    fn from_classes(iou_thresholds: &[f64], classes: Vec<ClassReport>) -> Self {
        let map: Vec<f64> = (0..iou_thresholds.len())
            .map(|i| {
                let aps: Vec<f64> = classes.iter().filter_map(|c| c.ap[i]).collect();
                if aps.is_empty() {
                    0.0
                } else {
                    aps.iter().sum::<f64>() / aps.len() as f64
                }
            })
            .collect();
        let average_map = if map.is_empty() {
            0.0
        } else {
            map.iter().sum::<f64>() / map.len() as f64
        };
        EvalReport {
            iou_thresholds: iou_thresholds.to_vec(),
            classes,
            map,
            average_map,
        }
    }

    /// Percent table: one row per class with ground truth, then `mAP`; one
    /// column per threshold, then `Average`.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("class");
        for t in &self.iou_thresholds {
            out.push_str(&format!(",{t}"));
        }
        out.push_str(",Average\n");
        for c in self.classes.iter().filter(|c| c.num_gt > 0) {
            let name = class_names
                .get(c.class_id)
                .cloned()
                .unwrap_or_else(|| c.class_id.to_string());
            out.push_str(&name);
            let aps: Vec<f64> = c.ap.iter().map(|a| a.unwrap_or(0.0)).collect();
            for ap in &aps {
                out.push_str(&format!(",{:.2}", 100.0 * ap));
            }
            let avg = aps.iter().sum::<f64>() / aps.len().max(1) as f64;
            out.push_str(&format!(",{:.2}\n", 100.0 * avg));
        }
        out.push_str("mAP");
        for m in &self.map {
            out.push_str(&format!(",{:.2}", 100.0 * m));
        }
        out.push_str(&format!(",{:.2}\n", 100.0 * self.average_map));
        out
    }
}

fn validate_inputs(
    dets: &[Detection],
    gts: &[VideoGroundTruth],
    num_classes: usize,
    iou_thresholds: &[f64],
) -> Result<()> {
    if iou_thresholds.is_empty() || iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err(Error::Evaluation(
            "IoU thresholds must lie in (0, 1]".into(),
        ));
    }
    let mut ids = std::collections::HashSet::new();
    for g in gts {
        if !ids.insert(g.video_id.as_str()) {
            return Err(Error::Evaluation(format!(
                "duplicate ground-truth video {}",
                g.video_id
            )));
        }
        if let Some(s) = g
            .segments
            .iter()
            .find(|s| s.class_id >= num_classes || !s.is_valid())
        {
            return Err(Error::Evaluation(format!(
                "video {}: invalid ground-truth segment {s:?}",
                g.video_id
            )));
        }
    }
    for d in dets {
        if !ids.contains(d.video_id.as_str()) {
            return Err(Error::Evaluation(format!(
                "detection for unknown video {}",
                d.video_id
            )));
        }
        if d.class_id >= num_classes {
            return Err(Error::Evaluation(format!(
                "detection in video {} has unknown class {}",
                d.video_id, d.class_id
            )));
        }
        if !(d.score.is_finite() && d.start.is_finite() && d.end.is_finite() && d.start < d.end) {
            return Err(Error::Evaluation(format!(
                "malformed detection in video {}",
                d.video_id
            )));
        }
    }
    Ok(())
}

pub fn evaluate(
    dets: &[Detection],
    gts: &[VideoGroundTruth],
    num_classes: usize,
    iou_thresholds: &[f64],
) -> Result<EvalReport> {
    validate_inputs(dets, gts, num_classes, iou_thresholds)?;
    let mut classes = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let mut by_video: HashMap<&str, Vec<(f64, f64)>> = HashMap::new();
        let mut num_gt = 0;
        for g in gts {
            let segs: Vec<(f64, f64)> = g
                .segments
                .iter()
                .filter(|s| s.class_id == class)
                .map(|s| (s.start, s.end))
                .collect();
            num_gt += segs.len();
            if !segs.is_empty() {
                by_video.insert(g.video_id.as_str(), segs);
            }
        }
        let ranked = rank(dets.iter().filter(|d| d.class_id == class));
        let mut report = ClassReport {
            class_id: class,
            num_gt,
            ap: Vec::new(),
            tp: Vec::new(),
            fp: Vec::new(),
        };
        for &thr in iou_thresholds {
            let flags = match_detections(&ranked, &by_video, thr);
            let tp = flags.iter().filter(|&&f| f).count();
            report.ap.push(average_precision(&flags, num_gt));
            report.tp.push(tp);
            report.fp.push(flags.len() - tp);
        }
        classes.push(report);
    }
    Ok(EvalReport::from_classes(iou_thresholds, classes))
}

/// Parses `start:end:step` (inclusive) or a comma-separated list.
pub fn parse_iou_spec(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("bad IoU specification {spec:?}"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    let values = if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let (start, end, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
        if !(step > 0.0) || end < start {
            return Err(bad());
        }
        let n = ((end - start) / step + 1e-9).floor() as usize + 1;
        (0..n)
            .map(|i| ((start + i as f64 * step) * 1e6).round() / 1e6)
            .collect()
    } else {
        spec.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    if values.is_empty() || values.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err(bad());
    }
    Ok(values)
}

/// Brute-force reference evaluator for small instances.
///
/// Shares no code with [`evaluate`]: it re-runs the matching from scratch on
/// every prefix of the ranked list and integrates the resulting
/// precision/recall points.
pub mod oracle {
    use super::*;

    pub const MAX_DETECTIONS_PER_CLASS: usize = 10;

    fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
        let lo = if a0 > b0 { a0 } else { b0 };
        let hi = if a1 < b1 { a1 } else { b1 };
        if hi <= lo {
            return 0.0;
        }
        let inter = hi - lo;
        inter / ((a1 - a0) + (b1 - b0) - inter)
    }

    fn true_positives(prefix: &[&Detection], gts: &[(String, f64, f64)], thr: f64) -> usize {
        let mut claimed = vec![false; gts.len()];
        let mut hits = 0;
        for d in prefix {
            let mut pick = None;
            let mut pick_iou = -1.0;
            for (j, (vid, s, e)) in gts.iter().enumerate() {
                if claimed[j] || *vid != d.video_id {
                    continue;
                }
                let iou = overlap(d.start, d.end, *s, *e);
                if iou >= thr && iou > pick_iou {
                    pick = Some(j);
                    pick_iou = iou;
                }
            }
            if let Some(j) = pick {
                claimed[j] = true;
                hits += 1;
            }
        }
        hits
    }

    pub fn oracle_evaluate(
        dets: &[Detection],
        gts: &[VideoGroundTruth],
        num_classes: usize,
        iou_thresholds: &[f64],
    ) -> Result<EvalReport> {
        validate_inputs(dets, gts, num_classes, iou_thresholds)?;
        let mut classes = Vec::new();
        for class in 0..num_classes {
            let mut cls: Vec<&Detection> = dets.iter().filter(|d| d.class_id == class).collect();
            if cls.len() > MAX_DETECTIONS_PER_CLASS {
                return Err(Error::Evaluation(format!(
                    "oracle limited to {MAX_DETECTIONS_PER_CLASS} detections per class"
                )));
            }
            // insertion sort by (score desc, start asc, id asc)
            for i in 1..cls.len() {
                let mut j = i;
                while j > 0 {
                    let (a, b) = (cls[j - 1], cls[j]);
                    let swap = b.score > a.score
                        || (b.score == a.score && b.start < a.start)
                        || (b.score == a.score && b.start == a.start && b.video_id < a.video_id);
                    if !swap {
                        break;
                    }
                    cls.swap(j - 1, j);
                    j -= 1;
                }
            }
            let gt_list: Vec<(String, f64, f64)> = gts
                .iter()
                .flat_map(|g| {
                    g.segments
                        .iter()
                        .filter(move |s| s.class_id == class)
                        .map(move |s| (g.video_id.clone(), s.start, s.end))
                })
                .collect();
            let num_gt = gt_list.len();
            let mut report = ClassReport {
                class_id: class,
                num_gt,
                ap: vec![],
                tp: vec![],
                fp: vec![],
            };
            for &thr in iou_thresholds {
                let mut area = 0.0;
                let mut prev_recall = 0.0;
                let mut hits = 0;
                for n in 1..=cls.len() {
                    hits = true_positives(&cls[..n], &gt_list, thr);
                    if num_gt > 0 {
                        let recall = hits as f64 / num_gt as f64;
                        let precision = hits as f64 / n as f64;
                        area += (recall - prev_recall) * precision;
                        prev_recall = recall;
                    }
                }
                report.ap.push((num_gt > 0).then_some(area));
                report.tp.push(hits);
                report.fp.push(cls.len() - hits);
            }
            classes.push(report);
        }
        Ok(EvalReport::from_classes(iou_thresholds, classes))
    }
}
