//! Video-level pooling, class probabilities and the training losses, each
//! with exact gradients with respect to the score map.
//!
//! The full objective is
//!
//! ```text
//! L = lambda * L_clas + (1 - lambda) * L_reg + eta * L_loc
//! ```
//!
//! where `L_clas` is a weighted cross entropy over `C` action classes plus
//! background, `L_reg` pushes action scores and predicted thresholds to
//! opposite signs with a margin, and `L_loc` is the mean absolute difference
//! between the gate and rasterized annotations of fully annotated videos.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{RasterizedAnnotation, VideoSample};
use crate::error::{Error, Result};
use crate::network::{
    self, DropoutMask, Gate, GatingKind, GradientBundle, NetworkParams, ScoreMap,
};

/// Added to the gated pooling denominator and to both norms of the
/// regularizer so degenerate gates and all-zero columns stay finite.
pub const STABILIZER: f64 = 1e-8;

/// Lower clamp applied to probabilities before taking logs.
pub const MIN_PROBABILITY: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    /// Gate-weighted temporal average.
    #[default]
    Gated,
    /// Mean of the `ceil(T / 8)` largest scores per class.
    TopkEighth,
}

impl Aggregator {
    pub const ALL: [Aggregator; 2] = [Aggregator::Gated, Aggregator::TopkEighth];

    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Gated => "gated",
            Aggregator::TopkEighth => "topk_eighth",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegForm {
    #[default]
    InnerProduct,
    L1,
    L2,
    Cosine,
}

impl RegForm {
    pub const ALL: [RegForm; 4] = [
        RegForm::InnerProduct,
        RegForm::L1,
        RegForm::L2,
        RegForm::Cosine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RegForm::InnerProduct => "inner_product",
            RegForm::L1 => "l1",
            RegForm::L2 => "l2",
            RegForm::Cosine => "cosine",
        }
    }
}

/// Which threshold the training gate compares action scores against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSource {
    /// The network's own threshold column.
    #[default]
    Predicted,
    /// `(max_t s_tc + min_t s_tc) / 2`, held constant in the backward pass.
    Manual,
}

impl ThresholdSource {
    pub fn name(self) -> &'static str {
        match self {
            ThresholdSource::Predicted => "predicted",
            ThresholdSource::Manual => "manual",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda: f64,
    pub eta: f64,
    /// Background weight; `None` means `1 / C`.
    pub background_weight: Option<f64>,
    pub reg_form: RegForm,
    pub aggregator: Aggregator,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.2,
            eta: 3.0,
            background_weight: None,
            reg_form: RegForm::InnerProduct,
            aggregator: Aggregator::Gated,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta {} must be >= 0", self.eta)));
        }
        if let Some(w) = self.background_weight {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("background weight {w} must be > 0")));
            }
        }
        Ok(())
    }

    pub fn background_weight_for(&self, num_classes: usize) -> f64 {
        self.background_weight.unwrap_or(1.0 / num_classes as f64)
    }
}

/// Normalized multi-hot label vector: `1 / |G|` on ground-truth classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVector(pub Array1<f64>);

impl LabelVector {
    pub fn from_labels(labels: &BTreeSet<usize>, num_classes: usize) -> Self {
        assert!(!labels.is_empty(), "label set must be nonempty");
        let w = 1.0 / labels.len() as f64;
        let mut y = Array1::zeros(num_classes);
        for &c in labels {
            y[c] = w;
        }
        LabelVector(y)
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.0)
            .map(|(c, _)| c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoProbabilities {
    /// Pooled action scores, length `C`.
    pub pooled_scores: Array1<f64>,
    /// Temporal mean of the threshold column, used as the background score.
    pub pooled_threshold: f64,
    /// Softmax over `C` actions then background (index `C`).
    pub probs: Array1<f64>,
}

impl VideoProbabilities {
    pub fn num_classes(&self) -> usize {
        self.pooled_scores.len()
    }

    pub fn action_probs(&self) -> ArrayView1<'_, f64> {
        self.probs.slice(ndarray::s![..self.num_classes()])
    }

    fn logits(&self) -> Array1<f64> {
        let c = self.num_classes();
        let mut z = Array1::zeros(c + 1);
        z.slice_mut(ndarray::s![..c]).assign(&self.pooled_scores);
        z[c] = self.pooled_threshold;
        z
    }
}

pub fn log_softmax(z: ArrayView1<f64>) -> Array1<f64> {
    let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.mapv(|v| v - lse)
}

fn topk_indices(column: ArrayView1<f64>) -> Vec<usize> {
    let k = column.len().div_ceil(8);
    let mut idx: Vec<usize> = (0..column.len()).collect();
    idx.sort_by(|&a, &b| column[b].total_cmp(&column[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn pool_and_classify(
    score_map: &ScoreMap,
    gate: &Gate,
    aggregator: Aggregator,
) -> VideoProbabilities {
    let s = &score_map.s;
    let pooled_scores = match aggregator {
        Aggregator::Gated => {
            let num = (&gate.g * s).sum_axis(Axis(0));
            let den = gate.g.sum_axis(Axis(0)) + STABILIZER;
            num / den
        }
        Aggregator::TopkEighth => s.map_axis(Axis(0), |col| {
            let idx = topk_indices(col);
            idx.iter().map(|&t| col[t]).sum::<f64>() / idx.len() as f64
        }),
    };
    let pooled_threshold = score_map.b.mean().unwrap_or(0.0);
    let mut out = VideoProbabilities {
        pooled_scores,
        pooled_threshold,
        probs: Array1::zeros(0),
    };
    out.probs = log_softmax(out.logits().view()).mapv(f64::exp);
    out
}

/// Gradients of a pooled-score objective pushed back onto the score map.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolGradients {
    pub d_s: Array2<f64>,
    pub d_b: Array1<f64>,
    /// Gradient with respect to the gate entries (zero for top-k pooling).
    pub d_g: Array2<f64>,
}

pub fn pool_backward(
    score_map: &ScoreMap,
    gate: &Gate,
    aggregator: Aggregator,
    pooled: &VideoProbabilities,
    d_pooled_scores: ArrayView1<f64>,
    d_pooled_threshold: f64,
) -> PoolGradients {
    let (t, c) = score_map.s.dim();
    let mut d_s = Array2::zeros((t, c));
    let mut d_g = Array2::zeros((t, c));
    match aggregator {
        Aggregator::Gated => {
            let den = gate.g.sum_axis(Axis(0)) + STABILIZER;
            for ci in 0..c {
                let up = d_pooled_scores[ci] / den[ci];
                let mean = pooled.pooled_scores[ci];
                for ti in 0..t {
                    d_s[[ti, ci]] = up * gate.g[[ti, ci]];
                    d_g[[ti, ci]] = up * (score_map.s[[ti, ci]] - mean);
                }
            }
        }
        Aggregator::TopkEighth => {
            for ci in 0..c {
                let idx = topk_indices(score_map.s.column(ci));
                let share = d_pooled_scores[ci] / idx.len() as f64;
                for ti in idx {
                    d_s[[ti, ci]] = share;
                }
            }
        }
    }
    let d_b = Array1::from_elem(t, d_pooled_threshold / t as f64);
    PoolGradients { d_s, d_b, d_g }
}

/// Value of a batch loss plus its gradient with respect to the pooled scores
/// `(s_hat, b_hat)` of every video.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationLoss {
    pub value: f64,
    pub d_pooled_scores: Vec<Array1<f64>>,
    pub d_pooled_threshold: Vec<f64>,
}

/// `-(1/B) sum_i [ sum_c y_c log p_c + w_b log p_bg ]`; the background term
/// enters once per video.
pub fn classification_loss(
    probs: &[VideoProbabilities],
    labels: &[LabelVector],
    background_weight: f64,
) -> ClassificationLoss {
    assert_eq!(probs.len(), labels.len());
    assert!(!probs.is_empty(), "batch must be nonempty");
    let inv_b = 1.0 / probs.len() as f64;
    let min_log = MIN_PROBABILITY.ln();
    let mut value = 0.0;
    let mut d_pooled_scores = Vec::with_capacity(probs.len());
    let mut d_pooled_threshold = Vec::with_capacity(probs.len());
    for (vp, y) in probs.iter().zip(labels) {
        let c = vp.num_classes();
        let log_p = log_softmax(vp.logits().view());
        let p = log_p.mapv(f64::exp);
        let mut weights = Array1::zeros(c + 1);
        weights.slice_mut(ndarray::s![..c]).assign(&y.0);
        weights[c] = background_weight;

        let mut d_z = Array1::zeros(c + 1);
        for j in 0..=c {
            let w = weights[j];
            if w == 0.0 {
                continue;
            }
            value -= inv_b * w * log_p[j].max(min_log);
            if log_p[j] >= min_log {
                // d(-w log p_j)/dz = w (p - e_j)
                d_z.scaled_add(inv_b * w, &p);
                d_z[j] -= inv_b * w;
            }
        }
        d_pooled_scores.push(d_z.slice(ndarray::s![..c]).to_owned());
        d_pooled_threshold.push(d_z[c]);
    }
    ClassificationLoss {
        value,
        d_pooled_scores,
        d_pooled_threshold,
    }
}

/// Batch loss defined directly on score maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMapLoss {
    pub value: f64,
    pub d_s: Vec<Array2<f64>>,
    pub d_b: Vec<Array1<f64>>,
}

/// Inner-product threshold regularizer:
/// `(1/B) sum_i sum_t max(s~_t b_t + 1, 0) / (|s~| |b|)` with
/// `s~_t = max over ground-truth classes of s_tc`.
pub fn threshold_regularization_loss(
    score_maps: &[ScoreMap],
    labels: &[LabelVector],
) -> ScoreMapLoss {
    reg_variant(score_maps, labels, RegForm::InnerProduct)
}

/// Threshold regularizer in any of its four forms.
///
/// With `d_t = s~_t - b_t`:
/// - `l1`: `sum_t max(0, 1 - |d_t|) / T`
/// - `l2`: `sum_t max(0, 1 - d_t^2) / T`
/// - `cosine`: `<s~, b> / (|s~| |b|)`
pub fn reg_variant(score_maps: &[ScoreMap], labels: &[LabelVector], form: RegForm) -> ScoreMapLoss {
    assert_eq!(score_maps.len(), labels.len());
    assert!(!score_maps.is_empty(), "batch must be nonempty");
    let inv_b = 1.0 / score_maps.len() as f64;
    let mut out = ScoreMapLoss {
        value: 0.0,
        d_s: Vec::with_capacity(score_maps.len()),
        d_b: Vec::with_capacity(score_maps.len()),
    };
    for (sm, y) in score_maps.iter().zip(labels) {
        let (value, d_s, d_b) = reg_single(sm, y, form);
        out.value += inv_b * value;
        out.d_s.push(d_s * inv_b);
        out.d_b.push(d_b * inv_b);
    }
    out
}

/// Per-snippet max over ground-truth classes, with the winning column
/// (earliest class on ties).
pub fn max_over_labels(score_map: &ScoreMap, labels: &LabelVector) -> (Array1<f64>, Vec<usize>) {
    let classes: Vec<usize> = labels.classes().collect();
    assert!(
        !classes.is_empty(),
        "at least one ground-truth class required"
    );
    let t = score_map.num_snippets();
    let mut values = Array1::zeros(t);
    let mut argmax = Vec::with_capacity(t);
    for ti in 0..t {
        let mut best = classes[0];
        for &c in &classes[1..] {
            if score_map.s[[ti, c]] > score_map.s[[ti, best]] {
                best = c;
            }
        }
        values[ti] = score_map.s[[ti, best]];
        argmax.push(best);
    }
    (values, argmax)
}

/// `d |v| / dv` with the zero vector mapped to zero.
fn norm_grad(v: &Array1<f64>, norm: f64) -> Array1<f64> {
    if norm > 0.0 {
        v / norm
    } else {
        Array1::zeros(v.len())
    }
}

fn reg_single(sm: &ScoreMap, y: &LabelVector, form: RegForm) -> (f64, Array2<f64>, Array1<f64>) {
    let t = sm.num_snippets();
    let (st, argmax) = max_over_labels(sm, y);
    let b = &sm.b;
    let (value, d_st, d_b) = match form {
        RegForm::InnerProduct | RegForm::Cosine => {
            let ns = st.dot(&st).sqrt();
            let nb = b.dot(b).sqrt();
            let denom = (ns + STABILIZER) * (nb + STABILIZER);
            let (numer, mut d_st, mut d_b) = if form == RegForm::InnerProduct {
                let mut numer = 0.0;
                let mut d_st = Array1::zeros(t);
                let mut d_b = Array1::zeros(t);
                for ti in 0..t {
                    let arg = st[ti] * b[ti] + 1.0;
                    if arg > 0.0 {
                        numer += arg;
                        d_st[ti] = b[ti] / denom;
                        d_b[ti] = st[ti] / denom;
                    }
                }
                (numer, d_st, d_b)
            } else {
                (st.dot(b), b / denom, &st / denom)
            };
            let value = numer / denom;
            d_st.scaled_add(-value / (ns + STABILIZER), &norm_grad(&st, ns));
            d_b.scaled_add(-value / (nb + STABILIZER), &norm_grad(b, nb));
            (value, d_st, d_b)
        }
        RegForm::L1 | RegForm::L2 => {
            let inv_t = 1.0 / t as f64;
            let mut value = 0.0;
            let mut d_d = Array1::zeros(t);
            for ti in 0..t {
                let d = st[ti] - b[ti];
                if d.abs() < 1.0 {
                    if form == RegForm::L1 {
                        value += (1.0 - d.abs()) * inv_t;
                        d_d[ti] = if d > 0.0 {
                            -inv_t
                        } else if d < 0.0 {
                            inv_t
                        } else {
                            0.0
                        };
                    } else {
                        value += (1.0 - d * d) * inv_t;
                        d_d[ti] = -2.0 * d * inv_t;
                    }
                }
            }
            let d_b = -&d_d;
            (value, d_d, d_b)
        }
    };
    let mut d_s = Array2::zeros(sm.s.dim());
    for (ti, &c) in argmax.iter().enumerate() {
        d_s[[ti, c]] = d_st[ti];
    }
    (value, d_s, d_b)
}

/// Loss defined on gates; `d_g[i]` is `None` for videos outside the
/// annotated set.
#[derive(Debug, Clone, PartialEq)]
pub struct GateLoss {
    pub value: f64,
    pub d_g: Vec<Option<Array2<f64>>>,
}

/// Mean absolute gate error over the fully annotated videos of the batch;
/// exactly zero when none is annotated.
pub fn localization_loss(
    gates: &[Gate],
    annotations: &[Option<&RasterizedAnnotation>],
) -> GateLoss {
    assert_eq!(gates.len(), annotations.len());
    let annotated = annotations.iter().filter(|a| a.is_some()).count();
    let mut out = GateLoss {
        value: 0.0,
        d_g: vec![None; gates.len()],
    };
    if annotated == 0 {
        return out;
    }
    for (i, (gate, ann)) in gates.iter().zip(annotations).enumerate() {
        let Some(ann) = ann else { continue };
        assert_eq!(
            gate.g.dim(),
            ann.0.dim(),
            "gate and annotation shapes differ"
        );
        let scale = 1.0 / (annotated * gate.g.len()) as f64;
        let mut d = Array2::zeros(gate.g.dim());
        Zip::from(&mut d)
            .and(&gate.g)
            .and(&ann.0)
            .for_each(|d, &g, &a| {
                out.value += scale * (g - a).abs();
                *d = if g > a {
                    scale
                } else if g < a {
                    -scale
                } else {
                    0.0
                };
            });
        out.d_g[i] = Some(d);
    }
    out
}

/// Everything needed to turn a batch into a scalar objective and gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub loss: LossConfig,
    pub gating: GatingKind,
    pub threshold: ThresholdSource,
    /// Drop probability; 0 disables dropout.
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_clas")]
    pub clas: f64,
    #[serde(rename = "L_reg")]
    pub reg: f64,
    #[serde(rename = "L_loc")]
    pub loc: f64,
    #[serde(rename = "L")]
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.clas.is_finite()
            && self.reg.is_finite()
            && self.loc.is_finite()
            && self.total.is_finite()
    }
}

/// Per-video state of the forward half of [`total_loss`].
pub struct VideoForward {
    pub score_map: ScoreMap,
    pub offsets: Array2<f64>,
    pub gate: Gate,
    pub probs: VideoProbabilities,
    pub labels: LabelVector,
    pub annotation: Option<RasterizedAnnotation>,
    cache: network::ForwardCache,
}

impl VideoForward {
    pub fn cache(&self) -> &network::ForwardCache {
        &self.cache
    }
}

/// Runs the network and pooling on one video under `objective`.
pub fn forward_video<R: Rng + ?Sized>(
    params: &NetworkParams,
    sample: &VideoSample,
    objective: &Objective,
    rng: &mut R,
) -> Result<VideoForward> {
    let c = params.num_classes();
    let mask = (objective.dropout > 0.0).then(|| {
        DropoutMask::sample(
            rng,
            sample.num_snippets(),
            params.hidden_dim(),
            objective.dropout,
        )
    });
    let (score_map, cache) = network::forward(params, sample.features.view(), mask.as_ref())?;
    let offsets = match objective.threshold {
        ThresholdSource::Predicted => score_map.offsets(),
        ThresholdSource::Manual => score_map.offsets_from(score_map.manual_thresholds().view()),
    };
    let gate = Gate::from_offsets(&offsets, objective.gating);
    let probs = pool_and_classify(&score_map, &gate, objective.loss.aggregator);
    let labels = LabelVector::from_labels(&sample.labels, c);
    let annotation = sample.fully_annotated.then(|| sample.rasterize(c));
    Ok(VideoForward {
        score_map,
        offsets,
        gate,
        probs,
        labels,
        annotation,
        cache,
    })
}

/// Full objective over a batch and its gradient with respect to every
/// network parameter. Dropout masks are drawn from `rng` in batch order.
pub fn total_loss<R: Rng + ?Sized>(
    batch: &[VideoSample],
    params: &NetworkParams,
    objective: &Objective,
    rng: &mut R,
) -> Result<(LossBreakdown, GradientBundle)> {
    objective.loss.validate()?;
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let c = params.num_classes();
    let videos = batch
        .iter()
        .map(|s| forward_video(params, s, objective, rng))
        .collect::<Result<Vec<_>>>()?;

    let lambda = objective.loss.lambda;
    let eta = objective.loss.eta;
    let probs: Vec<_> = videos.iter().map(|v| v.probs.clone()).collect();
    let labels: Vec<_> = videos.iter().map(|v| v.labels.clone()).collect();
    let score_maps: Vec<_> = videos.iter().map(|v| v.score_map.clone()).collect();

    let clas = classification_loss(&probs, &labels, objective.loss.background_weight_for(c));
    let reg = reg_variant(&score_maps, &labels, objective.loss.reg_form);
    let any_annotated = videos.iter().any(|v| v.annotation.is_some());
    let loc = if eta > 0.0 && any_annotated {
        let gates: Vec<_> = videos.iter().map(|v| v.gate.clone()).collect();
        let anns: Vec<_> = videos.iter().map(|v| v.annotation.as_ref()).collect();
        Some(localization_loss(&gates, &anns))
    } else {
        None
    };

    let mut breakdown = LossBreakdown {
        clas: clas.value,
        reg: reg.value,
        loc: loc.as_ref().map_or(0.0, |l| l.value),
        total: 0.0,
    };
    breakdown.total = lambda * breakdown.clas + (1.0 - lambda) * breakdown.reg;
    if loc.is_some() {
        breakdown.total += eta * breakdown.loc;
    }

    let mut grads = params.zeros_like();
    for (i, v) in videos.iter().enumerate() {
        let pooled = pool_backward(
            &v.score_map,
            &v.gate,
            objective.loss.aggregator,
            &v.probs,
            clas.d_pooled_scores[i].view(),
            clas.d_pooled_threshold[i],
        );
        let mut d_s = pooled.d_s * lambda;
        d_s.scaled_add(1.0 - lambda, &reg.d_s[i]);
        let mut d_b = pooled.d_b * lambda;
        d_b.scaled_add(1.0 - lambda, &reg.d_b[i]);

        let mut d_g = pooled.d_g * lambda;
        if let Some(Some(d)) = loc.as_ref().map(|l| &l.d_g[i]) {
            d_g.scaled_add(eta, d);
        }
        let kind = objective.gating;
        let d_u = Zip::from(&d_g)
            .and(&v.offsets)
            .map_collect(|&dg, &u| dg * kind.derivative(u));
        d_s += &d_u;
        if objective.threshold == ThresholdSource::Predicted {
            d_b -= &d_u.sum_axis(Axis(1));
        }
        let g = network::backward(params, &v.cache, d_s.view(), d_b.view())?;
        grads.add_scaled(&g, 1.0);
    }
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn gate_of(g: Array2<f64>) -> Gate {
        Gate {
            g,
            kind: GatingKind::Sigmoid,
        }
    }

    #[test]
    fn constant_gate_gives_column_mean() {
        let sm = ScoreMap::new(
            array![[1.0, 4.0], [2.0, -1.0], [6.0, 0.0]],
            Array1::zeros(3),
        );
        let vp = pool_and_classify(
            &sm,
            &gate_of(Array2::from_elem((3, 2), 0.3)),
            Aggregator::Gated,
        );
        assert_relative_eq!(vp.pooled_scores[0], 3.0, max_relative = 1e-7);
        assert_relative_eq!(vp.pooled_scores[1], 1.0, max_relative = 1e-7);
    }

    #[test]
    fn zero_scores_give_uniform_probabilities() {
        let sm = ScoreMap::new(Array2::zeros((4, 3)), Array1::zeros(4));
        let vp = pool_and_classify(
            &sm,
            &gate_of(Array2::from_elem((4, 3), 0.5)),
            Aggregator::Gated,
        );
        for p in vp.probs.iter() {
            assert_relative_eq!(*p, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn binarized_gate_selects_snippet() {
        let sm = ScoreMap::new(array![[2.0], [0.0]], Array1::zeros(2));
        let vp = pool_and_classify(&sm, &gate_of(array![[1.0], [0.0]]), Aggregator::Gated);
        assert_relative_eq!(vp.pooled_scores[0], 2.0, max_relative = 1e-7);
    }

    #[test]
    fn topk_eighth_averages_largest() {
        // T = 9 -> k = 2
        let col: Vec<f64> = vec![0.0, 5.0, 1.0, 3.0, 2.0, -1.0, 0.5, 0.2, 0.1];
        let sm = ScoreMap::new(
            Array2::from_shape_vec((9, 1), col).unwrap(),
            Array1::zeros(9),
        );
        let vp = pool_and_classify(&sm, &gate_of(Array2::zeros((9, 1))), Aggregator::TopkEighth);
        assert_eq!(vp.pooled_scores[0], 4.0);
    }

    #[test]
    fn classification_loss_uniform_one_hot() {
        let vp = VideoProbabilities {
            pooled_scores: array![0.0, 0.0],
            pooled_threshold: 0.0,
            probs: Array1::from_elem(3, 1.0 / 3.0),
        };
        let y = LabelVector::from_labels(&BTreeSet::from([0]), 2);
        let l = classification_loss(&[vp], &[y], 0.5);
        // (1 + 0.5) ln 3
        assert_relative_eq!(l.value, 1.5 * 3f64.ln(), epsilon = 1e-14);
        assert_relative_eq!(l.value, 1.6479184330021643, epsilon = 1e-12);
    }

    #[test]
    fn classification_loss_vanishes_at_confident_truth() {
        let vp = VideoProbabilities {
            pooled_scores: array![40.0, 0.0],
            pooled_threshold: 0.0,
            probs: array![1.0, 0.0, 0.0],
        };
        let y = LabelVector::from_labels(&BTreeSet::from([0]), 2);
        let l = classification_loss(&[vp], &[y], 0.0);
        assert!(l.value < 1e-15);
    }

    #[test]
    fn inner_product_reg_hand_values() {
        let y = LabelVector::from_labels(&BTreeSet::from([0]), 1);
        let sm = ScoreMap::new(array![[1.0], [1.0]], array![1.0, 1.0]);
        let l = threshold_regularization_loss(&[sm], &[y.clone()]);
        assert_relative_eq!(l.value, 2.0, max_relative = 1e-7);

        let sm = ScoreMap::new(array![[2.0], [-3.0]], array![-1.0, 0.5]);
        let l = threshold_regularization_loss(&[sm], &[y]);
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn reg_variant_hand_values() {
        let y = LabelVector::from_labels(&BTreeSet::from([0]), 1);
        let far = ScoreMap::new(array![[0.2], [3.0]], array![-4.0, 1.5]);
        assert_eq!(reg_variant(&[far], &[y.clone()], RegForm::L1).value, 0.0);
        let anti = ScoreMap::new(array![[0.7], [-1.2]], array![-0.7, 1.2]);
        assert_relative_eq!(
            reg_variant(&[anti], &[y.clone()], RegForm::Cosine).value,
            -1.0,
            epsilon = 1e-7
        );
        let same = ScoreMap::new(array![[0.3], [-0.4]], array![0.3, -0.4]);
        assert_eq!(reg_variant(&[same], &[y], RegForm::L2).value, 1.0);
    }

    #[test]
    fn reg_uses_max_over_ground_truth_only() {
        let y = LabelVector::from_labels(&BTreeSet::from([0, 2]), 3);
        let sm = ScoreMap::new(array![[1.0, 9.0, 2.0], [3.0, 9.0, -1.0]], array![0.5, -0.5]);
        let (st, arg) = max_over_labels(&sm, &y);
        assert_eq!(st, array![2.0, 3.0]);
        assert_eq!(arg, vec![2, 0]);
        let l = threshold_regularization_loss(&[sm], &[y]);
        assert_eq!(l.d_s[0][[0, 1]], 0.0);
        assert_eq!(l.d_s[0][[0, 0]], 0.0);
        assert!(l.d_s[0][[0, 2]] != 0.0);
    }

    #[test]
    fn localization_loss_cases() {
        let a = RasterizedAnnotation(array![[1.0, 0.0], [0.0, 0.0]]);
        let exact = gate_of(a.0.clone());
        assert_eq!(localization_loss(&[exact], &[Some(&a)]).value, 0.0);
        let half = gate_of(Array2::from_elem((2, 2), 0.5));
        assert_eq!(localization_loss(&[half.clone()], &[Some(&a)]).value, 0.5);
        let none = localization_loss(&[half], &[None]);
        assert_eq!(none.value, 0.0);
        assert!(none.d_g[0].is_none());
    }

    #[test]
    fn label_vector_normalized() {
        let y = LabelVector::from_labels(&BTreeSet::from([1, 3]), 4);
        assert_eq!(y.0, array![0.0, 0.5, 0.0, 0.5]);
        assert_eq!(y.classes().collect::<Vec<_>>(), vec![1, 3]);
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            lambda: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            background_weight: Some(0.0),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(LossConfig::default().background_weight_for(20), 0.05);
    }
}
