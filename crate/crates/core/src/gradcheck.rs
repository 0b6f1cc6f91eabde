//! Central finite-difference verification of every analytic gradient.
//!
//! Each check evaluates the scalar at `x +/- h` per coordinate and compares
//! `(f(x + h) - f(x - h)) / 2h` with the analytic value using
//! `|a - n| / max(|a|, |n|, ERROR_FLOOR)`. The floor keeps coordinates whose
//! true gradient is essentially zero from being judged on round-off alone.
//! Random instances are resampled until every relu, hinge, argmax and top-k
//! boundary sits at least [`KINK_MARGIN`] away, so the probes never straddle
//! a kink.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{GroundTruthSegment, RasterizedAnnotation, VideoSample};
use crate::network::{
    self, Gate, GatingKind, GradientBundle, NetworkParams, ScoreMap, PARAM_NAMES,
};
use crate::objectives::{
    self, classification_loss, forward_video, localization_loss, pool_and_classify, pool_backward,
    reg_variant, total_loss, Aggregator, LabelVector, LossConfig, Objective, RegForm,
    ThresholdSource, VideoProbabilities,
};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
pub const ERROR_FLOOR: f64 = 1e-4;
pub const KINK_MARGIN: f64 = 1e-3;
const MAX_RESAMPLES: usize = 500;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

/// Largest relative error per parameter tensor, in [`PARAM_NAMES`] order.
pub fn check_params(
    params: &NetworkParams,
    analytic: &GradientBundle,
    mut loss: impl FnMut(&NetworkParams) -> f64,
) -> [f64; 6] {
    let mut probe = params.clone();
    let mut worst = [0.0; 6];
    for (k, grad) in analytic.tensors().iter().enumerate() {
        for i in 0..grad.len() {
            let orig = probe.tensors()[k][i];
            let numeric = central_difference(
                |x| {
                    probe.tensors_mut()[k][i] = x;
                    loss(&probe)
                },
                orig,
            );
            probe.tensors_mut()[k][i] = orig;
            worst[k] = f64::max(worst[k], relative_error(grad[i], numeric));
        }
    }
    worst
}

fn max_of(values: &[f64]) -> f64 {
    values.iter().cloned().fold(0.0, f64::max)
}

/// A tiny random problem: parameters, a batch, and the seed that fixes the
/// dropout masks.
#[derive(Debug, Clone)]
pub struct Instance {
    pub params: NetworkParams,
    pub batch: Vec<VideoSample>,
    pub mask_seed: u64,
}

impl Instance {
    pub fn loss(&self, params: &NetworkParams, objective: &Objective) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.mask_seed);
        total_loss(&self.batch, params, objective, &mut rng)
            .expect("instance is well formed")
            .0
            .total
    }

    pub fn gradients(&self, objective: &Objective) -> GradientBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(self.mask_seed);
        total_loss(&self.batch, &self.params, objective, &mut rng)
            .expect("instance is well formed")
            .1
    }
}

fn random_sample<R: Rng>(
    rng: &mut R,
    id: usize,
    t: usize,
    d: usize,
    c: usize,
    annotated: bool,
) -> VideoSample {
    let features = Array2::from_shape_simple_fn((t, d), || rng.random_range(-1.5..1.5));
    let mut labels = BTreeSet::from([rng.random_range(0..c)]);
    if c > 1 && rng.random_bool(0.4) {
        labels.insert(rng.random_range(0..c));
    }
    let tau = 1.0;
    let segments = labels
        .iter()
        .map(|&cls| {
            let a = rng.random_range(0..t);
            let b = rng.random_range(a..t);
            GroundTruthSegment::new(cls, a as f64 * tau, (b + 1) as f64 * tau)
        })
        .collect();
    VideoSample {
        id: format!("g{id}"),
        features,
        labels,
        segments: Some(segments),
        snippet_duration: tau,
        fully_annotated: annotated,
    }
}

/// Smallest distance from any non-differentiable point of the objective.
fn kink_distance(instance: &Instance, objective: &Objective) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(instance.mask_seed);
    let mut margin = f64::INFINITY;
    for sample in &instance.batch {
        let v = forward_video(&instance.params, sample, objective, &mut rng).expect("well formed");
        let (z1, z2) = network::cached_preactivations(v.cache());
        for z in z1.iter().chain(z2.iter()) {
            margin = margin.min(z.abs());
        }
        let classes: Vec<usize> = v.labels.classes().collect();
        let sm = &v.score_map;
        for t in 0..sm.num_snippets() {
            let mut col: Vec<f64> = classes.iter().map(|&c| sm.s[[t, c]]).collect();
            col.sort_by(|a, b| b.total_cmp(a));
            if col.len() > 1 {
                margin = margin.min(col[0] - col[1]);
            }
            let st = col[0];
            let b = sm.b[t];
            let d = st - b;
            margin = margin.min(match objective.loss.reg_form {
                RegForm::InnerProduct => (st * b + 1.0).abs(),
                RegForm::L1 => (d.abs() - 1.0).abs().min(d.abs()),
                RegForm::L2 => (d.abs() - 1.0).abs(),
                RegForm::Cosine => f64::INFINITY,
            });
        }
        if objective.loss.aggregator == Aggregator::TopkEighth {
            let t = sm.num_snippets();
            let k = t.div_ceil(8);
            if k < t {
                for c in 0..sm.num_classes() {
                    let mut col = sm.s.column(c).to_vec();
                    col.sort_by(|a, b| b.total_cmp(a));
                    margin = margin.min(col[k - 1] - col[k]);
                }
            }
        }
        if !objective.gating.is_exact() {
            // the step itself; |g - a| is then 0 or 1 and flat
            for x in sm.offsets().iter() {
                margin = margin.min(x.abs());
            }
        } else if let Some(a) = &v.annotation {
            for (g, a) in v.gate.g.iter().zip(a.0.iter()) {
                margin = margin.min((g - a).abs());
            }
        }
    }
    margin
}

/// Draws a random instance (`T <= 5, D <= 3, C <= 3, H <= 4`, three videos)
/// that is at least [`KINK_MARGIN`] from every kink of `objective`.
pub fn random_instance(seed: u64, localization: bool, objective: &Objective) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_RESAMPLES {
        let t_max = rng.random_range(3..=5);
        let d = rng.random_range(2..=3);
        let c = rng.random_range(2..=3);
        let h = rng.random_range(3..=4);
        let mut params = NetworkParams::init(&mut rng, d, h, c);
        for tensor in params.tensors_mut() {
            for v in tensor.iter_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        let batch = (0..3)
            .map(|i| {
                let t = rng.random_range(1..=t_max).max(2);
                random_sample(&mut rng, i, t, d, c, localization && i != 1)
            })
            .collect();
        let instance = Instance {
            params,
            batch,
            mask_seed: rng.random(),
        };
        if kink_distance(&instance, objective) >= KINK_MARGIN {
            return instance;
        }
    }
    panic!("no kink-free instance found for seed {seed}");
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseResult {
    pub gating: GatingKind,
    pub aggregator: Aggregator,
    pub reg_form: RegForm,
    pub localization: bool,
    /// Per parameter tensor, [`PARAM_NAMES`] order.
    pub tensor_errors: [f64; 6],
    pub max_error: f64,
    /// `false` for the straight-through gate, whose backward is a surrogate.
    pub strict: bool,
    pub passed: bool,
}

impl CaseResult {
    pub fn label(&self) -> String {
        format!(
            "{}/{}/{}/{}",
            self.gating.name(),
            self.aggregator.name(),
            self.reg_form.name(),
            if self.localization { "loc" } else { "noloc" }
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ComponentResult {
    pub component: String,
    pub max_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub components: Vec<ComponentResult>,
    pub cases: Vec<CaseResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.passed) && self.cases.iter().all(|c| !c.strict || c.passed)
    }
}

pub fn objective_for(
    gating: GatingKind,
    aggregator: Aggregator,
    reg_form: RegForm,
    localization: bool,
) -> Objective {
    Objective {
        loss: LossConfig {
            lambda: 0.4,
            eta: if localization { 3.0 } else { 0.0 },
            background_weight: None,
            reg_form,
            aggregator,
        },
        gating,
        threshold: ThresholdSource::Predicted,
        dropout: 0.5,
    }
}

/// Checks the total objective for one combination; `tamper` may corrupt the
/// analytic gradient (negative controls).
pub fn check_case(
    seed: u64,
    gating: GatingKind,
    aggregator: Aggregator,
    reg_form: RegForm,
    localization: bool,
    tamper: impl FnOnce(&mut GradientBundle),
) -> CaseResult {
    let objective = objective_for(gating, aggregator, reg_form, localization);
    let instance = random_instance(seed, localization, &objective);
    let mut analytic = instance.gradients(&objective);
    tamper(&mut analytic);
    let tensor_errors = check_params(&instance.params, &analytic, |p| {
        instance.loss(p, &objective)
    });
    let max_error = max_of(&tensor_errors);
    CaseResult {
        gating,
        aggregator,
        reg_form,
        localization,
        tensor_errors,
        max_error,
        strict: gating.is_exact(),
        passed: max_error <= TOLERANCE,
    }
}

fn component(name: &str, errors: impl IntoIterator<Item = f64>) -> ComponentResult {
    let max_error = errors.into_iter().fold(0.0, f64::max);
    ComponentResult {
        component: name.to_string(),
        max_error,
        passed: max_error <= TOLERANCE,
    }
}

fn random_score_map<R: Rng>(rng: &mut R, t: usize, c: usize) -> ScoreMap {
    ScoreMap::new(
        Array2::from_shape_simple_fn((t, c), || rng.random_range(-2.0..2.0)),
        Array1::from_shape_simple_fn(t, || rng.random_range(-2.0..2.0)),
    )
}

fn check_gate(kind: GatingKind) -> ComponentResult {
    let mut errs = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..50 {
        let x: f64 = rng.random_range(-4.0..4.0);
        if x.abs() < KINK_MARGIN {
            continue;
        }
        errs.push(relative_error(
            kind.derivative(x),
            central_difference(|x| kind.value(x), x),
        ));
    }
    component(&format!("gate/{}", kind.name()), errs)
}

/// Gradient of `<w, p>` through pooling and softmax for a random score map.
fn check_pooling(aggregator: Aggregator, seed: u64) -> ComponentResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errs = Vec::new();
    for _ in 0..20 {
        let t = rng.random_range(2..=9);
        let c = rng.random_range(1..=3);
        let sm = random_score_map(&mut rng, t, c);
        let kind = GatingKind::Sigmoid;
        let w_s = Array1::from_shape_simple_fn(c, || rng.random_range(-1.0..1.0));
        let w_b: f64 = rng.random_range(-1.0..1.0);
        let objective = |sm: &ScoreMap| -> f64 {
            let g = network::apply_gate(sm, kind);
            let p = pool_and_classify(sm, &g, aggregator);
            p.pooled_scores.dot(&w_s) + w_b * p.pooled_threshold
        };
        let gate = network::apply_gate(&sm, kind);
        let probs = pool_and_classify(&sm, &gate, aggregator);
        let pg = pool_backward(&sm, &gate, aggregator, &probs, w_s.view(), w_b);
        let offsets = sm.offsets();
        let mut d_s = pg.d_s.clone();
        let mut d_b = pg.d_b.clone();
        for ((ti, ci), &dg) in pg.d_g.indexed_iter() {
            let du = dg * kind.derivative(offsets[[ti, ci]]);
            d_s[[ti, ci]] += du;
            d_b[ti] -= du;
        }
        let mut probe = sm.clone();
        for ti in 0..t {
            for ci in 0..c {
                let orig = probe.s[[ti, ci]];
                probe.s[[ti, ci]] = orig + FD_STEP;
                let plus = objective(&probe);
                probe.s[[ti, ci]] = orig - FD_STEP;
                let minus = objective(&probe);
                probe.s[[ti, ci]] = orig;
                errs.push(relative_error(
                    d_s[[ti, ci]],
                    (plus - minus) / (2.0 * FD_STEP),
                ));
            }
            let orig = probe.b[ti];
            probe.b[ti] = orig + FD_STEP;
            let plus = objective(&probe);
            probe.b[ti] = orig - FD_STEP;
            let minus = objective(&probe);
            probe.b[ti] = orig;
            errs.push(relative_error(d_b[ti], (plus - minus) / (2.0 * FD_STEP)));
        }
    }
    component(&format!("pooling/{}", aggregator.name()), errs)
}

fn check_classification() -> ComponentResult {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut errs = Vec::new();
    for _ in 0..20 {
        let c = rng.random_range(1..=4);
        let b = rng.random_range(1..=3);
        let mut pooled: Vec<(Array1<f64>, f64)> = (0..b)
            .map(|_| {
                (
                    Array1::from_shape_simple_fn(c, || rng.random_range(-3.0..3.0)),
                    rng.random_range(-3.0..3.0),
                )
            })
            .collect();
        let labels: Vec<LabelVector> = (0..b)
            .map(|_| LabelVector::from_labels(&BTreeSet::from([rng.random_range(0..c)]), c))
            .collect();
        let w_b = rng.random_range(0.05..1.0);
        let eval = |pooled: &[(Array1<f64>, f64)]| {
            let probs: Vec<VideoProbabilities> =
                pooled.iter().map(|(s, b)| probs_from(s, *b)).collect();
            classification_loss(&probs, &labels, w_b)
        };
        let analytic = eval(&pooled);
        for i in 0..b {
            for ci in 0..c {
                let n = {
                    let orig = pooled[i].0[ci];
                    pooled[i].0[ci] = orig + FD_STEP;
                    let plus = eval(&pooled).value;
                    pooled[i].0[ci] = orig - FD_STEP;
                    let minus = eval(&pooled).value;
                    pooled[i].0[ci] = orig;
                    (plus - minus) / (2.0 * FD_STEP)
                };
                errs.push(relative_error(analytic.d_pooled_scores[i][ci], n));
            }
            let orig = pooled[i].1;
            pooled[i].1 = orig + FD_STEP;
            let plus = eval(&pooled).value;
            pooled[i].1 = orig - FD_STEP;
            let minus = eval(&pooled).value;
            pooled[i].1 = orig;
            errs.push(relative_error(
                analytic.d_pooled_threshold[i],
                (plus - minus) / (2.0 * FD_STEP),
            ));
        }
    }
    component("L_clas", errs)
}

fn probs_from(scores: &Array1<f64>, threshold: f64) -> VideoProbabilities {
    let c = scores.len();
    let mut z = Array1::zeros(c + 1);
    z.slice_mut(ndarray::s![..c]).assign(scores);
    z[c] = threshold;
    VideoProbabilities {
        pooled_scores: scores.clone(),
        pooled_threshold: threshold,
        probs: objectives::log_softmax(z.view()).mapv(f64::exp),
    }
}

fn check_regularizer(form: RegForm) -> ComponentResult {
    let mut rng = ChaCha8Rng::seed_from_u64(29 + form as u64);
    let mut errs = Vec::new();
    let mut done = 0;
    while done < 20 {
        let t = rng.random_range(2..=5);
        let c = rng.random_range(1..=3);
        let b = rng.random_range(1..=2);
        let mut maps: Vec<ScoreMap> = (0..b).map(|_| random_score_map(&mut rng, t, c)).collect();
        let labels: Vec<LabelVector> = (0..b)
            .map(|_| {
                let mut set = BTreeSet::from([rng.random_range(0..c)]);
                set.insert(rng.random_range(0..c));
                LabelVector::from_labels(&set, c)
            })
            .collect();
        let near_kink = maps.iter().zip(&labels).any(|(sm, y)| {
            let (st, _) = objectives::max_over_labels(sm, y);
            let classes: Vec<usize> = y.classes().collect();
            (0..t).any(|ti| {
                let d = st[ti] - sm.b[ti];
                let tie = classes
                    .iter()
                    .filter(|&&cc| sm.s[[ti, cc]] != st[ti])
                    .any(|&cc| (st[ti] - sm.s[[ti, cc]]).abs() < KINK_MARGIN);
                tie || match form {
                    RegForm::InnerProduct => (st[ti] * sm.b[ti] + 1.0).abs() < KINK_MARGIN,
                    RegForm::L1 => (d.abs() - 1.0).abs() < KINK_MARGIN || d.abs() < KINK_MARGIN,
                    RegForm::L2 => (d.abs() - 1.0).abs() < KINK_MARGIN,
                    RegForm::Cosine => false,
                }
            })
        });
        if near_kink {
            continue;
        }
        done += 1;
        let analytic = reg_variant(&maps, &labels, form);
        for i in 0..b {
            for ti in 0..t {
                for ci in 0..c {
                    let orig = maps[i].s[[ti, ci]];
                    maps[i].s[[ti, ci]] = orig + FD_STEP;
                    let plus = reg_variant(&maps, &labels, form).value;
                    maps[i].s[[ti, ci]] = orig - FD_STEP;
                    let minus = reg_variant(&maps, &labels, form).value;
                    maps[i].s[[ti, ci]] = orig;
                    errs.push(relative_error(
                        analytic.d_s[i][[ti, ci]],
                        (plus - minus) / (2.0 * FD_STEP),
                    ));
                }
                let orig = maps[i].b[ti];
                maps[i].b[ti] = orig + FD_STEP;
                let plus = reg_variant(&maps, &labels, form).value;
                maps[i].b[ti] = orig - FD_STEP;
                let minus = reg_variant(&maps, &labels, form).value;
                maps[i].b[ti] = orig;
                errs.push(relative_error(
                    analytic.d_b[i][ti],
                    (plus - minus) / (2.0 * FD_STEP),
                ));
            }
        }
    }
    component(&format!("L_reg/{}", form.name()), errs)
}

fn check_localization() -> ComponentResult {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut errs = Vec::new();
    for _ in 0..20 {
        let t = rng.random_range(1..=5);
        let c = rng.random_range(1..=3);
        let mut gates: Vec<Gate> = (0..3)
            .map(|_| Gate {
                g: Array2::from_shape_simple_fn((t, c), || rng.random_range(0.01..0.99)),
                kind: GatingKind::Sigmoid,
            })
            .collect();
        let anns: Vec<Option<RasterizedAnnotation>> = (0..3)
            .map(|i| {
                (i != 1).then(|| {
                    RasterizedAnnotation(Array2::from_shape_simple_fn((t, c), || {
                        if rng.random_bool(0.5) {
                            1.0
                        } else {
                            0.0
                        }
                    }))
                })
            })
            .collect();
        let refs: Vec<Option<&RasterizedAnnotation>> = anns.iter().map(|a| a.as_ref()).collect();
        let analytic = localization_loss(&gates, &refs);
        for i in 0..3 {
            for ti in 0..t {
                for ci in 0..c {
                    let orig = gates[i].g[[ti, ci]];
                    gates[i].g[[ti, ci]] = orig + FD_STEP;
                    let plus = localization_loss(&gates, &refs).value;
                    gates[i].g[[ti, ci]] = orig - FD_STEP;
                    let minus = localization_loss(&gates, &refs).value;
                    gates[i].g[[ti, ci]] = orig;
                    let a = analytic.d_g[i].as_ref().map_or(0.0, |d| d[[ti, ci]]);
                    errs.push(relative_error(a, (plus - minus) / (2.0 * FD_STEP)));
                }
            }
        }
    }
    component("L_loc", errs)
}

/// Network backward against a random linear functional of the outputs.
fn check_network(seed: u64) -> ComponentResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errs = Vec::new();
    let mut done = 0;
    while done < 5 {
        let (t, d, h, c) = (3, 2, 4, 2);
        let mut params = NetworkParams::init(&mut rng, d, h, c);
        for tensor in params.tensors_mut() {
            for v in tensor.iter_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        let x = Array2::from_shape_simple_fn((t, d), || rng.random_range(-1.5..1.5));
        let mask = network::DropoutMask::sample(&mut rng, t, h, 0.5);
        let (_, cache) = network::forward(&params, x.view(), Some(&mask)).unwrap();
        let (z1, z2) = network::cached_preactivations(&cache);
        if z1.iter().chain(z2.iter()).any(|z| z.abs() < KINK_MARGIN) {
            continue;
        }
        done += 1;
        let w_s = Array2::from_shape_simple_fn((t, c), || rng.random_range(-1.0..1.0));
        let w_b = Array1::from_shape_simple_fn(t, || rng.random_range(-1.0..1.0));
        let analytic = network::backward(&params, &cache, w_s.view(), w_b.view()).unwrap();
        let errors = check_params(&params, &analytic, |p| {
            let (sm, _) = network::forward(p, x.view(), Some(&mask)).unwrap();
            (&sm.s * &w_s).sum() + sm.b.dot(&w_b)
        });
        errs.extend(errors);
    }
    component("network", errs)
}

/// Every component check, then the total objective over
/// `{sigmoid, softsign, binarize} x {gated, topk_eighth} x {4 reg forms} x {L_loc on, off}`.
/// Binarize cases are reported but not held to the tolerance.
pub fn run_suite(seed: u64) -> GradcheckReport {
    let mut components = vec![
        check_gate(GatingKind::Sigmoid),
        check_gate(GatingKind::Softsign),
        check_pooling(Aggregator::Gated, seed ^ 0x11),
        check_pooling(Aggregator::TopkEighth, seed ^ 0x12),
        check_classification(),
    ];
    components.extend(RegForm::ALL.map(check_regularizer));
    components.push(check_localization());
    components.push(check_network(seed ^ 0x13));

    let mut cases = Vec::new();
    let mut case_seed = seed;
    for gating in GatingKind::ALL {
        for aggregator in Aggregator::ALL {
            for reg_form in RegForm::ALL {
                for localization in [false, true] {
                    case_seed = case_seed.wrapping_add(1);
                    cases.push(check_case(
                        case_seed,
                        gating,
                        aggregator,
                        reg_form,
                        localization,
                        |_| {},
                    ));
                }
            }
        }
    }
    GradcheckReport { components, cases }
}

pub fn tensor_name(index: usize) -> &'static str {
    PARAM_NAMES[index]
}
