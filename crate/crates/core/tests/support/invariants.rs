//! Randomized invariant checks shared by the property tests and the
//! acceptance harness. Each check runs `cases` trials from a fixed seed.

use std::cell::Cell;
use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Axis};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttcloc::data::RasterizedAnnotation;
use ttcloc::network::{apply_gate, Gate, GatingKind, ScoreMap};
use ttcloc::objectives::{
    classification_loss, localization_loss, pool_and_classify, reg_variant, Aggregator,
    LabelVector, RegForm, STABILIZER,
};
use ttcloc::trainer::{adam_update, TrainState};
use ttcloc::TrainConfig;

pub type Check = fn(u32) -> Result<(), String>;

pub const ALL: [(&str, Check); 6] = [
    ("gate shift invariance", gate_shift),
    ("softmax normalization", softmax_normalization),
    ("L_clas/L_loc shift invariance, L_reg witness", loss_shift),
    ("class-permutation equivariance", class_permutation),
    ("gate range bounds", gate_range),
    ("Adam step bound", adam_bound),
];

fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn run(cases: u32, test: impl Fn(u64) -> Result<(), TestCaseError>) -> Result<(), String> {
    runner(cases)
        .run(&any::<u64>(), |seed| test(seed))
        .map_err(|e| e.to_string())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

/// A random problem: one or more score maps with labels and annotations.
pub struct Instance {
    pub maps: Vec<ScoreMap>,
    pub labels: Vec<LabelVector>,
    pub label_sets: Vec<BTreeSet<usize>>,
    pub annotations: Vec<Option<RasterizedAnnotation>>,
    pub num_classes: usize,
}

pub fn instance(seed: u64, scale: f64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.random_range(1..=5);
    let b = rng.random_range(1..=4);
    let mut inst = Instance {
        maps: Vec::new(),
        labels: Vec::new(),
        label_sets: Vec::new(),
        annotations: Vec::new(),
        num_classes: c,
    };
    for _ in 0..b {
        let t = rng.random_range(1..=24);
        inst.maps.push(ScoreMap::new(
            Array2::from_shape_simple_fn((t, c), || rng.random_range(-scale..scale)),
            Array1::from_shape_simple_fn(t, || rng.random_range(-scale..scale)),
        ));
        let mut set = BTreeSet::from([rng.random_range(0..c)]);
        if rng.random_bool(0.3) {
            set.insert(rng.random_range(0..c));
        }
        inst.labels.push(LabelVector::from_labels(&set, c));
        inst.label_sets.push(set);
        inst.annotations.push(rng.random_bool(0.5).then(|| {
            RasterizedAnnotation(Array2::from_shape_simple_fn((t, c), || {
                if rng.random_bool(0.3) {
                    1.0
                } else {
                    0.0
                }
            }))
        }));
    }
    inst
}

/// Loss values of an instance under one gating kind and aggregator.
pub fn losses(inst: &Instance, kind: GatingKind, aggregator: Aggregator) -> (f64, [f64; 4], f64) {
    let gates: Vec<Gate> = inst.maps.iter().map(|m| apply_gate(m, kind)).collect();
    let probs: Vec<_> = inst
        .maps
        .iter()
        .zip(&gates)
        .map(|(m, g)| pool_and_classify(m, g, aggregator))
        .collect();
    let w_b = 1.0 / inst.num_classes as f64;
    let clas = classification_loss(&probs, &inst.labels, w_b).value;
    let reg = RegForm::ALL.map(|f| reg_variant(&inst.maps, &inst.labels, f).value);
    let anns: Vec<Option<&RasterizedAnnotation>> =
        inst.annotations.iter().map(|a| a.as_ref()).collect();
    let loc = localization_loss(&gates, &anns).value;
    (clas, reg, loc)
}

fn shifted(m: &ScoreMap, delta: f64) -> ScoreMap {
    ScoreMap::new(m.s.mapv(|v| v + delta), m.b.mapv(|v| v + delta))
}

pub fn gate_shift(cases: u32) -> Result<(), String> {
    run(cases, |seed| {
        let inst = instance(seed, 20.0);
        let delta = ChaCha8Rng::seed_from_u64(!seed).random_range(-50.0..50.0);
        for m in &inst.maps {
            let moved = shifted(m, delta);
            for kind in GatingKind::ALL {
                let (g0, g1) = (apply_gate(m, kind), apply_gate(&moved, kind));
                for ((x, a), b) in m.offsets().iter().zip(&g0.g).zip(&g1.g) {
                    // the step of the binary gate is only defined away from 0
                    if kind == GatingKind::Binarize && x.abs() < 1e-9 {
                        continue;
                    }
                    prop_assert!(
                        close(*a, *b, 1e-12),
                        "{kind}: {a} vs {b} after shift {delta}"
                    );
                }
            }
        }
        Ok(())
    })
}

pub fn softmax_normalization(cases: u32) -> Result<(), String> {
    run(cases, |seed| {
        // logit gaps past ~37 round the largest probability to exactly 1
        let inst = instance(seed, 15.0);
        for m in &inst.maps {
            for kind in GatingKind::ALL {
                for agg in Aggregator::ALL {
                    let p = pool_and_classify(m, &apply_gate(m, kind), agg).probs;
                    prop_assert!((p.sum() - 1.0).abs() <= 1e-12, "sum {}", p.sum());
                    prop_assert!(p.iter().all(|&v| v > 0.0 && v < 1.0), "{p:?}");
                }
            }
        }
        Ok(())
    })
}

/// Largest change of a gated pooled score under a shift by `delta`. The
/// stabilizer in the denominator makes the pooled score move by
/// `delta * sum(g) / (sum(g) + eps)` instead of exactly `delta`.
fn stabilizer_shift(inst: &Instance, kind: GatingKind, delta: f64) -> f64 {
    inst.maps
        .iter()
        .flat_map(|m| {
            let g = apply_gate(m, kind).g;
            g.sum_axis(Axis(0)).to_vec()
        })
        .map(|mass| delta.abs() * STABILIZER / (mass + STABILIZER))
        .fold(0.0, f64::max)
}

pub fn loss_shift(cases: u32) -> Result<(), String> {
    let reg_changed = Cell::new(0usize);
    let result = run(cases, |seed| {
        let inst = instance(seed, 5.0);
        let delta = ChaCha8Rng::seed_from_u64(!seed).random_range(-10.0..10.0);
        let moved = Instance {
            maps: inst.maps.iter().map(|m| shifted(m, delta)).collect(),
            labels: inst.labels.clone(),
            label_sets: inst.label_sets.clone(),
            annotations: inst.annotations.clone(),
            num_classes: inst.num_classes,
        };
        for kind in [GatingKind::Sigmoid, GatingKind::Softsign] {
            for agg in Aggregator::ALL {
                let (c0, r0, l0) = losses(&inst, kind, agg);
                let (c1, r1, l1) = losses(&moved, kind, agg);
                let slack = match agg {
                    Aggregator::Gated => 4.0 * stabilizer_shift(&inst, kind, delta),
                    Aggregator::TopkEighth => 0.0,
                };
                prop_assert!(
                    (c0 - c1).abs() <= slack + 1e-9 * (1.0 + c0.abs()),
                    "L_clas {c0} vs {c1} (slack {slack})"
                );
                prop_assert!(close(l0, l1, 1e-9), "L_loc {l0} vs {l1}");
                if !close(r0[0], r1[0], 1e-9) {
                    reg_changed.set(reg_changed.get() + 1);
                }
            }
        }
        Ok(())
    });
    result?;
    // fixed witness: s~ = b = (1, 1) gives 4 / 2; after +1 it is 10 / 8
    let y = LabelVector::from_labels(&BTreeSet::from([0]), 1);
    let m = ScoreMap::new(Array2::ones((2, 1)), Array1::ones(2));
    let before = reg_variant(&[m.clone()], &[y.clone()], RegForm::InnerProduct).value;
    let after = reg_variant(&[shifted(&m, 1.0)], &[y], RegForm::InnerProduct).value;
    if !(close(before, 2.0, 1e-6) && close(after, 1.25, 1e-6)) || reg_changed.get() == 0 {
        return Err(format!(
            "L_reg did not change under shift ({before} -> {after}, {} random changes)",
            reg_changed.get()
        ));
    }
    Ok(())
}

pub fn class_permutation(cases: u32) -> Result<(), String> {
    run(cases, |seed| {
        let inst = instance(seed, 5.0);
        let c = inst.num_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(!seed);
        let mut perm: Vec<usize> = (0..c).collect();
        for i in (1..c).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        // new column perm[j] holds old column j
        let permute = |a: &Array2<f64>| {
            let mut out = Array2::zeros(a.dim());
            for j in 0..c {
                out.column_mut(perm[j]).assign(&a.column(j));
            }
            out
        };
        let label_sets: Vec<BTreeSet<usize>> = inst
            .label_sets
            .iter()
            .map(|s| s.iter().map(|&j| perm[j]).collect())
            .collect();
        let moved = Instance {
            maps: inst
                .maps
                .iter()
                .map(|m| ScoreMap::new(permute(&m.s), m.b.clone()))
                .collect(),
            labels: label_sets
                .iter()
                .map(|s| LabelVector::from_labels(s, c))
                .collect(),
            label_sets,
            annotations: inst
                .annotations
                .iter()
                .map(|a| a.as_ref().map(|a| RasterizedAnnotation(permute(&a.0))))
                .collect(),
            num_classes: c,
        };
        for kind in GatingKind::ALL {
            for agg in Aggregator::ALL {
                let (c0, r0, l0) = losses(&inst, kind, agg);
                let (c1, r1, l1) = losses(&moved, kind, agg);
                prop_assert!(close(c0, c1, 1e-12), "L_clas {c0} vs {c1}");
                prop_assert!(close(l0, l1, 1e-12), "L_loc {l0} vs {l1}");
                for (a, b) in r0.iter().zip(&r1) {
                    prop_assert!(close(*a, *b, 1e-12), "L_reg {a} vs {b}");
                }
            }
        }
        Ok(())
    })
}

/// Saturation starts near |x| = 37 for the sigmoid in double precision;
/// below this the open interval is representable.
pub const OPEN_RANGE: f64 = 30.0;

pub fn gate_range(cases: u32) -> Result<(), String> {
    run(cases, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..64 {
            let x: f64 = if rng.random_bool(0.5) {
                rng.random_range(-OPEN_RANGE..OPEN_RANGE)
            } else {
                rng.random_range(-1.0..1.0) * 10f64.powi(rng.random_range(-300..300))
            };
            for kind in GatingKind::ALL {
                let g = kind.value(x);
                match kind {
                    GatingKind::Binarize => prop_assert!(g == 0.0 || g == 1.0, "{kind}({x}) = {g}"),
                    _ if x.abs() <= OPEN_RANGE => {
                        prop_assert!(g > 0.0 && g < 1.0, "{kind}({x}) = {g}")
                    }
                    _ => prop_assert!((0.0..=1.0).contains(&g), "{kind}({x}) = {g}"),
                }
            }
        }
        Ok(())
    })
}

pub fn adam_bound(cases: u32) -> Result<(), String> {
    run(cases, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = TrainConfig {
            hidden_dim: 2,
            learning_rate: 10f64.powi(rng.random_range(-5..=-1)),
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(&config, 2, 2);
        let bound = config.learning_rate / (1.0 - config.beta1);
        let steps = rng.random_range(1..=60);
        for _ in 0..steps {
            let mut g = state.params.zeros_like();
            for tensor in g.tensors_mut() {
                for v in tensor.iter_mut() {
                    *v = match rng.random_range(0..4) {
                        0 => 0.0,
                        1 => rng.random_range(-1.0..1.0) * 10f64.powi(rng.random_range(-8..=8)),
                        _ => rng.random_range(-1.0..1.0),
                    };
                }
            }
            let before = state.params.clone();
            adam_update(&mut state, &g, &config);
            for (a, b) in state.params.tensors().iter().zip(before.tensors().iter()) {
                for (x, y) in a.iter().zip(b.iter()) {
                    prop_assert!(
                        (x - y).abs() <= bound * (1.0 + 1e-12),
                        "step {} > {bound}",
                        (x - y).abs()
                    );
                }
            }
        }
        Ok(())
    })
}
