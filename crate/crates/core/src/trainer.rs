//! Adam training loop over the full objective.

use log::{debug, warn};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{crop_clip, VideoSample};
use crate::error::{Error, Result};
use crate::network::{GatingKind, GradientBundle, NetworkParams, DEFAULT_HIDDEN_DIM};
use crate::objectives::{total_loss, LossBreakdown, LossConfig, Objective, ThresholdSource};

/// How much temporal supervision the training set carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Supervision {
    /// Video-level labels only.
    #[default]
    Weak,
    /// The first `k` annotated videos of every class keep their boundaries.
    Semi { k: usize },
    /// Every video with segments is fully annotated.
    Full,
}

impl Supervision {
    pub fn name(self) -> String {
        match self {
            Supervision::Weak => "weak".into(),
            Supervision::Semi { k } => format!("semi({k})"),
            Supervision::Full => "full".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// One loop over mixed batches; the localization loss sees whichever
    /// annotated videos land in a batch.
    #[default]
    Joint,
    FullyAnnotatedOnly,
    /// First half of the budget without localization loss on all videos,
    /// second half with the full objective on annotated videos only.
    PretrainFinetune,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [
        Strategy::Joint,
        Strategy::FullyAnnotatedOnly,
        Strategy::PretrainFinetune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Joint => "joint",
            Strategy::FullyAnnotatedOnly => "fully_annotated_only",
            Strategy::PretrainFinetune => "pretrain_finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub max_clip_len: usize,
    pub iterations: usize,
    pub seed: u64,
    pub hidden_dim: usize,
    /// Drop probability before the output layer.
    pub dropout: f64,
    pub loss: LossConfig,
    pub gating: GatingKind,
    pub supervision: Supervision,
    pub strategy: Strategy,
    /// Threshold used by the training-time gate.
    pub train_localization: ThresholdSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 10,
            max_clip_len: 320,
            iterations: 2000,
            seed: 0,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            dropout: 0.7,
            loss: LossConfig::default(),
            gating: GatingKind::Sigmoid,
            supervision: Supervision::Weak,
            strategy: Strategy::Joint,
            train_localization: ThresholdSource::Predicted,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {} must be > 0", self.learning_rate));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_epsilon > 0.0) {
            return fail("adam_epsilon must be > 0".into());
        }
        if self.batch_size == 0 || self.max_clip_len == 0 || self.hidden_dim == 0 {
            return fail("batch_size, max_clip_len and hidden_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        self.loss.validate()
    }

    fn objective(&self) -> Objective {
        Objective {
            loss: self.loss,
            gating: self.gating,
            threshold: self.train_localization,
            dropout: self.dropout,
        }
    }
}

/// Parameters, Adam moments, step counter and the random stream that drives
/// batch sampling, cropping and dropout.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: NetworkParams,
    pub first_moment: NetworkParams,
    pub second_moment: NetworkParams,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: &TrainConfig, input_dim: usize, num_classes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = NetworkParams::init(&mut rng, input_dim, config.hidden_dim, num_classes);
        Self::from_params(params, rng)
    }

    pub fn from_params(params: NetworkParams, rng: ChaCha8Rng) -> Self {
        TrainState {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            params,
            step: 0,
            rng,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_update(state: &mut TrainState, grads: &GradientBundle, config: &TrainConfig) {
    state.step += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let step = state.step as i32;
    let c1 = 1.0 - b1.powi(step);
    let c2 = 1.0 - b2.powi(step);
    let lr = config.learning_rate;
    let eps = config.adam_epsilon;
    let params = state.params.tensors_mut();
    let m = state.first_moment.tensors_mut();
    let v = state.second_moment.tensors_mut();
    for (((p, m), v), g) in params.into_iter().zip(m).zip(v).zip(grads.tensors()) {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Flags the first `k` videos (manifest order) of every class that carry
/// segment annotations; all other flags are cleared.
pub fn select_semi_subset(
    samples: &[VideoSample],
    num_classes: usize,
    k: usize,
) -> Vec<VideoSample> {
    let mut out: Vec<VideoSample> = samples.to_vec();
    for s in &mut out {
        s.fully_annotated = false;
    }
    for class in 0..num_classes {
        let mut taken = 0;
        for s in out.iter_mut() {
            if taken == k {
                break;
            }
            if s.labels.contains(&class) && s.segments.is_some() {
                s.fully_annotated = true;
                taken += 1;
            }
        }
        let candidates = out.iter().filter(|s| s.labels.contains(&class)).count();
        if taken < k && candidates > 0 {
            warn!("class {class}: only {taken} annotated videos available for semi({k})");
        }
    }
    out
}

pub fn apply_supervision(
    samples: &[VideoSample],
    num_classes: usize,
    supervision: Supervision,
) -> Vec<VideoSample> {
    match supervision {
        Supervision::Weak => select_semi_subset(samples, num_classes, 0),
        Supervision::Semi { k } => select_semi_subset(samples, num_classes, k),
        Supervision::Full => samples
            .iter()
            .map(|s| VideoSample {
                fully_annotated: s.segments.is_some(),
                ..s.clone()
            })
            .collect(),
    }
}

/// Draws `batch_size` distinct videos (fewer if the pool is smaller) and
/// crops each to the clip cap.
pub fn sample_batch(
    pool: &[&VideoSample],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<VideoSample> {
    let n = config.batch_size.min(pool.len());
    let picks = index::sample(rng, pool.len(), n);
    picks
        .into_iter()
        .map(|i| crop_clip(pool[i], config.max_clip_len, rng))
        .collect()
}

/// Computes the objective on `batch` and applies one Adam step.
pub fn train_step(
    state: &mut TrainState,
    batch: &[VideoSample],
    config: &TrainConfig,
    objective: &Objective,
) -> Result<LossBreakdown> {
    let (losses, grads) = total_loss(batch, &state.params, objective, &mut state.rng)?;
    if !losses.is_finite() || !grads.is_finite() {
        return Err(Error::Numerical {
            step: state.step + 1,
            reason: format!("non-finite loss {losses:?}"),
            batch: batch.iter().map(|s| s.id.clone()).collect(),
        });
    }
    adam_update(state, &grads, config);
    Ok(losses)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogRecord>,
}

/// Runs the configured strategy for `config.iterations` steps.
///
/// Supervision flags are recomputed from `config.supervision`; the flags
/// stored on the samples are ignored.
pub fn run_training(
    samples: &[VideoSample],
    num_classes: usize,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("training set is empty".into()))?;
    let data = apply_supervision(samples, num_classes, config.supervision);
    let all: Vec<&VideoSample> = data.iter().collect();
    let annotated: Vec<&VideoSample> = data.iter().filter(|s| s.fully_annotated).collect();

    let objective = config.objective();
    let mut phases: Vec<(Vec<&VideoSample>, Objective, usize)> = Vec::new();
    match config.strategy {
        Strategy::Joint => phases.push((all, objective, config.iterations)),
        Strategy::FullyAnnotatedOnly => {
            if annotated.is_empty() {
                return Err(Error::Config(
                    "strategy fully_annotated_only needs at least one annotated video".into(),
                ));
            }
            phases.push((annotated, objective, config.iterations));
        }
        Strategy::PretrainFinetune => {
            if annotated.is_empty() {
                return Err(Error::Config(
                    "strategy pretrain_finetune needs at least one annotated video".into(),
                ));
            }
            let mut pretrain = objective;
            pretrain.loss.eta = 0.0;
            let first_half = config.iterations / 2;
            phases.push((all, pretrain, first_half));
            phases.push((annotated, objective, config.iterations - first_half));
        }
    }

    let mut state = TrainState::new(config, first.feature_dim(), num_classes);
    let mut log = Vec::with_capacity(config.iterations);
    for (pool, objective, steps) in phases {
        for _ in 0..steps {
            let batch = sample_batch(&pool, config, &mut state.rng);
            let losses = train_step(&mut state, &batch, config, &objective)?;
            if state.step % 100 == 0 {
                debug!("step {} L={:.5}", state.step, losses.total);
            }
            log.push(LogRecord {
                step: state.step,
                losses,
            });
        }
    }
    Ok(TrainOutcome { state, log })
}
