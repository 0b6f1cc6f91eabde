//! Experiment configuration files and flag parsing helpers.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use ttcloc::evaluator::parse_iou_spec;
use ttcloc::io::read_json;
use ttcloc::synth::{Preset, SynthSpec};
use ttcloc::trainer::Supervision;
use ttcloc::{Error, InferenceMode, Result, TrainConfig};

/// Everything one experiment needs. Omitted keys take their defaults and
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    /// Named synthetic preset; `synth` takes precedence when both are set.
    pub preset: Option<Preset>,
    pub synth: Option<SynthSpec>,
    pub train: TrainConfig,
    pub inference: InferenceMode,
    /// IoU thresholds, `start:end:step` or a comma list.
    pub iou: String,
    /// Seeds for `ablate`.
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "default".into(),
            seed: 0,
            preset: None,
            synth: None,
            train: TrainConfig::default(),
            inference: InferenceMode::Predicted,
            iou: "0.3:0.7:0.1".into(),
            seeds: vec![0, 1, 2],
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let config: ExperimentConfig = read_json(path)?;
        config.validate()?;
        Ok(config)
    }

    /// File if given, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        parse_iou_spec(&self.iou)?;
        if let Some(spec) = &self.synth {
            spec.validate()?;
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn synth_spec(&self) -> Option<SynthSpec> {
        self.synth
            .clone()
            .or_else(|| self.preset.map(|p| SynthSpec::preset(p, self.seed)))
    }
}

/// Training settings used for the synthetic presets: a narrow network, and
/// a classification weight that keeps early training from locking in the
/// regularizer's sign pattern before background is told apart.
pub fn synthetic_train_config() -> TrainConfig {
    let mut c = TrainConfig {
        hidden_dim: 32,
        ..TrainConfig::default()
    };
    c.loss.lambda = 0.6;
    c
}

/// Parses a snake_case enum value the same way the config files do.
pub fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::Config(format!("unknown value {s:?}")))
}

/// `weak`, `full`, `semi:K` or `semi(K)`.
pub fn parse_supervision(s: &str) -> Result<Supervision> {
    let bad = || {
        Error::Config(format!(
            "bad supervision {s:?}; expected weak, full or semi:K"
        ))
    };
    match s {
        "weak" => Ok(Supervision::Weak),
        "full" => Ok(Supervision::Full),
        _ => {
            let k = s
                .strip_prefix("semi:")
                .or_else(|| s.strip_prefix("semi(").and_then(|r| r.strip_suffix(')')))
                .ok_or_else(bad)?;
            Ok(Supervision::Semi {
                k: k.parse().map_err(|_| bad())?,
            })
        }
    }
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad seed list {s:?}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ttcloc::objectives::RegForm;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"nmae": "x"}"#).unwrap_err();
        assert!(err.to_string().contains("nmae"));
        let err =
            serde_json::from_str::<ExperimentConfig>(r#"{"train": {"lamda": 0.1}}"#).unwrap_err();
        assert!(err.to_string().contains("lamda"));
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c: ExperimentConfig =
            serde_json::from_str(r#"{"train": {"iterations": 5, "loss": {"reg_form": "l2"}}}"#)
                .unwrap();
        assert_eq!(c.train.iterations, 5);
        assert_eq!(c.train.loss.reg_form, RegForm::L2);
        assert_eq!(c.train.batch_size, 10);
        assert_eq!(c.train.loss.lambda, 0.2);
        c.validate().unwrap();
    }

    #[test]
    fn supervision_strings() {
        assert_eq!(parse_supervision("weak").unwrap(), Supervision::Weak);
        assert_eq!(
            parse_supervision("semi:3").unwrap(),
            Supervision::Semi { k: 3 }
        );
        assert_eq!(
            parse_supervision("semi(1)").unwrap(),
            Supervision::Semi { k: 1 }
        );
        assert!(parse_supervision("semi").is_err());
        assert!(parse_supervision("strong").is_err());
    }

    #[test]
    fn enum_strings() {
        assert_eq!(
            parse_enum::<RegForm>("inner_product").unwrap(),
            RegForm::InnerProduct
        );
        assert!(parse_enum::<RegForm>("l3").is_err());
    }
}
