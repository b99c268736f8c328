//! Built-in task presets and the rule-file format.
//!
//! A rule file is a TOML document carrying a task name, the evaluation
//! settings, and a labeler definition. The six built-in tasks are also
//! shipped as files under `presets/` in the repository; loading one of
//! those files yields exactly the corresponding built-in.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{codes, default_decompensation_rules, EsofaConfig, ThresholdRule, VitalRule};
use crate::event::{TaskConfig, TaskConfigError};

/// A labeling strategy, as selected by a rule file or preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Labeler {
    /// Event fires when a coded value strictly crosses a threshold.
    Threshold { rule: ThresholdRule },
    /// Event fires at the first abnormal vital; episodes must start
    /// with normal vitals.
    Decompensation { rules: Vec<VitalRule> },
    /// Rule-based sepsis engine.
    Sepsis {
        #[serde(default)]
        config: EsofaConfig,
    },
    /// Event fires at the first marker observation with this code.
    Marker { code: String },
}

/// A named task: evaluation settings plus a labeler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPreset {
    pub name: String,
    pub task: TaskConfig,
    pub labeler: Labeler,
}

pub const PRESET_NAMES: [&str; 6] = [
    "hyperkalemia",
    "hypoglycemia",
    "decompensation",
    "sepsis",
    "icu_transfer",
    "mortality",
];

pub fn preset_names() -> [&'static str; 6] {
    PRESET_NAMES
}

/// The built-in preset with this name, if any.
pub fn preset(name: &str) -> Option<TaskPreset> {
    let p = match name {
        "hyperkalemia" => TaskPreset {
            name: "hyperkalemia".into(),
            task: TaskConfig::new(1.0, vec![0.5, 4.0]),
            labeler: Labeler::Threshold {
                rule: ThresholdRule {
                    name: "hyperkalemia_onset".into(),
                    codes: vec![
                        "LOINC/LG7931-1".into(),
                        "LOINC/LP386618-5".into(),
                        "LOINC/LG10990-6".into(),
                        "LOINC/6298-4".into(),
                        "LOINC/2823-3".into(),
                    ],
                    direction: super::Direction::Above,
                    threshold: 7.0,
                },
            },
        },
        "hypoglycemia" => TaskPreset {
            name: "hypoglycemia".into(),
            task: TaskConfig::new(1.0, vec![0.5, 4.0]),
            labeler: Labeler::Threshold {
                rule: ThresholdRule {
                    name: "hypoglycemia_onset".into(),
                    codes: vec![
                        "SNOMED/33747003".into(),
                        "LOINC/LP416145-3".into(),
                        "LOINC/14749-6".into(),
                    ],
                    direction: super::Direction::Below,
                    threshold: 3.0,
                },
            },
        },
        "decompensation" => TaskPreset {
            name: "decompensation".into(),
            task: TaskConfig::new(1.5, vec![0.5, 4.0]),
            labeler: Labeler::Decompensation {
                rules: default_decompensation_rules(),
            },
        },
        "sepsis" => TaskPreset {
            name: "sepsis".into(),
            task: TaskConfig::new(1.5, vec![0.5, 4.0]),
            labeler: Labeler::Sepsis {
                config: EsofaConfig::default(),
            },
        },
        "icu_transfer" => TaskPreset {
            name: "icu_transfer".into(),
            task: TaskConfig::new(6.0, vec![3.0]),
            labeler: Labeler::Marker {
                code: codes::ICU_TRANSFER.into(),
            },
        },
        "mortality" => TaskPreset {
            name: "mortality".into(),
            task: TaskConfig::new(12.0, vec![3.0]),
            labeler: Labeler::Marker {
                code: codes::DEATH.into(),
            },
        },
        _ => return None,
    };
    Some(p)
}

#[derive(Debug, Error)]
pub enum RuleFileError {
    #[error("cannot read rule file: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse rule file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid task settings: {0}")]
    Task(#[from] TaskConfigError),
    #[error("invalid sepsis settings: {0}")]
    Sepsis(#[from] super::EsofaConfigError),
    #[error("rule file has an empty task name")]
    EmptyName,
    #[error("threshold rule needs a non-empty code set")]
    EmptyCodeSet,
    #[error("decompensation labeler needs at least one vital rule")]
    NoVitalRules,
}

fn check_preset(preset: &TaskPreset) -> Result<(), RuleFileError> {
    if preset.name.is_empty() {
        return Err(RuleFileError::EmptyName);
    }
    preset.task.validate()?;
    match &preset.labeler {
        Labeler::Threshold { rule } if rule.codes.is_empty() => Err(RuleFileError::EmptyCodeSet),
        Labeler::Decompensation { rules } if rules.is_empty() => Err(RuleFileError::NoVitalRules),
        Labeler::Sepsis { config } => {
            config.validate()?;
            Ok(())
        }
        _ => Ok(()),
    }
}

/// Parses and validates a TOML rule file.
pub fn load_rule_file(path: impl AsRef<Path>) -> Result<TaskPreset, RuleFileError> {
    let text = std::fs::read_to_string(path)?;
    let preset: TaskPreset = toml::from_str(&text)?;
    check_preset(&preset)?;
    Ok(preset)
}

/// Serializes a preset in the rule-file format.
pub fn rule_file_contents(preset: &TaskPreset) -> String {
    toml::to_string_pretty(preset).expect("presets serialize to TOML")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_presets_are_valid() {
        for name in preset_names() {
            let p = preset(name).unwrap();
            assert_eq!(p.name, name);
            check_preset(&p).unwrap();
        }
        assert!(preset("unknown_task").is_none());
    }

    #[test]
    fn preset_horizons_and_radii() {
        let expect = [
            ("hyperkalemia", 1.0, vec![0.5, 4.0]),
            ("hypoglycemia", 1.0, vec![0.5, 4.0]),
            ("decompensation", 1.5, vec![0.5, 4.0]),
            ("sepsis", 1.5, vec![0.5, 4.0]),
            ("icu_transfer", 6.0, vec![3.0]),
            ("mortality", 12.0, vec![3.0]),
        ];
        for (name, h, b) in expect {
            let p = preset(name).unwrap();
            assert_eq!(p.task.horizon_h, h, "{name}");
            assert_eq!(p.task.probe_radius_b, b, "{name}");
            assert_eq!(p.task.pairing_window_c, 1.0 / 6.0, "{name}");
            assert_eq!(p.task.alert_threshold_tau, 0.5, "{name}");
        }
    }

    #[test]
    fn rule_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for name in preset_names() {
            let p = preset(name).unwrap();
            let path = dir.path().join(format!("{name}.toml"));
            std::fs::write(&path, rule_file_contents(&p)).unwrap();
            let loaded = load_rule_file(&path).unwrap();
            assert_eq!(loaded, p, "{name}");
        }
    }

    #[test]
    fn rule_file_rejects_bad_settings() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        let mut p = preset("hyperkalemia").unwrap();
        p.task.horizon_h = -1.0;
        std::fs::write(&path, rule_file_contents(&p)).unwrap();
        assert!(matches!(load_rule_file(&path), Err(RuleFileError::Task(_))));

        let mut p = preset("hyperkalemia").unwrap();
        if let Labeler::Threshold { rule } = &mut p.labeler {
            rule.codes.clear();
        }
        std::fs::write(&path, rule_file_contents(&p)).unwrap();
        assert!(matches!(
            load_rule_file(&path),
            Err(RuleFileError::EmptyCodeSet)
        ));
    }

    #[test]
    fn sepsis_rule_file_accepts_partial_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sepsis.toml");
        std::fs::write(
            &path,
            r#"
name = "sepsis_strict"

[task]
horizon_h = 1.5
probe_radius_b = [0.5]

[labeler]
kind = "sepsis"

[labeler.config]
lactate_threshold = 4.0
"#,
        )
        .unwrap();
        let p = load_rule_file(&path).unwrap();
        match p.labeler {
            Labeler::Sepsis { config } => {
                assert_eq!(config.lactate_threshold, 4.0);
                // Unspecified fields keep their defaults.
                assert_eq!(config.antibiotic_coverage_hours, 72.0);
            }
            _ => panic!("expected sepsis labeler"),
        }
    }

    #[test]
    fn shipped_rule_files_match_builtins() {
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../presets");
        for name in preset_names() {
            let path = dir.join(format!("{name}.toml"));
            let from_file = load_rule_file(&path)
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert_eq!(from_file, preset(name).unwrap(), "{name} drifted");
        }
    }
}
