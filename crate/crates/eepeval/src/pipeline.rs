//! End-to-end evaluation runs: events file in, report out.
//!
//! A run is described by a [`RunConfig`] (usually loaded from TOML) and
//! executed by [`run_pipeline`], which chains the library stages:
//!
//! 1. parse the event file,
//! 2. label episodes and keep the task cohort,
//! 3. truncate the final prediction horizon,
//! 4. sample one reference time per episode,
//! 5. assign stratified folds,
//! 6. score trajectories (built-in scorer) or read them from a file,
//! 7. evaluate each fold and aggregate.
//!
//! Every artifact lands under `out_dir` with a fixed name, and the whole
//! run is a pure function of the inputs and the seed: running twice
//! writes byte-identical files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::event::{Episode, TaskConfigError};
use crate::io::{self, EventFileError, FileError};
use crate::label::{
    apply_labeler, load_rule_file, preset, preset_names, LabelError, RuleFileError, TaskPreset,
};
use crate::metrics::{
    aggregate_folds, evaluate_fold, probe_times, FoldRow, MetricError, MetricReport,
    RiskTrajectory,
};
use crate::sample::{
    assign_folds, sample_reference_times, truncate_horizon, EvalInstance, FoldAssignment,
    SampleError,
};
use crate::synth::{mix_seed, score_trajectory, ScorerSpec, SynthError};

pub const INSTANCES_FILE: &str = "instances.jsonl";
pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const FOLD_ROWS_FILE: &str = "fold_rows.jsonl";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_TEXT_FILE: &str = "report.txt";

fn default_folds() -> usize {
    5
}

/// One evaluation run, as declared in a TOML config file.
///
/// Exactly one of `task` (a built-in preset name) or `rules` (a rule
/// file path) selects the task. Scores come from a built-in `scorer`
/// spec, or from an external `trajectories` file; naming both is an
/// error, naming neither defaults to the `windowed_mean` scorer.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// JSON-lines event file to evaluate.
    pub events: PathBuf,
    /// Output directory; created if missing.
    pub out_dir: PathBuf,
    #[serde(default)]
    pub task: Option<String>,
    #[serde(default)]
    pub rules: Option<PathBuf>,
    pub seed: u64,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub scorer: Option<String>,
    #[serde(default)]
    pub trajectories: Option<PathBuf>,
    /// Overrides the task's probe radii when set.
    #[serde(default)]
    pub b: Option<Vec<f64>>,
    /// Overrides the task's alert threshold when set.
    #[serde(default)]
    pub tau: Option<f64>,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("rule file: {0}")]
    Rules(#[from] RuleFileError),
    #[error("parse stage: {0}")]
    Parse(#[from] EventFileError),
    #[error("label stage: {0}")]
    Label(#[from] LabelError),
    #[error("sample stage: {0}")]
    Sample(#[from] SampleError),
    #[error("score stage: {0}")]
    Score(#[from] SynthError),
    #[error("evaluate stage: {0}")]
    Evaluate(#[from] MetricError),
    #[error("write stage: {0}")]
    Write(#[from] FileError),
}

impl From<TaskConfigError> for PipelineError {
    fn from(e: TaskConfigError) -> Self {
        PipelineError::Config(e.to_string())
    }
}

impl RunConfig {
    /// Reads a TOML run config. Relative paths inside the file are
    /// resolved against the config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            PipelineError::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        let mut config: RunConfig = toml::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            let rebase = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&p);
                }
            };
            rebase(&mut config.events);
            rebase(&mut config.out_dir);
            if let Some(rules) = &mut config.rules {
                rebase(rules);
            }
            if let Some(traj) = &mut config.trajectories {
                rebase(traj);
            }
        }
        Ok(config)
    }

    /// Resolves the task selection plus any `b`/`tau` overrides into a
    /// validated preset.
    pub fn resolve_preset(&self) -> Result<TaskPreset, PipelineError> {
        let mut preset = match (&self.task, &self.rules) {
            (Some(name), None) => preset(name).ok_or_else(|| {
                PipelineError::Config(format!(
                    "unknown task {name:?}; built-in tasks: {}",
                    preset_names().join(", ")
                ))
            })?,
            (None, Some(path)) => load_rule_file(path)?,
            (Some(_), Some(_)) => {
                return Err(PipelineError::Config(
                    "set task or rules, not both".into(),
                ))
            }
            (None, None) => {
                return Err(PipelineError::Config(
                    "one of task or rules is required".into(),
                ))
            }
        };
        if let Some(b) = &self.b {
            preset.task.probe_radius_b = b.clone();
        }
        if let Some(tau) = self.tau {
            preset.task.alert_threshold_tau = tau;
        }
        preset.task.validate()?;
        Ok(preset)
    }

    fn resolve_scorer(&self) -> Result<Option<ScorerSpec>, PipelineError> {
        match (&self.scorer, &self.trajectories) {
            (Some(_), Some(_)) => Err(PipelineError::Config(
                "set scorer or trajectories, not both".into(),
            )),
            (Some(s), None) => s
                .parse::<ScorerSpec>()
                .map(Some)
                .map_err(PipelineError::Config),
            (None, Some(_)) => Ok(None),
            (None, None) => Ok(Some(ScorerSpec::WindowedMean)),
        }
    }
}

/// What a finished run produced, with stage-by-stage episode counts for
/// the log line.
#[derive(Debug)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub n_parsed: usize,
    pub n_in_cohort: usize,
    pub n_after_truncation: usize,
    pub n_instances: usize,
    pub n_positive: usize,
    pub report: MetricReport,
    pub warnings: Vec<String>,
}

impl RunArtifacts {
    pub fn file(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

/// Runs the full pipeline for one config. See the module docs for the
/// stage list.
pub fn run_pipeline(config: &RunConfig) -> Result<RunArtifacts, PipelineError> {
    let preset = config.resolve_preset()?;
    let scorer = config.resolve_scorer()?;

    let parsed = io::parse_event_file(&config.events)?;
    let n_parsed = parsed.episodes.len();
    let mut warnings = parsed.warnings;

    // Label: keep cohort members, attach detected event times. An
    // episode the labeler cannot assess (no vitals at all) is excluded
    // with a warning rather than failing the run.
    let mut cohort: Vec<Episode> = Vec::new();
    for mut ep in parsed.episodes {
        match apply_labeler(&ep, &preset.labeler) {
            Ok(labeled) if labeled.in_cohort => {
                ep.event_time = labeled.outcome.event_time;
                cohort.push(ep);
            }
            Ok(_) => {}
            Err(LabelError::MissingVitals { episode_id }) => {
                warnings.push(format!("excluded episode {episode_id}: no vitals"));
            }
        }
    }
    let n_in_cohort = cohort.len();

    let cohort = truncate_horizon(cohort, preset.task.horizon_h);
    let n_after_truncation = cohort.len();

    let instances =
        sample_reference_times(&cohort, preset.task.horizon_h, mix_seed(config.seed, 1))?;
    let folds = assign_folds(&instances, config.folds, mix_seed(config.seed, 2))?;

    let trajectories: Vec<RiskTrajectory> = match (&scorer, &config.trajectories) {
        (Some(spec), _) => {
            let score_seed = mix_seed(config.seed, 3);
            let by_id: BTreeMap<&str, &Episode> =
                cohort.iter().map(|ep| (ep.id.as_str(), ep)).collect();
            instances
                .iter()
                .map(|inst| {
                    let ep = by_id[inst.episode_id.as_str()];
                    let probes = probe_times(
                        ep,
                        inst.reference_time_t,
                        preset.task.max_radius(),
                        &preset.task.probe_policy,
                    );
                    score_trajectory(
                        ep,
                        inst.reference_time_t,
                        &probes,
                        spec,
                        preset.task.horizon_h,
                        score_seed,
                    )
                })
                .collect::<Result<_, _>>()?
        }
        (None, Some(path)) => io::read_trajectories_file(path)?,
        (None, None) => unreachable!("resolve_scorer always yields a source"),
    };
    let traj_map: BTreeMap<String, RiskTrajectory> = trajectories
        .iter()
        .map(|t| (t.episode_id.clone(), t.clone()))
        .collect();

    let rows = evaluate_all_folds(&preset, &instances, &folds, &traj_map)?;
    let report = aggregate_folds(&rows);

    std::fs::create_dir_all(&config.out_dir).map_err(|source| FileError::Io {
        path: config.out_dir.display().to_string(),
        source,
    })?;
    let out = |name: &str| config.out_dir.join(name);
    io::write_instances_file(out(INSTANCES_FILE), &instances, &folds)?;
    io::write_trajectories_file(out(TRAJECTORIES_FILE), &trajectories)?;
    io::write_fold_rows(out(FOLD_ROWS_FILE), &rows)?;
    io::write_report_json(out(REPORT_JSON_FILE), &report)?;
    io::write_report_table(out(REPORT_TEXT_FILE), &report)?;

    let n_positive = instances.iter().filter(|i| i.label == 1).count();
    Ok(RunArtifacts {
        out_dir: config.out_dir.clone(),
        n_parsed,
        n_in_cohort,
        n_after_truncation,
        n_instances: instances.len(),
        n_positive,
        report,
        warnings,
    })
}

/// Groups instances by fold and evaluates each group, in fold order.
pub fn evaluate_all_folds(
    preset: &TaskPreset,
    instances: &[EvalInstance],
    folds: &FoldAssignment,
    trajectories: &BTreeMap<String, RiskTrajectory>,
) -> Result<Vec<FoldRow>, PipelineError> {
    let mut by_fold: BTreeMap<usize, Vec<EvalInstance>> = BTreeMap::new();
    for inst in instances {
        let fold = folds.fold_of(&inst.episode_id).ok_or_else(|| {
            PipelineError::Config(format!(
                "episode {} has no fold assignment",
                inst.episode_id
            ))
        })?;
        by_fold.entry(fold).or_default().push(inst.clone());
    }
    let mut rows = Vec::new();
    for (fold, group) in &by_fold {
        rows.extend(evaluate_fold(
            &preset.name,
            *fold,
            group,
            trajectories,
            &preset.task,
        )?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_cohort, SynthConfig};

    fn synth_events_file(dir: &Path, n: usize, prevalence: f64, seed: u64) -> PathBuf {
        let cohort = generate_cohort(&SynthConfig {
            n_episodes: n,
            prevalence,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let path = dir.join("events.jsonl");
        io::write_event_file(&path, &cohort).unwrap();
        path
    }

    fn base_config(events: PathBuf, out_dir: PathBuf) -> RunConfig {
        RunConfig {
            events,
            out_dir,
            task: Some("hyperkalemia".into()),
            rules: None,
            seed: 11,
            folds: 3,
            scorer: Some("oracle".into()),
            trajectories: None,
            b: None,
            tau: None,
        }
    }

    #[test]
    fn full_run_writes_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let events = synth_events_file(dir.path(), 60, 0.3, 5);
        let config = base_config(events, dir.path().join("out"));
        let artifacts = run_pipeline(&config).unwrap();

        assert_eq!(artifacts.n_parsed, 60);
        assert_eq!(artifacts.n_in_cohort, 60);
        assert!(artifacts.n_after_truncation <= 60);
        assert_eq!(artifacts.n_instances, artifacts.n_after_truncation);
        assert!(artifacts.n_positive >= config.folds);

        for name in [
            INSTANCES_FILE,
            TRAJECTORIES_FILE,
            FOLD_ROWS_FILE,
            REPORT_JSON_FILE,
            REPORT_TEXT_FILE,
        ] {
            assert!(artifacts.file(name).exists(), "{name} missing");
        }

        // Rows: one per fold per radius; hyperkalemia has two radii.
        assert_eq!(artifacts.report.folds.len(), config.folds * 2);
        assert_eq!(artifacts.report.aggregates.len(), 2);
        // The oracle separates classes perfectly on synthetic data.
        for agg in &artifacts.report.aggregates {
            assert!(agg.auroc_mean > 0.99, "auroc {}", agg.auroc_mean);
        }

        let instances = io::read_instances_file(artifacts.file(INSTANCES_FILE)).unwrap();
        assert_eq!(instances.len(), artifacts.n_instances);
        assert!(instances.iter().all(|(_, fold)| *fold < config.folds));
    }

    #[test]
    fn reruns_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let events = synth_events_file(dir.path(), 40, 0.3, 9);
        let mut config = base_config(events, dir.path().join("a"));
        config.scorer = Some("noisy:0.2".into());
        run_pipeline(&config).unwrap();
        config.out_dir = dir.path().join("b");
        run_pipeline(&config).unwrap();

        for name in [
            INSTANCES_FILE,
            TRAJECTORIES_FILE,
            FOLD_ROWS_FILE,
            REPORT_JSON_FILE,
            REPORT_TEXT_FILE,
        ] {
            let a = std::fs::read(dir.path().join("a").join(name)).unwrap();
            let b = std::fs::read(dir.path().join("b").join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn external_trajectories_reproduce_scored_run() {
        let dir = tempfile::tempdir().unwrap();
        let events = synth_events_file(dir.path(), 40, 0.3, 17);
        let config = base_config(events.clone(), dir.path().join("scored"));
        let scored = run_pipeline(&config).unwrap();

        let mut replay = base_config(events, dir.path().join("replay"));
        replay.scorer = None;
        replay.trajectories = Some(scored.file(TRAJECTORIES_FILE));
        let replayed = run_pipeline(&replay).unwrap();

        assert_eq!(
            std::fs::read(scored.file(FOLD_ROWS_FILE)).unwrap(),
            std::fs::read(replayed.file(FOLD_ROWS_FILE)).unwrap()
        );
    }

    #[test]
    fn config_misuse_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let events = synth_events_file(dir.path(), 10, 0.3, 1);
        let mut config = base_config(events, dir.path().join("out"));

        config.rules = Some(PathBuf::from("also.toml"));
        assert!(matches!(
            run_pipeline(&config),
            Err(PipelineError::Config(_))
        ));

        config.rules = None;
        config.task = Some("levitation".into());
        let err = run_pipeline(&config).unwrap_err();
        assert!(err.to_string().contains("levitation"));

        config.task = Some("sepsis".into());
        config.trajectories = Some(PathBuf::from("t.jsonl"));
        assert!(matches!(
            run_pipeline(&config),
            Err(PipelineError::Config(_))
        ));

        config.trajectories = None;
        config.scorer = Some("psychic".into());
        assert!(matches!(
            run_pipeline(&config),
            Err(PipelineError::Config(_))
        ));
    }

    #[test]
    fn overrides_change_radii_and_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let events = synth_events_file(dir.path(), 40, 0.3, 23);
        let mut config = base_config(events, dir.path().join("out"));
        config.b = Some(vec![1.0]);
        config.tau = Some(0.9);
        let artifacts = run_pipeline(&config).unwrap();
        assert_eq!(artifacts.report.aggregates.len(), 1);
        assert!(artifacts.report.folds.iter().all(|r| r.b == 1.0));
    }

    #[test]
    fn toml_config_rebases_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        synth_events_file(dir.path(), 40, 0.3, 31);
        let config_path = dir.path().join("run.toml");
        std::fs::write(
            &config_path,
            r#"
events = "events.jsonl"
out_dir = "out"
task = "hyperkalemia"
seed = 11
folds = 3
scorer = "windowed_mean"
"#,
        )
        .unwrap();
        let config = RunConfig::load(&config_path).unwrap();
        assert_eq!(config.events, dir.path().join("events.jsonl"));
        assert_eq!(config.folds, 3);
        let artifacts = run_pipeline(&config).unwrap();
        assert_eq!(artifacts.out_dir, dir.path().join("out"));
        assert!(artifacts.file(REPORT_JSON_FILE).exists());

        // Unknown keys in the file are config mistakes, not silence.
        std::fs::write(&config_path, "events = \"e\"\nout_dir = \"o\"\nseed = 1\nfold = 5\n")
            .unwrap();
        assert!(matches!(
            RunConfig::load(&config_path),
            Err(PipelineError::Config(_))
        ));
    }
}
