//! Command-line front end. Every subcommand is a thin wrapper over one
//! library stage; `run` chains them all from a TOML config.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use eepeval::event::Episode;
use eepeval::io;
use eepeval::label::{apply_labeler, load_rule_file, preset, preset_names, TaskPreset};
use eepeval::metrics::{aggregate_folds, evaluate_fold, probe_times, RiskTrajectory};
use eepeval::pipeline::{run_pipeline, RunConfig};
use eepeval::sample::{assign_folds, sample_reference_times, truncate_horizon};
use eepeval::synth::{generate_cohort, mix_seed, score_trajectory, ScorerSpec, SynthConfig};

#[derive(Parser)]
#[command(name = "eepeval", version, about = "Early-event prediction evaluation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Task selection shared by the stage subcommands: exactly one of a
/// built-in preset or a rule file.
#[derive(Args)]
struct TaskSelect {
    /// Built-in task preset name (see `eepeval tasks`).
    #[arg(long, conflicts_with = "rules")]
    task: Option<String>,
    /// TOML rule file describing a custom task.
    #[arg(long)]
    rules: Option<PathBuf>,
}

impl TaskSelect {
    fn resolve(&self) -> Result<TaskPreset> {
        match (&self.task, &self.rules) {
            (Some(name), None) => preset(name).with_context(|| {
                format!(
                    "unknown task {name:?}; built-in tasks: {}",
                    preset_names().join(", ")
                )
            }),
            (None, Some(path)) => {
                load_rule_file(path).with_context(|| format!("loading {}", path.display()))
            }
            _ => bail!("exactly one of --task or --rules is required"),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline from a TOML config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config file's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config file's output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// List built-in task presets, or dump one as a rule file.
    Tasks {
        /// Print this preset as rule-file TOML instead of the table.
        #[arg(long)]
        dump: Option<String>,
    },
    /// Parse and validate an event file, reporting counts and warnings.
    Validate {
        #[arg(long)]
        events: PathBuf,
    },
    /// Label every episode, reporting cohort membership and onsets.
    Label {
        #[arg(long)]
        events: PathBuf,
        #[command(flatten)]
        select: TaskSelect,
        /// Output JSON-lines path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample one labeled reference time per episode and assign folds.
    Sample {
        #[arg(long)]
        events: PathBuf,
        #[command(flatten)]
        select: TaskSelect,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score sampled instances with a built-in scorer.
    Score {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        instances: PathBuf,
        #[command(flatten)]
        select: TaskSelect,
        #[arg(long)]
        scorer: ScorerSpec,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute per-fold metric rows from instances and trajectories.
    Evaluate {
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        trajectories: PathBuf,
        #[command(flatten)]
        select: TaskSelect,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate fold rows into a report.
    Report {
        #[arg(long)]
        fold_rows: PathBuf,
        /// Write the report as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Write the aligned text table here; stdout when omitted.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Generate a synthetic cohort event file.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        prevalence: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 144.0)]
        duration_hours: f64,
        #[arg(long, default_value_t = 1.0)]
        rate_per_hour: f64,
        #[arg(long, default_value_t = 1.0)]
        hazard_lift: f64,
        #[arg(long, default_value_t = 24.0)]
        drift_window_hours: f64,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            config,
            seed,
            out_dir,
        } => cmd_run(&config, seed, out_dir),
        Command::Tasks { dump } => cmd_tasks(dump.as_deref()),
        Command::Validate { events } => cmd_validate(&events),
        Command::Label {
            events,
            select,
            out,
        } => cmd_label(&events, &select, out.as_deref()),
        Command::Sample {
            events,
            select,
            seed,
            folds,
            out,
        } => cmd_sample(&events, &select, seed, folds, &out),
        Command::Score {
            events,
            instances,
            select,
            scorer,
            seed,
            out,
        } => cmd_score(&events, &instances, &select, &scorer, seed, &out),
        Command::Evaluate {
            instances,
            trajectories,
            select,
            out,
        } => cmd_evaluate(&instances, &trajectories, &select, &out),
        Command::Report {
            fold_rows,
            json,
            table,
        } => cmd_report(&fold_rows, json.as_deref(), table.as_deref()),
        Command::Synth {
            n,
            prevalence,
            seed,
            out,
            duration_hours,
            rate_per_hour,
            hazard_lift,
            drift_window_hours,
        } => cmd_synth(SynthConfig {
            n_episodes: n,
            prevalence,
            mean_duration_hours: duration_hours,
            observation_rate_per_hour: rate_per_hour,
            hazard_lift,
            drift_window_hours,
            seed,
        }, &out),
    }
}

fn cmd_run(config_path: &Path, seed: Option<u64>, out_dir: Option<PathBuf>) -> Result<()> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(out_dir) = out_dir {
        config.out_dir = out_dir;
    }
    let artifacts = run_pipeline(&config)?;
    for w in &artifacts.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "parsed {} episodes, {} in cohort, {} after truncation, {} instances ({} positive)",
        artifacts.n_parsed,
        artifacts.n_in_cohort,
        artifacts.n_after_truncation,
        artifacts.n_instances,
        artifacts.n_positive,
    );
    println!("artifacts in {}", artifacts.out_dir.display());
    println!();
    print!("{}", io::render_report_table(&artifacts.report));
    Ok(())
}

fn cmd_tasks(dump: Option<&str>) -> Result<()> {
    if let Some(name) = dump {
        let preset = preset(name).with_context(|| format!("unknown task {name:?}"))?;
        print!("{}", eepeval::label::rule_file_contents(&preset));
        return Ok(());
    }
    println!(
        "{:<16} {:>9} {:>14} {:>8} {:>6}",
        "task", "horizon_h", "radii_b", "c", "tau"
    );
    for name in preset_names() {
        let p = preset(name).expect("built-in");
        let radii = p
            .task
            .probe_radius_b
            .iter()
            .map(|b| format!("{b}"))
            .collect::<Vec<_>>()
            .join(",");
        println!(
            "{:<16} {:>9} {:>14} {:>8.4} {:>6}",
            p.name, p.task.horizon_h, radii, p.task.pairing_window_c, p.task.alert_threshold_tau
        );
    }
    Ok(())
}

fn cmd_validate(events: &Path) -> Result<()> {
    let parsed = io::parse_event_file(events)?;
    for w in &parsed.warnings {
        eprintln!("warning: {w}");
    }
    let n_obs: usize = parsed.episodes.iter().map(|e| e.observations.len()).sum();
    println!(
        "ok: {} episodes, {} observations",
        parsed.episodes.len(),
        n_obs
    );
    Ok(())
}

/// Applies the labeler and keeps cohort members with their event times.
fn labeled_cohort(events: &Path, preset: &TaskPreset) -> Result<Vec<Episode>> {
    let parsed = io::parse_event_file(events)?;
    for w in &parsed.warnings {
        eprintln!("warning: {w}");
    }
    let mut cohort = Vec::new();
    for mut ep in parsed.episodes {
        match apply_labeler(&ep, &preset.labeler) {
            Ok(labeled) if labeled.in_cohort => {
                ep.event_time = labeled.outcome.event_time;
                cohort.push(ep);
            }
            Ok(_) => {}
            Err(e) => eprintln!("warning: excluded: {e}"),
        }
    }
    Ok(cohort)
}

fn out_writer(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(path) => Box::new(std::io::BufWriter::new(
            std::fs::File::create(path)
                .with_context(|| format!("creating {}", path.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn cmd_label(events: &Path, select: &TaskSelect, out: Option<&Path>) -> Result<()> {
    let preset = select.resolve()?;
    let parsed = io::parse_event_file(events)?;
    let mut w = out_writer(out)?;
    for ep in &parsed.episodes {
        #[derive(serde::Serialize)]
        struct Record<'a> {
            episode_id: &'a str,
            in_cohort: bool,
            #[serde(flatten)]
            outcome: &'a eepeval::LabelOutcome,
        }
        let labeled = match apply_labeler(ep, &preset.labeler) {
            Ok(l) => l,
            Err(e) => {
                eprintln!("warning: skipped: {e}");
                continue;
            }
        };
        serde_json::to_writer(
            &mut w,
            &Record {
                episode_id: &ep.id,
                in_cohort: labeled.in_cohort,
                outcome: &labeled.outcome,
            },
        )?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_sample(
    events: &Path,
    select: &TaskSelect,
    seed: u64,
    folds: usize,
    out: &Path,
) -> Result<()> {
    let preset = select.resolve()?;
    let cohort = labeled_cohort(events, &preset)?;
    let cohort = truncate_horizon(cohort, preset.task.horizon_h);
    let instances = sample_reference_times(&cohort, preset.task.horizon_h, mix_seed(seed, 1))?;
    let assignment = assign_folds(&instances, folds, mix_seed(seed, 2))?;
    io::write_instances_file(out, &instances, &assignment)?;
    let n_pos = instances.iter().filter(|i| i.label == 1).count();
    println!(
        "wrote {} instances ({} positive) to {}",
        instances.len(),
        n_pos,
        out.display()
    );
    Ok(())
}

fn cmd_score(
    events: &Path,
    instances: &Path,
    select: &TaskSelect,
    scorer: &ScorerSpec,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let preset = select.resolve()?;
    let cohort = labeled_cohort(events, &preset)?;
    let cohort = truncate_horizon(cohort, preset.task.horizon_h);
    let by_id: BTreeMap<&str, &Episode> = cohort.iter().map(|e| (e.id.as_str(), e)).collect();
    let instances = io::read_instances_file(instances)?;
    let score_seed = mix_seed(seed, 3);
    let mut trajectories = Vec::with_capacity(instances.len());
    for (inst, _) in &instances {
        let ep = by_id
            .get(inst.episode_id.as_str())
            .with_context(|| format!("episode {} not in the labeled cohort", inst.episode_id))?;
        let probes = probe_times(
            ep,
            inst.reference_time_t,
            preset.task.max_radius(),
            &preset.task.probe_policy,
        );
        trajectories.push(score_trajectory(
            ep,
            inst.reference_time_t,
            &probes,
            scorer,
            preset.task.horizon_h,
            score_seed,
        )?);
    }
    io::write_trajectories_file(out, &trajectories)?;
    println!("wrote {} trajectories to {}", trajectories.len(), out.display());
    Ok(())
}

fn cmd_evaluate(
    instances: &Path,
    trajectories: &Path,
    select: &TaskSelect,
    out: &Path,
) -> Result<()> {
    let preset = select.resolve()?;
    let instances = io::read_instances_file(instances)?;
    let trajectories = io::read_trajectories_file(trajectories)?;
    let traj_map: BTreeMap<String, RiskTrajectory> = trajectories
        .into_iter()
        .map(|t| (t.episode_id.clone(), t))
        .collect();
    let mut by_fold: BTreeMap<usize, Vec<eepeval::EvalInstance>> = BTreeMap::new();
    for (inst, fold) in instances {
        by_fold.entry(fold).or_default().push(inst);
    }
    let mut rows = Vec::new();
    for (fold, group) in &by_fold {
        rows.extend(evaluate_fold(
            &preset.name,
            *fold,
            group,
            &traj_map,
            &preset.task,
        )?);
    }
    io::write_fold_rows(out, &rows)?;
    println!("wrote {} fold rows to {}", rows.len(), out.display());
    Ok(())
}

fn cmd_report(fold_rows: &Path, json: Option<&Path>, table: Option<&Path>) -> Result<()> {
    let rows = io::read_fold_rows(fold_rows)?;
    if rows.is_empty() {
        bail!("{} holds no fold rows", fold_rows.display());
    }
    let report = aggregate_folds(&rows);
    if let Some(path) = json {
        io::write_report_json(path, &report)?;
    }
    match table {
        Some(path) => io::write_report_table(path, &report)?,
        None => print!("{}", io::render_report_table(&report)),
    }
    Ok(())
}

fn cmd_synth(config: SynthConfig, out: &Path) -> Result<()> {
    let cohort = generate_cohort(&config)?;
    io::write_event_file(out, &cohort)?;
    let n_pos = cohort.iter().filter(|e| e.event_time.is_some()).count();
    println!(
        "wrote {} episodes ({} positive) to {}",
        cohort.len(),
        n_pos,
        out.display()
    );
    Ok(())
}
