//! Line-delimited file formats: event streams, evaluation instances,
//! risk trajectories, and metric reports.
//!
//! All writers are deterministic: the same in-memory data always
//! serializes to the same bytes, so repeated runs can be compared with
//! a plain byte diff.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{
    check_observation, validate_episode, Episode, Modality, Observation, ObservationValue,
    Timestamp, ValidateError,
};
use crate::metrics::{FoldRow, MetricReport, ProbePoint, RiskTrajectory};
use crate::sample::{EvalInstance, FoldAssignment};

/// Errors from reading an event file. Line numbers are 1-based.
#[derive(Debug, Error)]
pub enum EventFileError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("line {line}: unknown modality {modality:?}")]
    UnknownModality { line: usize, modality: String },
    #[error("line {line}: negative timestamp {hours}")]
    NegativeTimestamp { line: usize, hours: f64 },
    #[error("line {line}: {source}")]
    BadObservation {
        line: usize,
        source: ValidateError,
    },
}

/// Errors from the other line-delimited files.
#[derive(Debug, Error)]
pub enum FileError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {reason}")]
    Malformed {
        path: String,
        line: usize,
        reason: String,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> FileError {
    FileError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Parsed event file: episodes in first-seen order plus non-fatal
/// warnings (currently: ignored unknown fields).
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedEvents {
    pub episodes: Vec<Episode>,
    pub warnings: Vec<String>,
}

#[derive(Deserialize)]
struct RawEventRecord {
    episode_id: Option<String>,
    modality: Option<String>,
    #[serde(default)]
    code: Option<String>,
    #[serde(default)]
    value: Option<serde_json::Value>,
    t_hours: Option<f64>,
    #[serde(flatten)]
    extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize)]
struct EventRecordOut<'a> {
    episode_id: &'a str,
    modality: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    code: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    value: Option<serde_json::Value>,
    t_hours: f64,
}

/// Parses a JSON-lines event file.
///
/// One record per observation: `episode_id`, `modality`, `t_hours`,
/// plus `code` and/or `value` depending on the value variant (marker
/// records carry only a code; text records only a string value).
/// Records sharing an `episode_id` form one episode; episodes come back
/// validated, in first-seen order. Unknown fields are collected as
/// warnings, not errors.
pub fn parse_event_file(path: impl AsRef<Path>) -> Result<ParsedEvents, EventFileError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| EventFileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_events(BufReader::new(file))
}

/// Same as [`parse_event_file`] over any reader.
pub fn parse_events(reader: impl BufRead) -> Result<ParsedEvents, EventFileError> {
    let mut order: Vec<String> = Vec::new();
    let mut by_id: BTreeMap<String, Vec<Observation>> = BTreeMap::new();
    let mut warnings = Vec::new();

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| EventFileError::Io {
            path: format!("line {line_no}"),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawEventRecord =
            serde_json::from_str(&line).map_err(|e| EventFileError::MalformedRecord {
                line: line_no,
                reason: e.to_string(),
            })?;
        let malformed = |reason: &str| EventFileError::MalformedRecord {
            line: line_no,
            reason: reason.to_string(),
        };
        let episode_id = raw
            .episode_id
            .filter(|id| !id.is_empty())
            .ok_or_else(|| malformed("missing or empty episode_id"))?;
        let modality_str = raw.modality.ok_or_else(|| malformed("missing modality"))?;
        let modality =
            Modality::parse(&modality_str).ok_or_else(|| EventFileError::UnknownModality {
                line: line_no,
                modality: modality_str,
            })?;
        let t_hours = raw.t_hours.ok_or_else(|| malformed("missing t_hours"))?;
        if t_hours < 0.0 {
            return Err(EventFileError::NegativeTimestamp {
                line: line_no,
                hours: t_hours,
            });
        }
        let value = match (raw.code, raw.value) {
            (Some(code), Some(serde_json::Value::Number(n))) => ObservationValue::CodedNumeric {
                code,
                value: n.as_f64().ok_or_else(|| malformed("value out of range"))?,
            },
            (Some(code), None) => ObservationValue::Marker { code },
            (None, Some(serde_json::Value::Number(n))) => ObservationValue::Numeric(
                n.as_f64().ok_or_else(|| malformed("value out of range"))?,
            ),
            (None, Some(serde_json::Value::String(s))) => ObservationValue::Text(s),
            (Some(_), Some(serde_json::Value::String(_))) => {
                return Err(malformed("a record cannot carry both code and text value"))
            }
            (_, Some(other)) => {
                return Err(malformed(&format!(
                    "value must be a number or string, got {other}"
                )))
            }
            (None, None) => return Err(malformed("record carries neither code nor value")),
        };
        let obs = Observation::new(modality, value, t_hours);
        // The index reported inside this error is the 1-based file line.
        check_observation(&obs, line_no)
            .map_err(|source| EventFileError::BadObservation { line: line_no, source })?;
        if !raw.extra.is_empty() {
            let fields: Vec<&str> = raw.extra.keys().map(String::as_str).collect();
            warnings.push(format!(
                "line {line_no}: ignored unknown fields: {}",
                fields.join(", ")
            ));
        }
        if !by_id.contains_key(&episode_id) {
            order.push(episode_id.clone());
        }
        by_id.entry(episode_id).or_default().push(obs);
    }

    let episodes = order
        .into_iter()
        .map(|id| {
            let obs = by_id.remove(&id).expect("grouped above");
            validate_episode(Episode::new(id, obs)).expect("records were checked per line")
        })
        .collect();
    Ok(ParsedEvents { episodes, warnings })
}

fn observation_parts(obs: &Observation) -> (Option<&str>, Option<serde_json::Value>) {
    match &obs.value {
        ObservationValue::Numeric(v) => (None, Some(serde_json::json!(v))),
        ObservationValue::CodedNumeric { code, value } => {
            (Some(code.as_str()), Some(serde_json::json!(value)))
        }
        ObservationValue::Text(s) => (None, Some(serde_json::json!(s))),
        ObservationValue::Marker { code } => (Some(code.as_str()), None),
    }
}

/// Writes episodes as a JSON-lines event file. Only the observation
/// stream is written; event times and metadata are derived data and
/// live elsewhere.
pub fn write_event_file(path: impl AsRef<Path>, episodes: &[Episode]) -> Result<(), FileError> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    for ep in episodes {
        for obs in &ep.observations {
            let (code, value) = observation_parts(obs);
            let record = EventRecordOut {
                episode_id: &ep.id,
                modality: obs.modality.as_str(),
                code,
                value,
                t_hours: obs.t.hours(),
            };
            serde_json::to_writer(&mut w, &record).map_err(|e| FileError::Malformed {
                path: path.display().to_string(),
                line: 0,
                reason: e.to_string(),
            })?;
            w.write_all(b"\n").map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    episode_id: String,
    #[serde(rename = "T_hours")]
    t_hours: f64,
    label: u8,
    elapsed_history: f64,
    fold: usize,
}

/// Writes evaluation instances with their fold assignment, one JSON
/// record per line, in input order.
pub fn write_instances_file(
    path: impl AsRef<Path>,
    instances: &[EvalInstance],
    folds: &FoldAssignment,
) -> Result<(), FileError> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    for inst in instances {
        let fold = folds.fold_of(&inst.episode_id).ok_or_else(|| {
            FileError::Malformed {
                path: path.display().to_string(),
                line: 0,
                reason: format!("no fold assignment for episode {}", inst.episode_id),
            }
        })?;
        let record = InstanceRecord {
            episode_id: inst.episode_id.clone(),
            t_hours: inst.reference_time_t.hours(),
            label: inst.label,
            elapsed_history: inst.elapsed_history,
            fold,
        };
        serde_json::to_writer(&mut w, &record).map_err(|e| FileError::Malformed {
            path: path.display().to_string(),
            line: 0,
            reason: e.to_string(),
        })?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads instances and their fold indices.
pub fn read_instances_file(
    path: impl AsRef<Path>,
) -> Result<Vec<(EvalInstance, usize)>, FileError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstanceRecord =
            serde_json::from_str(&line).map_err(|e| FileError::Malformed {
                path: path.display().to_string(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        if rec.label > 1 {
            return Err(FileError::Malformed {
                path: path.display().to_string(),
                line: i + 1,
                reason: format!("label must be 0 or 1, got {}", rec.label),
            });
        }
        out.push((
            EvalInstance {
                episode_id: rec.episode_id,
                reference_time_t: Timestamp::new(rec.t_hours),
                label: rec.label,
                elapsed_history: rec.elapsed_history,
            },
            rec.fold,
        ));
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRecord {
    episode_id: String,
    #[serde(rename = "T_hours")]
    t_hours: f64,
    /// Probe points as `[t_hours, score]` pairs.
    points: Vec<(f64, f64)>,
}

/// Writes risk trajectories, one JSON record per line.
pub fn write_trajectories_file(
    path: impl AsRef<Path>,
    trajectories: &[RiskTrajectory],
) -> Result<(), FileError> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    for traj in trajectories {
        let record = TrajectoryRecord {
            episode_id: traj.episode_id.clone(),
            t_hours: traj.reference_time_t.hours(),
            points: traj
                .points()
                .iter()
                .map(|p| (p.t.hours(), p.score))
                .collect(),
        };
        serde_json::to_writer(&mut w, &record).map_err(|e| FileError::Malformed {
            path: path.display().to_string(),
            line: 0,
            reason: e.to_string(),
        })?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads and validates risk trajectories.
pub fn read_trajectories_file(
    path: impl AsRef<Path>,
) -> Result<Vec<RiskTrajectory>, FileError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| FileError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            reason,
        };
        let rec: TrajectoryRecord =
            serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let points = rec
            .points
            .iter()
            .map(|&(t, s)| ProbePoint::new(t, s))
            .collect();
        let traj = RiskTrajectory::new(rec.episode_id, Timestamp::new(rec.t_hours), points)
            .map_err(|e| malformed(e.to_string()))?;
        out.push(traj);
    }
    Ok(out)
}

/// Writes per-fold metric rows, one JSON record per line.
pub fn write_fold_rows(path: impl AsRef<Path>, rows: &[FoldRow]) -> Result<(), FileError> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    for row in rows {
        serde_json::to_writer(&mut w, row).map_err(|e| FileError::Malformed {
            path: path.display().to_string(),
            line: 0,
            reason: e.to_string(),
        })?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads per-fold metric rows.
pub fn read_fold_rows(path: impl AsRef<Path>) -> Result<Vec<FoldRow>, FileError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: FoldRow = serde_json::from_str(&line).map_err(|e| FileError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(row);
    }
    Ok(out)
}

/// Writes the aggregate report as a single pretty-printed JSON document.
pub fn write_report_json(path: impl AsRef<Path>, report: &MetricReport) -> Result<(), FileError> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(report).map_err(|e| FileError::Malformed {
        path: path.display().to_string(),
        line: 0,
        reason: e.to_string(),
    })?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

/// Renders the report as an aligned text table: one block of per-fold
/// rows, then cross-fold aggregates as mean +- standard deviation.
pub fn render_report_table(report: &MetricReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "task: {}    instances: {}    prevalence: {:.4}\n\n",
        report.task, report.n_instances, report.prevalence
    ));
    out.push_str(&format!(
        "{:<6} {:>8} {:>8} {:>8} {:>8} {:>10} {:>8} {:>7} {:>11}\n",
        "fold", "b", "auroc", "auprc", "f1", "stability", "flips", "n", "prevalence"
    ));
    for r in &report.folds {
        out.push_str(&format!(
            "{:<6} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>10.4} {:>8.4} {:>7} {:>11.4}\n",
            r.fold, r.b, r.auroc, r.auprc, r.f1, r.stability, r.flips, r.n, r.prevalence
        ));
    }
    out.push('\n');
    for agg in &report.aggregates {
        out.push_str(&format!(
            "aggregate over {} folds at b = {:.4}\n",
            agg.folds, agg.b
        ));
        let line = |name: &str, m: f64, s: f64| format!("  {name:<10} {m:.4} +- {s:.4}\n");
        out.push_str(&line("auroc", agg.auroc_mean, agg.auroc_std));
        out.push_str(&line("auprc", agg.auprc_mean, agg.auprc_std));
        out.push_str(&line("f1", agg.f1_mean, agg.f1_std));
        out.push_str(&line("stability", agg.stability_mean, agg.stability_std));
        out.push_str(&line("flips", agg.flips_mean, agg.flips_std));
    }
    out
}

/// Writes the aligned text table.
pub fn write_report_table(path: impl AsRef<Path>, report: &MetricReport) -> Result<(), FileError> {
    let path = path.as_ref();
    std::fs::write(path, render_report_table(report)).map_err(|e| io_err(path, e))
}
