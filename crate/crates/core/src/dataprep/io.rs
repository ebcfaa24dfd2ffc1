//! File formats: trace and panel CSVs, dataset manifests and versioned JSON
//! documents for model parameters and reports.
//!
//! Numeric CSV fields are written with 12 decimal places so round trips are
//! lossless well past 1e-12; readers accept both LF and CRLF line endings.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ident::{TraceRecord, TrainReport, TrainingDataset};
use crate::model::{HwParams, PredictedTrace, StsqTrace, TvsqTrace};

/// Version tag written into every JSON document this crate owns.
pub const FILE_VERSION: u32 = 1;

/// Manifest tying a dataset's trace files together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub traces: Vec<TraceEntry>,
}

/// One trace file, with an optional group label used by grouped
/// cross-validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceEntry {
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

/// A dataset loaded from disk along with its per-trace group labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub data: TrainingDataset,
    pub groups: Vec<Option<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsFile {
    version: u32,
    params: HwParams,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportFile {
    version: u32,
    report: TrainReport,
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_f64(path: &Path, line: u64, field: &str, raw: &str) -> Result<f64> {
    raw.trim()
        .parse::<f64>()
        .map_err(|_| parse_err(path, line, format!("invalid {field} value '{raw}'")))
}

fn parse_usize(path: &Path, line: u64, field: &str, raw: &str) -> Result<usize> {
    raw.trim()
        .parse::<usize>()
        .map_err(|_| parse_err(path, line, format!("invalid {field} value '{raw}'")))
}

fn open_csv(path: &Path, expected_header: &[&str]) -> Result<csv::Reader<File>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(path, 1, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?;
    let got: Vec<&str> = headers.iter().collect();
    if got != expected_header {
        return Err(parse_err(
            path,
            1,
            format!("expected header {expected_header:?}, got {got:?}"),
        ));
    }
    Ok(reader)
}

fn record_line(record: &csv::StringRecord, fallback: u64) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(fallback)
}

/// Writes a full trace as `t,stsq,tvsq,ci` with t counting from 1.
pub fn write_trace_csv(path: &Path, stsq: &StsqTrace, tvsq: &TvsqTrace) -> Result<()> {
    if stsq.len() != tvsq.len() {
        return Err(Error::Contract("stsq and tvsq lengths differ".into()));
    }
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "t,stsq,tvsq,ci")?;
    for t in 0..stsq.len() {
        writeln!(
            out,
            "{},{:.12},{:.12},{:.12}",
            t + 1,
            stsq.values[t],
            tvsq.values[t],
            tvsq.ci[t]
        )?;
    }
    Ok(())
}

/// Reads a `t,stsq,tvsq,ci` file; rows must be complete and consecutive
/// from t = 1.
pub fn read_trace_csv(path: &Path) -> Result<TraceRecord> {
    let mut reader = open_csv(path, &["t", "stsq", "tvsq", "ci"])?;
    let mut stsq = Vec::new();
    let mut tvsq = Vec::new();
    let mut ci = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_err(path, row as u64 + 2, e.to_string()))?;
        let line = record_line(&record, row as u64 + 2);
        if record.len() != 4 {
            return Err(parse_err(path, line, "expected 4 columns"));
        }
        let t = parse_usize(path, line, "t", &record[0])?;
        if t != stsq.len() + 1 {
            return Err(parse_err(
                path,
                line,
                format!("expected t = {}, got {t}", stsq.len() + 1),
            ));
        }
        stsq.push(parse_f64(path, line, "stsq", &record[1])?);
        tvsq.push(parse_f64(path, line, "tvsq", &record[2])?);
        ci.push(parse_f64(path, line, "ci", &record[3])?);
    }
    Ok(TraceRecord {
        stsq: StsqTrace::new(stsq)?,
        tvsq: TvsqTrace::new(tvsq, ci)?,
    })
}

/// Writes an aggregated TVSQ trace as `t,tvsq,ci` (the prep output format).
pub fn write_tvsq_csv(path: &Path, tvsq: &TvsqTrace) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "t,tvsq,ci")?;
    for t in 0..tvsq.len() {
        writeln!(out, "{},{:.12},{:.12}", t + 1, tvsq.values[t], tvsq.ci[t])?;
    }
    Ok(())
}

pub fn read_tvsq_csv(path: &Path) -> Result<TvsqTrace> {
    let mut reader = open_csv(path, &["t", "tvsq", "ci"])?;
    let mut tvsq = Vec::new();
    let mut ci = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_err(path, row as u64 + 2, e.to_string()))?;
        let line = record_line(&record, row as u64 + 2);
        let t = parse_usize(path, line, "t", &record[0])?;
        if t != tvsq.len() + 1 {
            return Err(parse_err(path, line, "t values must be consecutive from 1"));
        }
        tvsq.push(parse_f64(path, line, "tvsq", &record[1])?);
        ci.push(parse_f64(path, line, "ci", &record[2])?);
    }
    TvsqTrace::new(tvsq, ci)
}

/// Reads an STSQ series from either a bare `t,stsq` file or a full trace
/// file (whose stsq column is used).
pub fn read_stsq_csv(path: &Path) -> Result<StsqTrace> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(path, 1, e.to_string()))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let stsq_col = match headers.as_slice() {
        [t, s] if t == "t" && s == "stsq" => 1,
        [t, s, _, _] if t == "t" && s == "stsq" => 1,
        other => {
            return Err(parse_err(
                path,
                1,
                format!("expected header [t, stsq] or [t, stsq, tvsq, ci], got {other:?}"),
            ))
        }
    };
    let mut values = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_err(path, row as u64 + 2, e.to_string()))?;
        let line = record_line(&record, row as u64 + 2);
        let t = parse_usize(path, line, "t", &record[0])?;
        if t != values.len() + 1 {
            return Err(parse_err(path, line, "t values must be consecutive from 1"));
        }
        values.push(parse_f64(path, line, "stsq", &record[stsq_col])?);
    }
    StsqTrace::new(values)
}

/// Writes a prediction as `t,tvsq_hat,warmup` with warm-up rows flagged 1.
pub fn write_prediction_csv(path: &Path, pred: &PredictedTrace) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "t,tvsq_hat,warmup")?;
    for (t, value) in pred.values.iter().enumerate() {
        writeln!(
            out,
            "{},{:.12},{}",
            t + 1,
            value,
            u8::from(t < pred.warmup)
        )?;
    }
    Ok(())
}

/// Reads subject scores (`subject,video,t,score`) and reference scores
/// (`subject,t,score`) into a dense panel. Indices are 1-based; every
/// (subject, video, second) cell must appear exactly once.
pub fn read_panel_csv(scores_path: &Path, ref_path: &Path, session: &str) -> Result<crate::dataprep::SubjectScorePanel> {
    let mut reader = open_csv(scores_path, &["subject", "video", "t", "score"])?;
    let mut cells: Vec<(usize, usize, usize, f64)> = Vec::new();
    let (mut i_max, mut j_max, mut t_max) = (0usize, 0usize, 0usize);
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_err(scores_path, row as u64 + 2, e.to_string()))?;
        let line = record_line(&record, row as u64 + 2);
        let i = parse_usize(scores_path, line, "subject", &record[0])?;
        let j = parse_usize(scores_path, line, "video", &record[1])?;
        let t = parse_usize(scores_path, line, "t", &record[2])?;
        let score = parse_f64(scores_path, line, "score", &record[3])?;
        if i == 0 || j == 0 || t == 0 {
            return Err(parse_err(scores_path, line, "indices are 1-based"));
        }
        i_max = i_max.max(i);
        j_max = j_max.max(j);
        t_max = t_max.max(t);
        cells.push((i, j, t, score));
    }
    if cells.is_empty() {
        return Err(parse_err(scores_path, 2, "no score rows"));
    }
    let mut scores = vec![vec![vec![f64::NAN; t_max]; j_max]; i_max];
    for (i, j, t, score) in cells {
        if !scores[i - 1][j - 1][t - 1].is_nan() {
            return Err(Error::Contract(format!(
                "duplicate score for subject {i}, video {j}, t={t}"
            )));
        }
        scores[i - 1][j - 1][t - 1] = score;
    }
    for (i, per_subject) in scores.iter().enumerate() {
        for (j, series) in per_subject.iter().enumerate() {
            for (t, value) in series.iter().enumerate() {
                if value.is_nan() {
                    return Err(Error::Contract(format!(
                        "missing score for subject {}, video {}, t={}",
                        i + 1,
                        j + 1,
                        t + 1
                    )));
                }
            }
        }
    }

    let mut reader = open_csv(ref_path, &["subject", "t", "score"])?;
    let mut ref_scores = vec![vec![f64::NAN; t_max]; i_max];
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_err(ref_path, row as u64 + 2, e.to_string()))?;
        let line = record_line(&record, row as u64 + 2);
        let i = parse_usize(ref_path, line, "subject", &record[0])?;
        let t = parse_usize(ref_path, line, "t", &record[1])?;
        let score = parse_f64(ref_path, line, "score", &record[2])?;
        if i == 0 || t == 0 || i > i_max || t > t_max {
            return Err(parse_err(ref_path, line, "index outside the panel grid"));
        }
        ref_scores[i - 1][t - 1] = score;
    }
    for (i, series) in ref_scores.iter().enumerate() {
        for (t, value) in series.iter().enumerate() {
            if value.is_nan() {
                return Err(Error::Contract(format!(
                    "missing reference score for subject {}, t={}",
                    i + 1,
                    t + 1
                )));
            }
        }
    }
    crate::dataprep::SubjectScorePanel::new(scores, ref_scores, session.to_string())
}

/// Writes a panel back out in the two-file CSV format.
pub fn write_panel_csv(
    scores_path: &Path,
    ref_path: &Path,
    panel: &crate::dataprep::SubjectScorePanel,
) -> Result<()> {
    let mut out = BufWriter::new(File::create(scores_path)?);
    writeln!(out, "subject,video,t,score")?;
    for (i, per_subject) in panel.scores.iter().enumerate() {
        for (j, series) in per_subject.iter().enumerate() {
            for (t, score) in series.iter().enumerate() {
                writeln!(out, "{},{},{},{:.12}", i + 1, j + 1, t + 1, score)?;
            }
        }
    }
    let mut out = BufWriter::new(File::create(ref_path)?);
    writeln!(out, "subject,t,score")?;
    for (i, series) in panel.ref_scores.iter().enumerate() {
        for (t, score) in series.iter().enumerate() {
            writeln!(out, "{},{},{:.12}", i + 1, t + 1, score)?;
        }
    }
    Ok(())
}

/// Writes trace CSVs plus a manifest into `dir` and returns the manifest
/// path. `groups`, when given, must label every trace.
pub fn save_dataset(
    dir: &Path,
    data: &TrainingDataset,
    groups: Option<&[Option<String>]>,
    description: Option<&str>,
) -> Result<PathBuf> {
    if let Some(groups) = groups {
        if groups.len() != data.n_traces() {
            return Err(Error::Contract(
                "group labels must cover every trace".into(),
            ));
        }
    }
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(data.n_traces());
    for (n, item) in data.items.iter().enumerate() {
        let name = format!("trace_{:03}.csv", n + 1);
        write_trace_csv(&dir.join(&name), &item.stsq, &item.tvsq)?;
        entries.push(TraceEntry {
            path: name,
            group: groups.and_then(|g| g[n].clone()),
        });
    }
    let manifest = DatasetManifest {
        version: FILE_VERSION,
        description: description.map(|s| s.to_string()),
        traces: entries,
    };
    let manifest_path = dir.join("manifest.json");
    save_json(&manifest_path, &manifest)?;
    Ok(manifest_path)
}

/// Loads a dataset manifest and every trace file it references (paths are
/// resolved relative to the manifest).
pub fn load_dataset(manifest_path: &Path) -> Result<LoadedDataset> {
    let manifest: DatasetManifest = load_json(manifest_path)?;
    if manifest.version != FILE_VERSION {
        return Err(parse_err(
            manifest_path,
            1,
            format!("unsupported manifest version {}", manifest.version),
        ));
    }
    if manifest.traces.is_empty() {
        return Err(parse_err(manifest_path, 1, "manifest lists no traces"));
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut items = Vec::with_capacity(manifest.traces.len());
    let mut groups = Vec::with_capacity(manifest.traces.len());
    for entry in &manifest.traces {
        items.push(read_trace_csv(&base.join(&entry.path))?);
        groups.push(entry.group.clone());
    }
    Ok(LoadedDataset {
        data: TrainingDataset::new(items)?,
        groups,
    })
}

pub fn save_params(path: &Path, params: &HwParams) -> Result<()> {
    save_json(
        path,
        &ParamsFile {
            version: FILE_VERSION,
            params: params.clone(),
        },
    )
}

pub fn load_params(path: &Path) -> Result<HwParams> {
    let file: ParamsFile = load_json(path)?;
    if file.version != FILE_VERSION {
        return Err(parse_err(
            path,
            1,
            format!("unsupported params version {}", file.version),
        ));
    }
    file.params.validate()?;
    Ok(file.params)
}

pub fn save_report(path: &Path, report: &TrainReport) -> Result<()> {
    save_json(
        path,
        &ReportFile {
            version: FILE_VERSION,
            report: report.clone(),
        },
    )
}

pub fn load_report(path: &Path) -> Result<TrainReport> {
    let file: ReportFile = load_json(path)?;
    if file.version != FILE_VERSION {
        return Err(parse_err(
            path,
            1,
            format!("unsupported report version {}", file.version),
        ));
    }
    Ok(file.report)
}

/// Pretty-printed JSON with a trailing newline.
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

/// Plot-ready impulse response, columns `d,h`.
pub fn write_impulse_csv(path: &Path, impulse: &[f64]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "d,h")?;
    for (d, h) in impulse.iter().enumerate() {
        writeln!(out, "{},{:.12}", d, h)?;
    }
    Ok(())
}

/// Plot-ready nonlinearity curve, columns `x,y,slope`.
pub fn write_profile_csv(path: &Path, points: &[(f64, f64, f64)]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "x,y,slope")?;
    for (x, y, slope) in points {
        writeln!(out, "{:.12},{:.12},{:.12}", x, y, slope)?;
    }
    Ok(())
}
