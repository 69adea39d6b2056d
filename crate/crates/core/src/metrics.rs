//! Override response-time extraction and reporting.
//!
//! A sample is one manual activation that happened while the supervisor was
//! in AS, paired with the first later MS entry caused by manual engagement.
//! Activations in MS or WS are counted but produce no sample.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manual_io::ManualChannel;
use crate::scenario::{EventLog, Record};
use crate::supervisor::{Cause, Mode};
use crate::Millis;

pub const SUMMARY_HEADER: &str = "channel,session,n,min,p25,p50,p75,p95,max";
pub const SAMPLES_HEADER: &str = "channel,session,t_activation,t_ms_entry,response";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("event log has no init or transition records")]
    MissingTransitions,
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ResponseTimeSample {
    pub channel: ManualChannel,
    pub t_activation: Millis,
    pub t_ms_entry: Millis,
    pub response: Millis,
    pub session: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Extraction {
    pub samples: Vec<ResponseTimeSample>,
    /// Activations while not in AS.
    pub excluded: usize,
    /// AS activations never followed by a manual-engagement MS entry.
    pub unresolved: usize,
}

pub fn extract_samples(log: &EventLog) -> Result<Extraction, MetricsError> {
    let has_structure = log
        .records
        .iter()
        .any(|r| matches!(r.body, Record::Init { .. } | Record::Transition { .. }));
    if !has_structure {
        return Err(MetricsError::MissingTransitions);
    }

    // (t, to, cause) of every mode change, in log order
    let transitions: Vec<(Millis, Mode, Cause)> = log
        .records
        .iter()
        .filter_map(|r| match r.body {
            Record::Transition { to, cause, .. } => Some((r.t, to, cause)),
            _ => None,
        })
        .collect();
    let mode_before = |t: Millis| {
        transitions
            .iter()
            .take_while(|(tt, _, _)| *tt < t)
            .last()
            .map_or(Mode::Manual, |(_, m, _)| *m)
    };

    let mut out = Extraction::default();
    for r in &log.records {
        let Record::Engage { channel, activation } = r.body else {
            continue;
        };
        if mode_before(activation) != Mode::Autonomous {
            out.excluded += 1;
            continue;
        }
        let entry = transitions
            .iter()
            .find(|(t, to, cause)| *t >= activation && *to == Mode::Manual && *cause == Cause::ManualEngagement);
        match entry {
            Some((t_entry, _, _)) => out.samples.push(ResponseTimeSample {
                channel,
                t_activation: activation,
                t_ms_entry: *t_entry,
                response: t_entry - activation,
                session: log.session.clone(),
            }),
            None => out.unresolved += 1,
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub channel: ManualChannel,
    pub session: String,
    pub n: usize,
    pub min: Millis,
    pub p25: Millis,
    pub p50: Millis,
    pub p75: Millis,
    pub p95: Millis,
    pub max: Millis,
    /// `(response_ms, count)` for every observed value, 1 ms bins.
    pub histogram: Vec<(Millis, usize)>,
}

/// Nearest-rank quantile of an ascending slice: element at rank ⌈p·n⌉ (1-based).
pub fn nearest_rank(sorted: &[Millis], p: f64) -> Millis {
    assert!(!sorted.is_empty(), "quantile of empty set");
    let n = sorted.len();
    let rank = (p * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub fn summarize_values(channel: ManualChannel, session: &str, values: &[Millis]) -> Option<DistributionSummary> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let mut hist: BTreeMap<Millis, usize> = BTreeMap::new();
    for v in &sorted {
        *hist.entry(*v).or_default() += 1;
    }
    Some(DistributionSummary {
        channel,
        session: session.to_string(),
        n: sorted.len(),
        min: sorted[0],
        p25: nearest_rank(&sorted, 0.25),
        p50: nearest_rank(&sorted, 0.50),
        p75: nearest_rank(&sorted, 0.75),
        p95: nearest_rank(&sorted, 0.95),
        max: *sorted.last().expect("non-empty"),
        histogram: hist.into_iter().collect(),
    })
}

/// Groups by (channel, session), ordered by channel then session.
/// Groups with no samples are left out.
pub fn summarize(samples: &[ResponseTimeSample]) -> Vec<DistributionSummary> {
    let mut groups: BTreeMap<(ManualChannel, &str), Vec<Millis>> = BTreeMap::new();
    for s in samples {
        groups
            .entry((s.channel, s.session.as_str()))
            .or_default()
            .push(s.response);
    }
    groups
        .into_iter()
        .filter_map(|((channel, session), values)| {
            let summary = summarize_values(channel, session, &values);
            if summary.is_none() {
                log::warn!("no samples for {}/{session}; group omitted", channel.label());
            }
            summary
        })
        .collect()
}

pub fn summary_csv(summaries: &[DistributionSummary]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for s in summaries {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            s.channel.label(),
            s.session,
            s.n,
            s.min,
            s.p25,
            s.p50,
            s.p75,
            s.p95,
            s.max
        );
    }
    out
}

pub fn samples_csv(samples: &[ResponseTimeSample]) -> String {
    let mut out = String::from(SAMPLES_HEADER);
    out.push('\n');
    for s in samples {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s.channel.label(),
            s.session,
            s.t_activation,
            s.t_ms_entry,
            s.response
        );
    }
    out
}

pub fn parse_samples_csv(text: &str) -> Result<Vec<ResponseTimeSample>, MetricsError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == SAMPLES_HEADER => {}
        _ => {
            return Err(MetricsError::Parse {
                line: 1,
                message: format!("expected header {SAMPLES_HEADER:?}"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| MetricsError::Parse { line: i + 1, message };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(err(format!("expected 5 columns, got {}", cols.len())));
        }
        let channel = ManualChannel::parse(cols[0]).ok_or_else(|| err(format!("unknown channel {:?}", cols[0])))?;
        let num = |s: &str| s.parse::<Millis>().map_err(|e| err(format!("{s:?}: {e}")));
        out.push(ResponseTimeSample {
            channel,
            session: cols[1].to_string(),
            t_activation: num(cols[2])?,
            t_ms_entry: num(cols[3])?,
            response: num(cols[4])?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
    Both,
}

#[derive(Serialize)]
struct JsonReport<'a> {
    summaries: &'a [DistributionSummary],
    samples: &'a [ResponseTimeSample],
}

/// Writes `<campaign>.summary.{csv,json}` and one
/// `<campaign>_<session>.samples.csv` per session. Returns the paths written.
pub fn export(
    dir: &Path,
    campaign: &str,
    summaries: &[DistributionSummary],
    samples: &[ResponseTimeSample],
    format: ExportFormat,
) -> Result<Vec<PathBuf>, MetricsError> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if matches!(format, ExportFormat::Csv | ExportFormat::Both) {
        let path = dir.join(format!("{campaign}.summary.csv"));
        std::fs::write(&path, summary_csv(summaries))?;
        written.push(path);

        let mut by_session: BTreeMap<&str, Vec<ResponseTimeSample>> = BTreeMap::new();
        for s in samples {
            by_session.entry(&s.session).or_default().push(s.clone());
        }
        for (session, rows) in by_session {
            let path = dir.join(format!("{campaign}_{session}.samples.csv"));
            std::fs::write(&path, samples_csv(&rows))?;
            written.push(path);
        }
    }
    if matches!(format, ExportFormat::Json | ExportFormat::Both) {
        let path = dir.join(format!("{campaign}.summary.json"));
        let report = JsonReport { summaries, samples };
        std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
        written.push(path);
    }
    Ok(written)
}
