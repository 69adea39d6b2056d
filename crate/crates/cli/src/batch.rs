//! `run` and `campaign` subcommands.

use std::path::{Path, PathBuf};

use agvsim::metrics::{self, extract_samples, summarize, ExportFormat, ResponseTimeSample};
use agvsim::scenario::{self, run_campaign, ScenarioError, ScenarioScript, SeedPolicy};
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid { .. } => EXIT_INVALID,
            _ => EXIT_FAILURE,
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn invalid(path: &Path, message: impl Into<String>) -> Self {
        CliError::Invalid {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}

pub fn load_script(path: &Path) -> Result<ScenarioScript, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let script: ScenarioScript = serde_json::from_str(&text).map_err(|e| CliError::invalid(path, e.to_string()))?;
    script.validate().map_err(|e| CliError::invalid(path, e.to_string()))?;
    Ok(script)
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub events: PathBuf,
    pub summary: PathBuf,
    pub samples: PathBuf,
    pub samples_taken: usize,
}

/// Runs one script and writes its event log, summary CSV and samples CSV.
pub fn run_script_file(script_path: &Path, out_dir: &Path, seed: Option<u64>) -> Result<RunOutput, CliError> {
    let mut script = load_script(script_path)?;
    if let Some(seed) = seed {
        script.seed = seed;
    }
    let log = scenario::run(&script).map_err(|e| CliError::invalid(script_path, e.to_string()))?;
    let extraction = extract_samples(&log)?;
    let summaries = summarize(&extraction.samples);

    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let out = RunOutput {
        events: out_dir.join(format!("{}.events.jsonl", script.name)),
        summary: out_dir.join(format!("{}.summary.csv", script.name)),
        samples: out_dir.join(format!("{}_{}.samples.csv", script.name, script.session_label())),
        samples_taken: extraction.samples.len(),
    };
    write(&out.events, &log.to_jsonl())?;
    write(&out.summary, &metrics::summary_csv(&summaries))?;
    write(&out.samples, &metrics::samples_csv(&extraction.samples))?;
    Ok(out)
}

pub fn cmd_run(script_path: &Path, out_dir: &Path, seed: Option<u64>) -> i32 {
    match run_script_file(script_path, out_dir, seed) {
        Ok(out) => {
            println!(
                "wrote {}, {}, {} ({} override samples)",
                out.events.display(),
                out.summary.display(),
                out.samples.display(),
                out.samples_taken
            );
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[derive(Debug, Default)]
pub struct CampaignOutput {
    pub logs: Vec<PathBuf>,
    pub exports: Vec<PathBuf>,
    pub failures: Vec<CliError>,
    pub samples: Vec<ResponseTimeSample>,
    pub table: String,
}

/// Script files (`*.json`) in `dir`, sorted by name.
pub fn list_scripts(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn run_campaign_dir(dir: &Path, reps: u64, out_dir: &Path) -> Result<CampaignOutput, CliError> {
    let scripts = list_scripts(dir)?;
    if scripts.is_empty() {
        return Err(CliError::invalid(dir, "no *.json scripts found"));
    }
    if reps == 0 {
        return Err(CliError::invalid(dir, "--reps must be at least 1"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;

    let mut out = CampaignOutput::default();
    for path in &scripts {
        let script = match load_script(path) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("skipping: {e}");
                out.failures.push(e);
                continue;
            }
        };
        let logs = match run_campaign(std::slice::from_ref(&script), reps, SeedPolicy::Derived) {
            Ok(logs) => logs,
            Err(e @ (ScenarioError::Invalid { .. } | ScenarioError::NoScripts)) => {
                out.failures.push(CliError::invalid(path, e.to_string()));
                continue;
            }
        };
        for (rep, log) in logs.iter().enumerate() {
            let log_path = out_dir.join(format!("{}.r{rep}.events.jsonl", script.name));
            write(&log_path, &log.to_jsonl())?;
            out.logs.push(log_path);
            out.samples.extend(extract_samples(log)?.samples);
        }
    }

    let summaries = summarize(&out.samples);
    out.exports = metrics::export(out_dir, "campaign", &summaries, &out.samples, ExportFormat::Both)?;
    out.table = render_table(&summaries);
    Ok(out)
}

fn render_table(summaries: &[metrics::DistributionSummary]) -> String {
    let mut s = format!(
        "{:<10} {:<16} {:>5} {:>5} {:>5} {:>5} {:>5} {:>5} {:>5}\n",
        "channel", "session", "n", "min", "p25", "p50", "p75", "p95", "max"
    );
    for d in summaries {
        s.push_str(&format!(
            "{:<10} {:<16} {:>5} {:>5} {:>5} {:>5} {:>5} {:>5} {:>5}\n",
            d.channel.label(),
            d.session,
            d.n,
            d.min,
            d.p25,
            d.p50,
            d.p75,
            d.p95,
            d.max
        ));
    }
    s
}

pub fn cmd_campaign(dir: &Path, reps: u64, out_dir: &Path) -> i32 {
    match run_campaign_dir(dir, reps, out_dir) {
        Ok(out) => {
            print!("{}", out.table);
            println!("{} logs written to {}", out.logs.len(), out_dir.display());
            if out.failures.is_empty() {
                EXIT_OK
            } else {
                for f in &out.failures {
                    eprintln!("failed: {f}");
                }
                EXIT_FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
