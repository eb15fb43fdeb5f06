//! Experiment reports and their JSON, CSV and text renderings.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    ReportOnly,
}

impl Status {
    pub fn from_check(ok: bool) -> Self {
        if ok {
            Status::Pass
        } else {
            Status::Fail
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::ReportOnly => "REPORT",
        }
    }
}

/// One measured number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Statistic {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stderr: Option<f64>,
}

impl Statistic {
    pub fn new(name: impl Into<String>, value: f64) -> Self {
        Self {
            name: name.into(),
            n: None,
            eps: None,
            value,
            stderr: None,
        }
    }

    pub fn at(mut self, n: usize) -> Self {
        self.n = Some(n);
        self
    }

    pub fn at_eps(mut self, eps: f64) -> Self {
        self.eps = Some(eps);
        self
    }

    pub fn with_stderr(mut self, stderr: f64) -> Self {
        self.stderr = Some(stderr);
        self
    }
}

/// The bound an entry was checked against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    /// The inequality checked, in words.
    pub statement: String,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub id: String,
    pub title: String,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<Bound>,
    pub measured: Vec<Statistic>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

impl ReportEntry {
    pub fn new(id: &str, title: &str) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            status: Status::ReportOnly,
            bound: None,
            measured: Vec::new(),
            note: String::new(),
        }
    }

    pub fn checked(mut self, statement: impl Into<String>, value: f64, tolerance: Option<f64>, ok: bool) -> Self {
        self.bound = Some(Bound {
            statement: statement.into(),
            value,
            tolerance,
        });
        self.status = Status::from_check(ok);
        self
    }

    pub fn stat(mut self, s: Statistic) -> Self {
        self.measured.push(s);
        self
    }

    pub fn stats(mut self, s: impl IntoIterator<Item = Statistic>) -> Self {
        self.measured.extend(s);
        self
    }

    pub fn note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub scenario: String,
    pub provenance: Provenance,
    /// The effective configuration, as canonical TOML.
    pub config: String,
    pub entries: Vec<ReportEntry>,
}

/// Ids every complete report carries.
pub const REQUIRED_IDS: [&str; 12] = [
    "lemma_i",
    "lemma_ii",
    "lemma_iii",
    "lemma_iv",
    "moments",
    "drift_convergence",
    "exponential_moment",
    "khasminskii",
    "krylov",
    "ito_residual",
    "uniqueness_decay",
    "supermartingale_shadow",
];

impl ExperimentReport {
    pub fn entry(&self, id: &str) -> Option<&ReportEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.status != Status::Fail)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.status == Status::Fail)
            .map(|e| e.id.as_str())
            .collect()
    }

    pub fn missing_ids(&self) -> Vec<&'static str> {
        REQUIRED_IDS.iter().copied().filter(|id| self.entry(id).is_none()).collect()
    }

    pub fn statistic_count(&self) -> usize {
        self.entries.iter().map(|e| e.measured.len()).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Config echo as `#` lines, a header, then one row per statistic.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::new();
        let _ = writeln!(out, "# scenario: {}", self.scenario);
        let _ = writeln!(out, "# seed: {}", self.provenance.seed);
        let _ = writeln!(out, "# config_hash: {}", self.provenance.config_hash);
        let _ = writeln!(out, "# code_version: {}", self.provenance.code_version);
        for line in self.config.lines() {
            let _ = writeln!(out, "# {line}");
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| LabError::Parse(e.to_string());
        w.write_record(["scenario", "n", "eps", "statistic", "value", "stderr"])
            .map_err(csv_err)?;
        let opt = |v: Option<String>| v.unwrap_or_default();
        for e in &self.entries {
            for s in &e.measured {
                w.write_record([
                    self.scenario.clone(),
                    opt(s.n.map(|n| n.to_string())),
                    opt(s.eps.map(|x| x.to_string())),
                    format!("{}.{}", e.id, s.name),
                    s.value.to_string(),
                    opt(s.stderr.map(|x| x.to_string())),
                ])
                .map_err(csv_err)?;
            }
        }
        let body = w.into_inner().map_err(|e| LabError::Parse(e.to_string()))?;
        out.push_str(&String::from_utf8(body).map_err(|e| LabError::Parse(e.to_string()))?);
        Ok(out)
    }

    /// One line per entry: id, status, bound, and the leading statistics.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "scenario {} (seed {}, config {})",
            self.scenario,
            self.provenance.seed,
            &self.provenance.config_hash[..self.provenance.config_hash.len().min(12)]
        );
        for e in &self.entries {
            let bound = match &e.bound {
                Some(b) => b.statement.clone(),
                None => "report only".into(),
            };
            let shown: Vec<String> = e
                .measured
                .iter()
                .take(4)
                .map(|s| {
                    let tag = match (s.n, s.eps) {
                        (Some(n), _) => format!("{}[{n}]", s.name),
                        (None, Some(x)) => format!("{}[{x}]", s.name),
                        _ => s.name.clone(),
                    };
                    format!("{tag}={:.4e}", s.value)
                })
                .collect();
            let more = if e.measured.len() > 4 { " ..." } else { "" };
            let _ = writeln!(
                out,
                "{:<24} {:<6} {:<44} {}{more}",
                e.id,
                e.status.label(),
                bound,
                shown.join(" ")
            );
        }
        out
    }

    pub fn render(&self, format: Format) -> Result<String> {
        match format {
            Format::Json => self.to_json(),
            Format::Csv => self.to_csv(),
            Format::Text => Ok(self.to_text()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
    Text,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Json => "json",
            Format::Csv => "csv",
            Format::Text => "txt",
        }
    }
}

impl FromStr for Format {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            "text" => Ok(Format::Text),
            other => Err(LabError::UnknownFormat(other.into())),
        }
    }
}

/// Writes `report.<ext>` into `dir` and returns its path.
pub fn emit_report(report: &ExperimentReport, format: Format, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("report.{}", format.extension()));
    std::fs::write(&path, report.render(format)?)?;
    Ok(path)
}

/// Wall-clock facts kept apart from the reproducible outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTimestamps {
    pub scenario: String,
    pub seed: u64,
    pub config_hash: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub elapsed_ms: u128,
}

pub fn write_provenance(t: &RunTimestamps, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join("provenance.json");
    std::fs::write(&path, serde_json::to_string_pretty(t)?)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ExperimentReport {
        let entries = REQUIRED_IDS
            .iter()
            .enumerate()
            .map(|(k, id)| {
                ReportEntry::new(id, "title")
                    .checked("x <= 1", 1.0, Some(0.1), k % 3 != 0)
                    .stat(Statistic::new("x", 0.1 * k as f64 + 1e-17).at(k).with_stderr(1.0 / 3.0))
                    .stat(Statistic::new("y", std::f64::consts::PI).at_eps(0.025))
            })
            .collect();
        ExperimentReport {
            scenario: "s".into(),
            provenance: Provenance {
                config_hash: "ab".repeat(32),
                seed: u64::MAX,
                code_version: "0.1.0".into(),
            },
            config: "name = \"s\"\n[grid]\nhorizon = 1.0\n".into(),
            entries,
        }
    }

    #[test]
    fn json_round_trips() {
        let r = sample();
        assert_eq!(ExperimentReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    }

    #[test]
    fn csv_rows_match_statistics() {
        let r = sample();
        let csv = r.to_csv().unwrap();
        let body: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(body.len(), 1 + r.statistic_count());
        assert_eq!(body[0], "scenario,n,eps,statistic,value,stderr");
        assert!(csv.contains("# [grid]") && csv.contains(&format!("# seed: {}", u64::MAX)));
    }

    #[test]
    fn text_has_one_line_per_id() {
        let r = sample();
        let text = r.to_text();
        for id in REQUIRED_IDS {
            assert_eq!(text.lines().filter(|l| l.split_whitespace().next() == Some(id)).count(), 1);
        }
    }

    #[test]
    fn unknown_format_is_an_error() {
        assert!(matches!("yaml".parse::<Format>(), Err(LabError::UnknownFormat(_))));
        assert_eq!("csv".parse::<Format>().unwrap(), Format::Csv);
    }

    #[test]
    fn failures_are_listed() {
        let r = sample();
        assert!(!r.all_pass());
        assert_eq!(r.failures().len(), 4);
        assert!(r.missing_ids().is_empty());
    }
}
