use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{EvalUnit, ScoreTriple};

/// Which model(s) produced a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowModel {
    DedicatedDisf,
    DedicatedPunc,
    /// Both dedicated models, chained.
    DedicatedPair,
    Joint,
    /// No model: the source is the hypothesis.
    Identity,
}

impl RowModel {
    pub fn as_str(self) -> &'static str {
        match self {
            RowModel::DedicatedDisf => "dedicated-disf",
            RowModel::DedicatedPunc => "dedicated-punc",
            RowModel::DedicatedPair => "dedicated-pair",
            RowModel::Joint => "joint",
            RowModel::Identity => "identity",
        }
    }
}

impl fmt::Display for RowModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecodeMode {
    #[serde(rename = "single")]
    Single,
    #[serde(rename = "on/off")]
    OnOff,
    #[serde(rename = "off/on")]
    OffOn,
    #[serde(rename = "off/off")]
    OffOff,
    /// Disfluency deletion, then punctuation.
    #[serde(rename = "cascade-fwd")]
    CascadeFwd,
    /// Punctuation, then disfluency deletion.
    #[serde(rename = "cascade-rev")]
    CascadeRev,
    #[serde(rename = "on/on")]
    OnOn,
    #[serde(rename = "none")]
    None,
}

impl DecodeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DecodeMode::Single => "single",
            DecodeMode::OnOff => "on/off",
            DecodeMode::OffOn => "off/on",
            DecodeMode::OffOff => "off/off",
            DecodeMode::CascadeFwd => "cascade-fwd",
            DecodeMode::CascadeRev => "cascade-rev",
            DecodeMode::OnOn => "on/on",
            DecodeMode::None => "none",
        }
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One CSV row. Metric cells are empty when the row failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model_kind: RowModel,
    pub decode_mode: DecodeMode,
    pub dataset_size: usize,
    pub bleu: Option<f64>,
    pub meteor: Option<f64>,
    pub gleu: Option<f64>,
    pub exact_match: Option<f64>,
    pub wallclock_s: Option<f64>,
    pub passes: Option<usize>,
    pub params: Option<usize>,
}

impl ReportRow {
    pub fn failed(model_kind: RowModel, decode_mode: DecodeMode, dataset_size: usize) -> Self {
        Self {
            model_kind,
            decode_mode,
            dataset_size,
            bleu: None,
            meteor: None,
            gleu: None,
            exact_match: None,
            wallclock_s: None,
            passes: None,
            params: None,
        }
    }

    pub fn scores(&self) -> Option<ScoreTriple> {
        Some(ScoreTriple {
            bleu: self.bleu?,
            meteor: self.meteor?,
            gleu: self.gleu?,
        })
    }
}

/// Extra per-row figures kept out of the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowDiagnostics {
    pub model_kind: RowModel,
    pub decode_mode: DecodeMode,
    pub dataset_size: usize,
    /// Filler-deletion F1 for rows whose reference removes fillers.
    pub filler_f1: Option<f64>,
    pub unfinished: usize,
    pub error: Option<String>,
}

/// Median decode timings on a benchmark subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub dataset_size: usize,
    pub model_kind: RowModel,
    pub decode_mode: DecodeMode,
    pub sentences: usize,
    pub runs_s: Vec<f64>,
    pub median_s: f64,
    pub mean_per_sentence_s: f64,
    pub passes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub dataset_size: usize,
    pub model_kind: String,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub granularity: EvalUnit,
    pub rows: Vec<ReportRow>,
    pub diagnostics: Vec<RowDiagnostics>,
    pub bench: Vec<BenchRecord>,
    pub training: Vec<TrainSummary>,
    pub peak_rss_kb: Option<u64>,
}

impl EvalReport {
    pub fn row(&self, model: RowModel, mode: DecodeMode, size: usize) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.model_kind == model && r.decode_mode == mode && r.dataset_size == size)
    }

    pub fn diagnostics_for(&self, model: RowModel, mode: DecodeMode, size: usize) -> Option<&RowDiagnostics> {
        self.diagnostics
            .iter()
            .find(|r| r.model_kind == model && r.decode_mode == mode && r.dataset_size == size)
    }

    pub fn bench_for(&self, model: RowModel, mode: DecodeMode, size: usize) -> Option<&BenchRecord> {
        self.bench
            .iter()
            .find(|r| r.model_kind == model && r.decode_mode == mode && r.dataset_size == size)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.rows.iter().map(|r| r.dataset_size).collect();
        s.sort_unstable();
        s.dedup();
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

/// CSV of the report rows; `with_timing = false` leaves `wallclock_s` empty.
pub fn render_csv(report: &EvalReport, with_timing: bool) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record([
        "model_kind",
        "decode_mode",
        "dataset_size",
        "bleu",
        "meteor",
        "gleu",
        "exact_match",
        "wallclock_s",
        "passes",
        "params",
    ])?;
    for r in &report.rows {
        let mut r = r.clone();
        if !with_timing {
            r.wallclock_s = None;
        }
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| crate::error::Error::Io {
        path: "<csv>".into(),
        source: e.into_error(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<Vec<ReportRow>, _>>()?)
}

fn cell(x: Option<f64>, digits: usize) -> String {
    x.map_or_else(|| "failed".to_string(), |v| format!("{v:.digits$}"))
}

pub fn render_markdown(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Evaluation report\n\nMetric unit: {}\n", report.granularity);
    let header = "| model | decode | BLEU | METEOR | GLEU | exact | time (s) | passes | params |\n\
                  |---|---|---|---|---|---|---|---|---|";
    let sizes = report.sizes();
    if sizes.is_empty() {
        let _ = writeln!(out, "{header}");
    }
    for size in sizes {
        let _ = writeln!(out, "## {size} pairs per task\n\n{header}");
        for r in report.rows.iter().filter(|r| r.dataset_size == size) {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
                r.model_kind,
                r.decode_mode,
                cell(r.bleu, 4),
                cell(r.meteor, 4),
                cell(r.gleu, 4),
                cell(r.exact_match, 4),
                cell(r.wallclock_s, 2),
                r.passes.map_or("-".into(), |p| p.to_string()),
                r.params.map_or("-".into(), |p| p.to_string()),
            );
        }
        out.push('\n');
    }
    if !report.bench.is_empty() {
        let _ = writeln!(out, "## Decode timing (median of runs)\n\n| size | model | decode | sentences | median (s) | per sentence (ms) | passes |\n|---|---|---|---|---|---|---|");
        for b in &report.bench {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {:.3} | {:.2} | {} |",
                b.dataset_size,
                b.model_kind,
                b.decode_mode,
                b.sentences,
                b.median_s,
                b.mean_per_sentence_s * 1e3,
                b.passes
            );
        }
        out.push('\n');
    }
    if let Some(kb) = report.peak_rss_kb {
        let _ = writeln!(out, "Peak resident memory: {:.1} MiB", kb as f64 / 1024.0);
    }
    out
}

pub fn render_report(report: &EvalReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Markdown => Ok(render_markdown(report)),
        ReportFormat::Csv => render_csv(report, true),
    }
}
