use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::ablation::{AblationReport, AblationTable};
use super::loso::LosoReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReportFormat {
    Text,
    Csv,
    Json,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Text => "txt",
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "text" | "txt" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!(
                "unknown report format '{other}' (text, csv, json)"
            ))),
        }
    }
}

/// Something [`emit_report`] can serialise.
pub trait Report: Serialize {
    fn to_text(&self) -> String;
    fn to_csv(&self) -> Result<String>;
}

pub fn render_report<R: Report + ?Sized>(report: &R, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Text => Ok(report.to_text()),
        ReportFormat::Csv => report.to_csv(),
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report)? + "\n"),
    }
}

pub fn emit_report<R: Report + ?Sized>(report: &R, format: ReportFormat, path: &Path) -> Result<()> {
    let body = render_report(report, format)?;
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn csv_string(rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

impl Report for LosoReport {
    fn to_text(&self) -> String {
        let mut s = String::new();
        let c = &self.config;
        let _ = writeln!(
            s,
            "LOSO  dataset={}  mode={}  fusion={}",
            self.dataset, c.stream_mode, self.fusion
        );
        let _ = writeln!(
            s,
            "lr={} batch={} epochs<={} patience={} lambda={} seed={} params={}",
            c.lr, c.batch_size, c.max_epochs, c.patience, c.lambda, c.seed, self.param_count
        );
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<12} {:>6} {:>8} {:>9} {:>7}",
            "subject", "n_test", "correct", "accuracy", "epochs"
        );
        for f in &self.folds {
            let _ = writeln!(
                s,
                "{:<12} {:>6} {:>8} {:>9} {:>7}",
                f.subject,
                f.n_test,
                f.correct,
                pct(f.accuracy),
                f.history.epochs.len()
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "micro accuracy {} % ({}/{})   macro accuracy {} %",
            pct(self.micro_accuracy),
            self.total_correct,
            self.total_samples,
            pct(self.macro_accuracy)
        );
        let _ = writeln!(s, "confusion (rows true, columns predicted):");
        for (name, row) in self.class_names.iter().zip(&self.confusion) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>5}")).collect();
            let _ = writeln!(s, "  {name:<12}{}", cells.join(""));
        }
        s
    }

    fn to_csv(&self) -> Result<String> {
        let mut rows = vec![["subject", "n_test", "correct", "accuracy", "epochs", "best_epoch"]
            .map(String::from)
            .to_vec()];
        for f in &self.folds {
            rows.push(vec![
                f.subject.clone(),
                f.n_test.to_string(),
                f.correct.to_string(),
                f.accuracy.to_string(),
                f.history.epochs.len().to_string(),
                f.history.best_epoch.to_string(),
            ]);
        }
        rows.push(vec![
            "ALL".into(),
            self.total_samples.to_string(),
            self.total_correct.to_string(),
            self.micro_accuracy.to_string(),
            String::new(),
            String::new(),
        ]);
        csv_string(rows)
    }
}

impl Report for AblationReport {
    fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Attention ablation (accuracy %)");
        let _ = writeln!(s, "{:<32} {:>10}", "Method", self.dataset);
        for r in self.rows_of(AblationTable::Attention) {
            let _ = writeln!(s, "{:<32} {:>10}", r.method, pct(r.accuracy));
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "Input ablation (accuracy %)");
        let _ = writeln!(
            s,
            "{:<10} {:<22} {:<8} {:>10}",
            "Streams", "Input", "Method", self.dataset
        );
        for r in self.rows_of(AblationTable::Input) {
            let streams = format!("{}-stream", r.streams);
            let _ = writeln!(
                s,
                "{:<10} {:<22} {:<8} {:>10}",
                streams,
                r.input,
                r.method,
                pct(r.accuracy)
            );
        }
        for n in self
            .runs
            .iter()
            .flat_map(|r| &r.notes)
            .collect::<std::collections::BTreeSet<_>>()
        {
            let _ = writeln!(s, "note: {n}");
        }
        let _ = writeln!(
            s,
            "dual-phase >= single full DI: {}",
            if self.dual_phase_beats_single_full { "yes" } else { "no" }
        );
        s
    }

    fn to_csv(&self) -> Result<String> {
        let mut rows = vec![["table", "streams", "input", "method", &self.dataset.clone()]
            .map(String::from)
            .to_vec()];
        for r in &self.rows {
            rows.push(vec![
                match r.table {
                    AblationTable::Attention => "attention".into(),
                    AblationTable::Input => "input".into(),
                },
                r.streams.to_string(),
                r.input.clone(),
                r.method.clone(),
                r.accuracy.to_string(),
            ]);
        }
        csv_string(rows)
    }
}

impl Report for [LosoReport] {
    fn to_text(&self) -> String {
        let mut s = format!("{:>8} {:>10} {:>10}\n", "lambda", "micro %", "macro %");
        for r in self {
            let _ = writeln!(
                s,
                "{:>8} {:>10} {:>10}",
                r.config.lambda,
                pct(r.micro_accuracy),
                pct(r.macro_accuracy)
            );
        }
        s
    }

    fn to_csv(&self) -> Result<String> {
        let mut rows = vec![vec![
            "lambda".to_string(),
            "micro_accuracy".into(),
            "macro_accuracy".into(),
        ]];
        for r in self {
            rows.push(vec![
                r.config.lambda.to_string(),
                r.micro_accuracy.to_string(),
                r.macro_accuracy.to_string(),
            ]);
        }
        csv_string(rows)
    }
}
