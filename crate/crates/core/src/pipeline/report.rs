use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::EvalResult;
use crate::config::StageConfig;
use crate::error::{Error, Result};

pub const REPORT_COLUMNS: [&str; 6] = ["MSE", "SAD", "Grad", "Conn", "#Param", "FLOPs"];

/// One table row. Missing values render as `n/a`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub mse: Option<f64>,
    pub sad: Option<f64>,
    pub grad: Option<f64>,
    pub conn: Option<f64>,
    pub params: Option<u64>,
    pub flops: Option<u64>,
}

impl ReportRow {
    pub fn from_eval(label: impl Into<String>, e: &EvalResult) -> Self {
        Self {
            label: label.into(),
            mse: Some(e.mean.mse),
            sad: Some(e.mean.sad),
            grad: Some(e.mean.grad),
            conn: Some(e.mean.conn),
            params: Some(e.params),
            flops: Some(e.flops),
        }
    }

    /// The six metric cells, formatted.
    pub fn cells(&self) -> [String; 6] {
        let f = |v: Option<f64>, digits: usize| {
            v.map_or("n/a".to_string(), |v| format!("{v:.digits$}"))
        };
        let n = |v: Option<u64>| v.map_or("n/a".to_string(), |v| v.to_string());
        [
            f(self.mse, 5),
            f(self.sad, 4),
            f(self.grad, 4),
            f(self.conn, 4),
            n(self.params),
            n(self.flops),
        ]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub title: String,
    /// Free-form lines printed above the table.
    pub notes: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn new(title: impl Into<String>, cfg: &StageConfig) -> Self {
        Self {
            title: title.into(),
            notes: settings_notes(cfg),
            rows: Vec::new(),
        }
    }

    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("# {}\n\n", self.title);
        for n in &self.notes {
            let _ = writeln!(s, "- {n}");
        }
        if !self.notes.is_empty() {
            s.push('\n');
        }
        let _ = writeln!(s, "| Method | {} |", REPORT_COLUMNS.join(" | "));
        let _ = writeln!(s, "|---|{}", "---:|".repeat(REPORT_COLUMNS.len()));
        for r in &self.rows {
            let _ = writeln!(s, "| {} | {} |", r.label, r.cells().join(" | "));
        }
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["method"];
        header.extend(REPORT_COLUMNS);
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.label.clone()];
            rec.extend(r.cells());
            w.write_record(&rec)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
            .map_err(|e| Error::Invariant(e.to_string()))
    }
}

fn settings_notes(cfg: &StageConfig) -> Vec<String> {
    vec![
        format!(
            "optimizer: RMSProp (decay 0.99, eps 1e-8), cosine learning-rate decay, batch {}",
            cfg.batch_size
        ),
        format!(
            "epochs/lr: teacher {}/{:e}, pruning stage {}/{:e}, training stage {}/{:e}",
            cfg.teacher.epochs,
            cfg.teacher.learning_rate,
            cfg.prune.epochs,
            cfg.prune.learning_rate,
            cfg.train.epochs,
            cfg.train.learning_rate
        ),
        format!(
            "seed {}, width multiplier {}, KD sites {}",
            cfg.seed,
            cfg.width_multiplier,
            cfg.eta.join(",")
        ),
        "SAD, Grad and Conn are divided by 1000; MSE is per unknown pixel".to_string(),
    ]
}
