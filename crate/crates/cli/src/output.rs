use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use bico_core::experiment::ModelReport;
use bico_core::train::{EvalReport, StepRecord};
use serde::Serialize;

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

#[derive(Serialize)]
struct EvalLine<'a> {
    eval: &'a str,
    exact_match: f64,
    mean_likelihood: f64,
    items: usize,
}

/// Line-delimited JSON: one line per training step, then one per
/// evaluation split. The first write error is kept and reported by
/// [`MetricsWriter::finish`], so records can be written from callbacks.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            error: None,
        })
    }

    fn line<T: Serialize>(&mut self, value: &T) {
        if self.error.is_some() {
            return;
        }
        let result = serde_json::to_writer(&mut self.out, value)
            .map_err(std::io::Error::from)
            .and_then(|()| self.out.write_all(b"\n"));
        if let Err(e) = result {
            self.error = Some(e);
        }
    }

    pub fn record(&mut self, step: &StepRecord) {
        self.line(step);
    }

    pub fn eval(&mut self, split: &str, report: &EvalReport) {
        self.line(&EvalLine {
            eval: split,
            exact_match: report.exact_match_rate,
            mean_likelihood: report.mean_likelihood,
            items: report.items.len(),
        });
    }

    pub fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e).with_context(|| format!("writing {}", self.path.display()));
        }
        self.out
            .flush()
            .with_context(|| format!("writing {}", self.path.display()))
    }

    /// Steps and both evaluations of a finished model.
    pub fn write_all(path: &Path, report: &ModelReport) -> Result<()> {
        let mut w = Self::create(path)?;
        for r in &report.metrics {
            w.record(r);
        }
        w.eval("paraphrase", &report.paraphrase);
        w.eval("reverse", &report.reverse);
        w.finish()
    }
}
