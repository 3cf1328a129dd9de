use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::config::{load_backbone, load_splits, run_with, ExperimentConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::prompt::Layout;
use crate::tokenizer::CodebookMode;

pub const PROMPT_LENGTHS: [usize; 7] = [0, 1, 5, 10, 20, 50, 100];
pub const PROTO_DIMS: [usize; 3] = [64, 128, 256];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Positions,
    PromptLength,
    ProtoDim,
    CodebookMode,
}

impl SweepAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::Positions => "positions",
            SweepAxis::PromptLength => "prompt_length",
            SweepAxis::ProtoDim => "proto_dim",
            SweepAxis::CodebookMode => "codebook_mode",
        }
    }

    /// Standard grid for the axis. Codebook runs need one checkpoint per
    /// mode, so that axis has no default.
    pub fn default_values(&self) -> Vec<String> {
        match self {
            SweepAxis::Positions => Layout::ALL.iter().map(|l| l.to_string()).collect(),
            SweepAxis::PromptLength => PROMPT_LENGTHS.iter().map(|v| v.to_string()).collect(),
            SweepAxis::ProtoDim => PROTO_DIMS.iter().map(|v| v.to_string()).collect(),
            SweepAxis::CodebookMode => Vec::new(),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "positions" | "layout" => Ok(SweepAxis::Positions),
            "prompt_length" | "n_p" => Ok(SweepAxis::PromptLength),
            "proto_dim" | "t" => Ok(SweepAxis::ProtoDim),
            "codebook_mode" | "codebook" => Ok(SweepAxis::CodebookMode),
            other => Err(Error::invalid(format!("unknown sweep axis `{other}`"))),
        }
    }
}

/// One axis value resolved against the base config.
fn apply(base: &ExperimentConfig, axis: SweepAxis, value: &str) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    let number = || {
        value
            .parse::<usize>()
            .map_err(|_| Error::invalid(format!("{axis} value `{value}` is not a count")))
    };
    match axis {
        SweepAxis::Positions => cfg.layout = value.parse()?,
        SweepAxis::PromptLength => cfg.n_p = number()?,
        SweepAxis::ProtoDim => {
            cfg.t = number()?;
            if cfg.t == 0 {
                return Err(Error::invalid("prototype dimension must be positive"));
            }
        }
        SweepAxis::CodebookMode => {
            let (mode, path) = value
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("codebook value `{value}` must be MODE=CHECKPOINT")))?;
            match mode.to_ascii_lowercase().as_str() {
                "pixel" | "feature" => {}
                other => return Err(Error::invalid(format!("unknown codebook mode `{other}`"))),
            }
            cfg.checkpoint_path = PathBuf::from(path);
        }
    }
    cfg.output_dir = base.output_dir.join(axis.as_str()).join(row_label(axis, value));
    cfg.validate()?;
    Ok(cfg)
}

fn row_label(axis: SweepAxis, value: &str) -> String {
    let label = match axis {
        SweepAxis::CodebookMode => value.split('=').next().unwrap_or(value),
        _ => value,
    };
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub accuracy: Option<f64>,
    pub tuned_ratio: Option<f64>,
    pub gflops: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    /// `max - min` accuracy over the rows that finished.
    pub fn spread(&self) -> Option<f64> {
        let acc: Vec<f64> = self.rows.iter().filter_map(|r| r.accuracy).collect();
        let lo = acc.iter().copied().reduce(f64::min)?;
        let hi = acc.iter().copied().reduce(f64::max)?;
        Some(hi - lo)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(f, "{},accuracy,tuned_ratio,gflops,status", self.axis)?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for r in &self.rows {
            let status = match &r.error {
                None => "ok".to_string(),
                Some(e) => format!("\"error: {}\"", e.replace('"', "'")),
            };
            writeln!(
                f,
                "{},{},{},{},{}",
                row_label(self.axis, &r.value),
                opt(r.accuracy),
                opt(r.tuned_ratio),
                opt(r.gflops),
                status
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

/// One run per value, all sharing the base seed; a failing run becomes an
/// error row and the sweep moves on.
pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[String]) -> Result<SweepTable> {
    let (train, test) = load_splits(&base.dataset_paths)?;
    sweep_loaded(base, axis, values, &train, &test)
}

pub fn sweep_loaded(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
    train: &Dataset,
    test: &Dataset,
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::invalid(format!("no values for sweep axis {axis}")));
    }
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let outcome = apply(base, axis, value).and_then(|cfg| {
            let backbone = load_backbone(&cfg.checkpoint_path, Some(&cfg.backbone))?;
            run_with(&cfg, &backbone, train, test)
        });
        rows.push(match outcome {
            Ok(m) => SweepRow {
                value: value.clone(),
                accuracy: Some(m.accuracy),
                tuned_ratio: Some(m.tuned_ratio),
                gflops: Some(m.gflops),
                error: None,
            },
            Err(e) => {
                log::warn!("sweep {axis}={value} failed: {e}");
                SweepRow {
                    value: value.clone(),
                    accuracy: None,
                    tuned_ratio: None,
                    gflops: None,
                    error: Some(e.to_string()),
                }
            }
        });
    }
    let table = SweepTable { axis, rows };
    fs::create_dir_all(&base.output_dir)?;
    table.write_csv(&base.output_dir.join(format!("sweep_{axis}.csv")))?;
    Ok(table)
}

/// Codebook modes named in a sweep value list, for reporting.
pub fn codebook_mode_of(value: &str) -> Option<CodebookMode> {
    match value.split('=').next()?.to_ascii_lowercase().as_str() {
        "pixel" => Some(CodebookMode::Pixel),
        "feature" => Some(CodebookMode::Feature),
        _ => None,
    }
}
