//! Metrics log records (one structured-text record per line) and the
//! multi-seed comparison report.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::model::InputKind;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("bad metrics record at line {line}: {text:?}")]
    BadRecord { line: usize, text: String },
    #[error("no evaluation record found in {0}")]
    NoEvaluation(String),
    #[error("missing runs: {0}")]
    MissingRuns(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// One training-step record; evaluation steps also carry validation
/// metrics. Floats are written in shortest round-trip form, so a parsed log
/// reproduces the run bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub tokens_seen: u64,
    pub loss: f32,
    pub lr: f64,
    pub grad_norm: f32,
    pub val: Option<(f64, f64)>,
}

impl StepRecord {
    pub fn to_line(&self) -> String {
        let mut line = format!(
            "step={} tokens_seen={} loss={} lr={} grad_norm={}",
            self.step, self.tokens_seen, self.loss, self.lr, self.grad_norm
        );
        if let Some((val_loss, val_ppl)) = self.val {
            line.push_str(&format!(" val_loss={val_loss} val_ppl={val_ppl}"));
        }
        line
    }

    pub fn parse(text: &str) -> Option<StepRecord> {
        let mut fields: HashMap<&str, &str> = HashMap::new();
        for part in text.split_whitespace() {
            let (key, value) = part.split_once('=')?;
            fields.insert(key, value);
        }
        let val = match (fields.get("val_loss"), fields.get("val_ppl")) {
            (Some(l), Some(p)) => Some((l.parse().ok()?, p.parse().ok()?)),
            (None, None) => None,
            _ => return None,
        };
        Some(StepRecord {
            step: fields.get("step")?.parse().ok()?,
            tokens_seen: fields.get("tokens_seen")?.parse().ok()?,
            loss: fields.get("loss")?.parse().ok()?,
            lr: fields.get("lr")?.parse().ok()?,
            grad_norm: fields.get("grad_norm")?.parse().ok()?,
            val,
        })
    }
}

pub fn write_metrics_file(path: &Path, records: &[StepRecord]) -> Result<(), MetricsError> {
    let io_err = |source| MetricsError::Io { path: path.display().to_string(), source };
    let mut w = BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    for record in records {
        writeln!(w, "{}", record.to_line()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub fn read_metrics_file(path: &Path) -> Result<Vec<StepRecord>, MetricsError> {
    let io_err = |source| MetricsError::Io { path: path.display().to_string(), source };
    let reader = BufReader::new(std::fs::File::open(path).map_err(io_err)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let record = StepRecord::parse(&line).ok_or_else(|| MetricsError::BadRecord {
            line: i + 1,
            text: line.clone(),
        })?;
        records.push(record);
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Comparison report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub final_val_loss: f64,
    pub final_val_ppl: f64,
    pub tokens_seen: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantReport {
    pub input_kind: InputKind,
    pub per_seed: Vec<SeedResult>,
    pub mean_val_loss: f64,
    pub mean_val_ppl: f64,
    /// `(max - min) / mean` of per-seed validation perplexity; 0 with a
    /// warning for a single seed.
    pub relative_seed_range: f64,
    pub single_seed: bool,
}

/// Arithmetic mean across seeds plus the relative seed range.
pub fn summarize_variant(input_kind: InputKind, per_seed: Vec<SeedResult>) -> VariantReport {
    assert!(!per_seed.is_empty());
    let n = per_seed.len() as f64;
    let mean_val_loss = per_seed.iter().map(|r| r.final_val_loss).sum::<f64>() / n;
    let mean_val_ppl = per_seed.iter().map(|r| r.final_val_ppl).sum::<f64>() / n;
    let max = per_seed.iter().map(|r| r.final_val_ppl).fold(f64::NEG_INFINITY, f64::max);
    let min = per_seed.iter().map(|r| r.final_val_ppl).fold(f64::INFINITY, f64::min);
    let single_seed = per_seed.len() == 1;
    let relative_seed_range = if single_seed { 0.0 } else { (max - min) / mean_val_ppl };
    VariantReport {
        input_kind,
        per_seed,
        mean_val_loss,
        mean_val_ppl,
        relative_seed_range,
        single_seed,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub variants: Vec<VariantReport>,
}

/// Published full-scale reference numbers, displayed for context only and
/// never computed at desk scale.
pub const FULL_SCALE_REFERENCE: [(&str, f64, f64, f64); 3] = [
    ("learned (full-scale ref)", 17.1e9, 2.44, 0.048),
    ("fixed_code (full-scale ref)", 17.1e9, 2.36, 0.046),
    ("affine_recoded (full-scale ref)", 16.3e9, 2.39, 0.045),
];

impl RunReport {
    pub fn variant(&self, kind: InputKind) -> Option<&VariantReport> {
        self.variants.iter().find(|v| v.input_kind == kind)
    }

    /// Plain-text table: variant, tokens/seed, val loss, val ppl mean,
    /// relative seed range.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<32} {:>14} {:>10} {:>14} {:>16}\n",
            "variant", "tokens/seed", "val loss", "val ppl (mean)", "rel. seed range"
        ));
        out.push_str(&"-".repeat(90));
        out.push('\n');
        for v in &self.variants {
            let tokens = v.per_seed.first().map(|r| r.tokens_seen).unwrap_or(0);
            out.push_str(&format!(
                "{:<32} {:>14} {:>10.4} {:>14.4} {:>15.2}%{}\n",
                v.input_kind.as_str(),
                tokens,
                v.mean_val_loss,
                v.mean_val_ppl,
                v.relative_seed_range * 100.0,
                if v.single_seed { "  (single seed; range undefined)" } else { "" }
            ));
        }
        out.push_str(&"-".repeat(90));
        out.push('\n');
        for (name, tokens, ppl, range) in FULL_SCALE_REFERENCE {
            out.push_str(&format!(
                "{:<32} {:>14} {:>10} {:>14.2} {:>15.1}%\n",
                name,
                format!("{:.1e}", tokens),
                "-",
                ppl,
                range * 100.0
            ));
        }
        out.push_str("(reference rows are published full-scale results, not computed here)\n");
        out
    }
}

/// Builds the report for `kinds` by reading each seed's metrics log from
/// `dir` (layout: `<input_kind>-seed<seed>.metrics`). The final value of a
/// run is its last evaluation record.
pub fn report_from_dir(
    dir: &Path,
    kinds: &[InputKind],
    seeds: &[u64],
) -> Result<RunReport, MetricsError> {
    let mut variants = Vec::new();
    for &kind in kinds {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let path = dir.join(metrics_file_name(kind, seed));
            if !path.exists() {
                return Err(MetricsError::MissingRuns(format!(
                    "expected {} for variant {} seed {seed}",
                    path.display(),
                    kind.as_str()
                )));
            }
            let records = read_metrics_file(&path)?;
            let last_eval = records
                .iter()
                .rev()
                .find(|r| r.val.is_some())
                .ok_or_else(|| MetricsError::NoEvaluation(path.display().to_string()))?;
            let (val_loss, val_ppl) = last_eval.val.unwrap();
            per_seed.push(SeedResult {
                seed,
                final_val_loss: val_loss,
                final_val_ppl: val_ppl,
                tokens_seen: last_eval.tokens_seen,
            });
        }
        variants.push(summarize_variant(kind, per_seed));
    }
    Ok(RunReport { variants })
}

pub fn metrics_file_name(kind: InputKind, seed: u64) -> String {
    format!("{}-seed{}.metrics", kind.as_str(), seed)
}

pub fn checkpoint_file_name(kind: InputKind, seed: u64) -> String {
    format!("{}-seed{}.ckpt", kind.as_str(), seed)
}
