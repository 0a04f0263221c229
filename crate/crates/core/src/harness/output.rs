use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::config::RunConfig;
use super::metrics::MetricsSummary;
use super::run::{ReplicationOutput, ReplicationRecord};
use crate::error::{Error, Result};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const RECORDS_FILE: &str = "records.ndjson";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const WEIGHTS_DIR: &str = "weights";

pub const SUMMARY_HEADER: &str = "scenario_n,rarity,confounding,estimator,method,learner,estimand,valid_pct,bias,mae,spread_rmse,var,rmse_truth,coverage";

/// Formats with six significant digits, without trailing zeros.
pub fn sig6(v: f64) -> String {
    if !v.is_finite() {
        return "NA".into();
    }
    let rounded: f64 = format!("{v:.5e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), sig6)
}

pub fn summary_row(s: &MetricsSummary) -> String {
    let k = &s.key;
    let m = s.moments;
    [
        k.scenario_n.to_string(),
        k.rarity.to_string(),
        k.confounding.to_string(),
        k.estimator.to_string(),
        k.method.to_string(),
        k.learner.map_or_else(|| "none".into(), |l| l.to_string()),
        k.estimand.to_string(),
        sig6(s.valid_pct),
        opt(m.map(|m| m.bias)),
        opt(m.map(|m| m.mae)),
        opt(m.map(|m| m.spread_rmse)),
        opt(m.map(|m| m.var)),
        opt(m.map(|m| m.rmse_truth)),
        opt(s.coverage),
    ]
    .join(",")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn write_summary(path: &Path, summaries: &[MetricsSummary]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "{SUMMARY_HEADER}").map_err(io)?;
    for s in summaries {
        writeln!(w, "{}", summary_row(s)).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_records(path: &Path) -> Result<Vec<ReplicationRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::io(path, std::io::Error::other(e)))?);
    }
    Ok(out)
}

/// The run configuration in replayable `key=value` form, preceded by
/// commented provenance lines.
pub fn manifest_text(cfg: &RunConfig, wall_seconds: f64) -> String {
    let mut s = String::new();
    s.push_str(&format!("# {} {}\n", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")));
    s.push_str(&format!("# wall_time_s={wall_seconds:.3}\n"));
    s.push_str(&cfg.to_text());
    s
}

#[derive(Debug, Clone)]
pub struct OutputPaths {
    pub summary: PathBuf,
    pub records: Option<PathBuf>,
    pub manifest: PathBuf,
}

/// Incremental writer: raw records and weights are appended scenario by
/// scenario; the summary and manifest are written by [`ResultWriter::finish`].
pub struct ResultWriter {
    out: PathBuf,
    cfg: RunConfig,
    records: Option<(PathBuf, BufWriter<File>)>,
}

impl ResultWriter {
    pub fn create(out: &Path, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let records = if cfg.emit_raw {
            let path = out.join(RECORDS_FILE);
            let w = create(&path)?;
            Some((path, w))
        } else {
            None
        };
        if cfg.debug_weights {
            let dir = out.join(WEIGHTS_DIR);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(ResultWriter {
            out: out.to_path_buf(),
            cfg: cfg.clone(),
            records,
        })
    }

    pub fn write_outputs(&mut self, outputs: &[ReplicationOutput]) -> Result<()> {
        if let Some((path, w)) = &mut self.records {
            for r in outputs.iter().flat_map(|o| &o.records) {
                let line = serde_json::to_string(r).map_err(|e| Error::io(&*path, std::io::Error::other(e)))?;
                writeln!(w, "{line}").map_err(|e| Error::io(&*path, e))?;
            }
        }
        if self.cfg.debug_weights {
            for o in outputs {
                write_weights(&self.out.join(WEIGHTS_DIR), o)?;
            }
        }
        Ok(())
    }

    pub fn finish(mut self, summaries: &[MetricsSummary], wall_seconds: f64) -> Result<OutputPaths> {
        let records = match self.records.take() {
            Some((path, mut w)) => {
                w.flush().map_err(|e| Error::io(&path, e))?;
                Some(path)
            }
            None => None,
        };
        let summary = self.out.join(SUMMARY_FILE);
        write_summary(&summary, summaries)?;
        let manifest = self.out.join(MANIFEST_FILE);
        fs::write(&manifest, manifest_text(&self.cfg, wall_seconds)).map_err(|e| Error::io(&manifest, e))?;
        Ok(OutputPaths {
            summary,
            records,
            manifest,
        })
    }
}

fn write_weights(dir: &Path, o: &ReplicationOutput) -> Result<()> {
    let Some(first) = o.records.first() else { return Ok(()) };
    if o.weights.is_empty() {
        return Ok(());
    }
    let path = dir.join(format!("{}_rep{}.csv", first.scenario, first.replication));
    let mut w = create(&path)?;
    let io = |e| Error::io(&path, e);
    writeln!(w, "index,method,estimand,weight,kept,source").map_err(io)?;
    for (label, weights) in &o.weights {
        for (i, (v, k)) in weights.values.iter().zip(&weights.kept).enumerate() {
            writeln!(w, "{i},{},{},{v},{},{label}", weights.method, weights.estimand, u8::from(*k)).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Writes the summary table, the raw records (when `emit_raw`), per-replication
/// weights (when `debug_weights`) and the manifest under `out` in one call.
pub fn emit_results(
    out: &Path,
    cfg: &RunConfig,
    summaries: &[MetricsSummary],
    outputs: &[ReplicationOutput],
    wall_seconds: f64,
) -> Result<OutputPaths> {
    let mut w = ResultWriter::create(out, cfg)?;
    w.write_outputs(outputs)?;
    w.finish(summaries, wall_seconds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(0.065), "0.065");
        assert_eq!(sig6(1.0 / 3.0), "0.333333");
        assert_eq!(sig6(123456789.0), "123457000");
        assert_eq!(sig6(-2.5e-7), "-0.00000025");
        assert_eq!(sig6(f64::NAN), "NA");
    }
}
