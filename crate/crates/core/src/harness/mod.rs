//! Scenario runner, metric aggregation, result files and the command line.

pub mod cli;
pub mod config;
pub mod metrics;
pub mod output;
pub mod run;

use std::time::Instant;

use log::info;

pub use config::RunConfig;
pub use metrics::{coverage_rate, moments, summarize, CellKey, MetricsSummary, Moments};
pub use output::{emit_results, OutputPaths, ResultWriter};
pub use run::{combinations, records_per_replication, run_replication, run_scenario, ReasonCode, ReplicationOutput, ReplicationRecord};

use crate::balancers::TlfCache;
use crate::error::{Error, Result};

/// The true effect in every simulated scenario.
pub const TRUTH: f64 = 0.0;

/// Runs every scenario in `cfg` and returns all replication outputs in
/// (scenario, replication) order.
pub fn run_outputs(cfg: &RunConfig) -> Result<Vec<ReplicationOutput>> {
    cfg.validate()?;
    let scenarios = cfg.scenarios()?;
    let cache = TlfCache::new();
    let mut all = Vec::new();
    for (i, spec) in scenarios.iter().enumerate() {
        info!("scenario {}/{}: {}", i + 1, scenarios.len(), spec.id());
        all.extend(run_scenario(cfg, spec, &cache)?);
    }
    Ok(all)
}

/// Runs, summarizes and writes results to `cfg.output_path`, one scenario at
/// a time so that raw records never accumulate in memory.
pub fn run_all(cfg: &RunConfig) -> Result<OutputPaths> {
    let out = cfg
        .output_path
        .clone()
        .ok_or_else(|| Error::Config("no output directory configured".into()))?;
    cfg.validate()?;
    let start = Instant::now();
    let scenarios = cfg.scenarios()?;
    let cache = TlfCache::new();
    let mut writer = ResultWriter::create(&out, cfg)?;
    let mut summaries = Vec::new();
    for (i, spec) in scenarios.iter().enumerate() {
        info!("scenario {}/{}: {}", i + 1, scenarios.len(), spec.id());
        let outputs = run_scenario(cfg, spec, &cache)?;
        writer.write_outputs(&outputs)?;
        let records: Vec<ReplicationRecord> = outputs.into_iter().flat_map(|o| o.records).collect();
        summaries.extend(summarize(&records, TRUTH));
    }
    summaries.sort_by(|a, b| a.key.cmp(&b.key));
    writer.finish(&summaries, start.elapsed().as_secs_f64())
}
