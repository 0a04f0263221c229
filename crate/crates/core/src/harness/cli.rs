use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;
use log::{error, info};

use super::config::RunConfig;
use super::run_all;
use crate::error::Error;

/// Monte Carlo benchmark of covariate-balancing weights.
#[derive(Debug, Parser)]
#[command(name = "covbal", version)]
struct Cli {
    /// Plain-text key=value configuration file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sample size(s), comma separated.
    #[arg(long)]
    n: Option<String>,
    /// common, rare, very_rare (comma separated).
    #[arg(long)]
    rarity: Option<String>,
    /// low, moderate, high (comma separated).
    #[arg(long)]
    confounding: Option<String>,
    /// Run all 36 scenarios of the benchmark grid.
    #[arg(long, conflicts_with_all = ["n", "rarity", "confounding"])]
    grid: bool,
    #[arg(long)]
    reps: Option<String>,
    /// iptw, eb, kom, tlf.
    #[arg(long)]
    methods: Option<String>,
    /// oracle, logistic_well, logistic_mis.
    #[arg(long)]
    learners: Option<String>,
    /// WA, AWA, OLS.
    #[arg(long)]
    estimators: Option<String>,
    /// ATE, ATT.
    #[arg(long)]
    estimands: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    /// IPTW post-processing: trim99, hajek or none.
    #[arg(long)]
    postproc: Option<String>,
    /// Worker threads (default from COVBAL_WORKERS, else 1).
    #[arg(long)]
    workers: Option<String>,
    /// Also write per-replication records as newline-delimited JSON.
    #[arg(long)]
    emit_raw: bool,
    /// Write per-replication weight vectors.
    #[arg(long)]
    debug_weights: bool,
    #[arg(long)]
    tlf_lambda: Option<String>,
    #[arg(long)]
    tlf_gamma: Option<String>,
}

impl Cli {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let pairs: [(&'static str, &Option<String>); 14] = [
            ("n", &self.n),
            ("rarity", &self.rarity),
            ("confounding", &self.confounding),
            ("reps", &self.reps),
            ("methods", &self.methods),
            ("learners", &self.learners),
            ("estimators", &self.estimators),
            ("estimands", &self.estimands),
            ("seed", &self.seed),
            ("out", &self.out),
            ("postproc", &self.postproc),
            ("workers", &self.workers),
            ("tlf_lambda", &self.tlf_lambda),
            ("tlf_gamma", &self.tlf_gamma),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                out.push((k, v.clone()));
            }
        }
        if self.grid {
            out.push(("grid", "true".into()));
        }
        if self.emit_raw {
            out.push(("emit_raw", "true".into()));
        }
        if self.debug_weights {
            out.push(("debug_weights", "true".into()));
        }
        out
    }

    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p).map_err(|e| match e {
                Error::Io { .. } => Error::Config(e.to_string()),
                other => other,
            })?,
            None => RunConfig::default(),
        };
        let overrides = self.overrides();
        let scenario_flag = overrides.iter().any(|(k, _)| matches!(*k, "n" | "rarity" | "confounding"));
        if cfg.grid && scenario_flag {
            return Err(Error::Config("the configuration selects the full grid; --n/--rarity/--confounding conflict".into()));
        }
        for (k, v) in &overrides {
            cfg.set(k, v)?;
        }
        if cfg.output_path.is_none() {
            return Err(Error::Config("an output directory is required (--out)".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `args` (program name first), runs the configured scenarios and
/// writes results. Returns the process exit code: 0 on success, 2 on a usage
/// or configuration error, 1 on a runtime failure.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match cli.resolve() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("covbal: {e}");
            return 2;
        }
    };
    match run_all(&cfg) {
        Ok(paths) => {
            info!("summary written to {}", paths.summary.display());
            0
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("covbal: {e}");
            2
        }
        Err(e) => {
            error!("{e}");
            eprintln!("covbal: {e}");
            1
        }
    }
}
