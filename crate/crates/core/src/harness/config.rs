use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::balancers::{Estimand, IptwPostproc, Method};
use crate::error::{Error, Result};
use crate::estimators::Estimator;
use crate::learners::LearnerKind;
use crate::scenario::{Confounding, Rarity, ScenarioSpec};

/// Environment variable holding the default worker count.
pub const WORKERS_ENV: &str = "COVBAL_WORKERS";

pub const DEFAULT_REPLICATIONS: usize = 5000;
pub const DEFAULT_SEED: u64 = 20240101;

/// Everything a run needs. Scenarios are the product `ns x rarities x
/// confoundings`, or the full 36-cell grid when `grid` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub grid: bool,
    pub ns: Vec<usize>,
    pub rarities: Vec<Rarity>,
    pub confoundings: Vec<Confounding>,
    pub replications: usize,
    pub methods: Vec<Method>,
    pub learners: Vec<LearnerKind>,
    pub estimators: Vec<Estimator>,
    pub estimands: Vec<Estimand>,
    pub iptw_postproc: IptwPostproc,
    pub master_seed: u64,
    pub workers: usize,
    pub output_path: Option<PathBuf>,
    pub emit_raw: bool,
    /// Fixed TLF hyperparameters; cross-validated per scenario when `None`.
    pub tlf_lambda: Option<f64>,
    pub tlf_gamma: Option<f64>,
    /// Write per-replication weight vectors under `<out>/weights/`.
    pub debug_weights: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            grid: false,
            ns: vec![500],
            rarities: vec![Rarity::Common],
            confoundings: vec![Confounding::Low],
            replications: DEFAULT_REPLICATIONS,
            methods: Method::ALL.to_vec(),
            learners: LearnerKind::ALL.to_vec(),
            estimators: Estimator::ALL.to_vec(),
            estimands: Estimand::ALL.to_vec(),
            iptw_postproc: IptwPostproc::Trim99,
            master_seed: DEFAULT_SEED,
            workers: workers_from_env().unwrap_or(1),
            output_path: None,
            emit_raw: false,
            tlf_lambda: None,
            tlf_gamma: None,
            debug_weights: false,
        }
    }
}

fn workers_from_env() -> Option<usize> {
    std::env::var(WORKERS_ENV).ok()?.trim().parse().ok().filter(|&w| w > 0)
}

fn parse_list<T: FromStr<Err = Error>>(value: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for item in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        out.push(item.parse()?);
    }
    if out.is_empty() {
        return Err(Error::Config(format!("empty list '{value}'")));
    }
    Ok(out)
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{value}' for {key}"))),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one `key=value` setting. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key.trim() {
            "grid" => self.grid = parse_bool(key, value)?,
            "n" => {
                self.ns = value
                    .split(',')
                    .map(|v| parse_num::<usize>("n", v))
                    .collect::<Result<Vec<_>>>()?
            }
            "rarity" => self.rarities = parse_list(value)?,
            "confounding" => self.confoundings = parse_list(value)?,
            "reps" => self.replications = parse_num(key, value)?,
            "methods" => self.methods = parse_list(value)?,
            "learners" => self.learners = parse_list(value)?,
            "estimators" => self.estimators = parse_list(value)?,
            "estimands" => self.estimands = parse_list(value)?,
            "postproc" => self.iptw_postproc = value.parse()?,
            "seed" => self.master_seed = parse_num(key, value)?,
            "workers" => self.workers = parse_num(key, value)?,
            "out" => self.output_path = Some(PathBuf::from(value.trim())),
            "emit_raw" => self.emit_raw = parse_bool(key, value)?,
            "tlf_lambda" => self.tlf_lambda = Some(parse_num(key, value)?),
            "tlf_gamma" => self.tlf_gamma = Some(parse_num(key, value)?),
            "debug_weights" => self.debug_weights = parse_bool(key, value)?,
            other => return Err(Error::Config(format!("unknown configuration key '{other}'"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines; blank lines and `#` comments are ignored.
    /// Scenario keys may not be combined with `grid=true`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut scenario_keys = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let key = key.trim();
            scenario_keys |= matches!(key, "n" | "rarity" | "confounding");
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip_prefix(&e))))?;
        }
        if self.grid && scenario_keys {
            return Err(Error::Config("grid=true conflicts with n/rarity/confounding".into()));
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        let empty = [
            ("methods", self.methods.is_empty()),
            ("learners", self.learners.is_empty()),
            ("estimators", self.estimators.is_empty()),
            ("estimands", self.estimands.is_empty()),
            ("n", !self.grid && self.ns.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::Config(format!("{name} selection is empty")));
        }
        if self.tlf_lambda.is_some() != self.tlf_gamma.is_some() {
            return Err(Error::Config("tlf_lambda and tlf_gamma must be given together".into()));
        }
        if let Some(l) = self.tlf_lambda {
            if !(l >= 0.0) {
                return Err(Error::Config("tlf_lambda must be nonnegative".into()));
            }
        }
        if let Some(g) = self.tlf_gamma {
            if !(g > 0.0) {
                return Err(Error::Config("tlf_gamma must be positive".into()));
            }
        }
        self.scenarios().map(|_| ())
    }

    /// The selected scenarios in grid order (size, rarity, confounding).
    pub fn scenarios(&self) -> Result<Vec<ScenarioSpec>> {
        if self.grid {
            return Ok(ScenarioSpec::grid(self.master_seed));
        }
        let mut out = Vec::new();
        for &n in &self.ns {
            for &r in &self.rarities {
                for &c in &self.confoundings {
                    out.push(ScenarioSpec::new(r, c, n, self.master_seed)?);
                }
            }
        }
        Ok(out)
    }

    /// Serializes to the `key=value` format read by [`RunConfig::from_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if self.grid {
            writeln!(s, "grid=true").unwrap();
        } else {
            writeln!(s, "n={}", join(&self.ns)).unwrap();
            writeln!(s, "rarity={}", join(&self.rarities)).unwrap();
            writeln!(s, "confounding={}", join(&self.confoundings)).unwrap();
        }
        writeln!(s, "reps={}", self.replications).unwrap();
        writeln!(s, "methods={}", join(&self.methods)).unwrap();
        writeln!(s, "learners={}", join(&self.learners)).unwrap();
        writeln!(s, "estimators={}", join(&self.estimators)).unwrap();
        writeln!(s, "estimands={}", join(&self.estimands)).unwrap();
        writeln!(s, "postproc={}", self.iptw_postproc).unwrap();
        writeln!(s, "seed={}", self.master_seed).unwrap();
        writeln!(s, "workers={}", self.workers).unwrap();
        if let Some(p) = &self.output_path {
            writeln!(s, "out={}", p.display()).unwrap();
        }
        writeln!(s, "emit_raw={}", self.emit_raw).unwrap();
        if let (Some(l), Some(g)) = (self.tlf_lambda, self.tlf_gamma) {
            writeln!(s, "tlf_lambda={l}").unwrap();
            writeln!(s, "tlf_gamma={g}").unwrap();
        }
        writeln!(s, "debug_weights={}", self.debug_weights).unwrap();
        s
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
