use std::time::Instant;

use log::{debug, info, warn};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::balancers::{
    energy_balance, iptw_weights, kom_weights, select_hyperparameters, tlf_weights, BalanceWeights, Estimand,
    KomOptions, Method, TlfCache, TlfGrid, TlfHyper,
};
use crate::error::{Error, Result};
use crate::estimators::{estimate, Estimator, ResponseSurfaces};
use crate::learners::{fit_learner, LearnerKind, Target};
use crate::qp::QpStatus;
use crate::scenario::{crude_estimate, generate_dataset, replication_seed, Confounding, Rarity, ScenarioSpec, SimulatedDataset};

/// Why a combination produced no valid estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonCode {
    /// Estimate computed but outside [-1, 1] or not finite.
    OutOfRange,
    SolverMaxIter,
    SolverInfeasible,
    /// The nuisance learner could not be fitted.
    LearnerFailure,
    /// The balancing method returned an error.
    BalancerFailure,
    /// The estimator returned an error (e.g. an arm trimmed away).
    EstimatorFailure,
    DataGeneration,
}

impl ReasonCode {
    pub fn label(self) -> &'static str {
        match self {
            ReasonCode::OutOfRange => "out_of_range",
            ReasonCode::SolverMaxIter => "solver_max_iter",
            ReasonCode::SolverInfeasible => "solver_infeasible",
            ReasonCode::LearnerFailure => "learner_failure",
            ReasonCode::BalancerFailure => "balancer_failure",
            ReasonCode::EstimatorFailure => "estimator_failure",
            ReasonCode::DataGeneration => "data_generation",
        }
    }
}

/// One (method, learner, estimator, estimand) result on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub scenario: String,
    pub n: usize,
    pub rarity: Rarity,
    pub confounding: Confounding,
    pub replication: usize,
    pub method: Method,
    /// Nuisance learner; absent for balancing-only combinations.
    pub learner: Option<LearnerKind>,
    pub estimator: Estimator,
    pub estimand: Estimand,
    pub value: Option<f64>,
    pub se: Option<f64>,
    pub ci95: Option<(f64, f64)>,
    pub valid: bool,
    pub reason: Option<ReasonCode>,
    pub solver_status: Option<QpStatus>,
    pub kkt_residual: Option<f64>,
    pub wall_ms: f64,
}

impl ReplicationRecord {
    /// Sort key used for deterministic ordering.
    pub fn key(&self) -> (usize, Method, Option<LearnerKind>, Estimator, Estimand) {
        (self.replication, self.method, self.learner, self.estimator, self.estimand)
    }
}

/// The (method, learner, estimator) triples run for each estimand.
///
/// IPTW crosses every estimator with every learner (the learner supplies the
/// propensity and, for AWA, the surfaces). The other methods run WA and OLS
/// once without a learner and AWA once per learner.
pub fn combinations(cfg: &RunConfig) -> Vec<(Method, Option<LearnerKind>, Estimator)> {
    let mut out = Vec::new();
    for &m in &cfg.methods {
        for &e in &cfg.estimators {
            if m == Method::Iptw || e == Estimator::Awa {
                for &l in &cfg.learners {
                    out.push((m, Some(l), e));
                }
            } else {
                out.push((m, None, e));
            }
        }
    }
    out
}

/// Records produced per replication.
pub fn records_per_replication(cfg: &RunConfig) -> usize {
    combinations(cfg).len() * cfg.estimands.len()
}

/// Output of one replication: its records plus, when requested, the weights.
#[derive(Debug, Clone)]
pub struct ReplicationOutput {
    pub records: Vec<ReplicationRecord>,
    pub weights: Vec<(String, BalanceWeights)>,
    pub crude: Option<f64>,
}

fn surfaces_for(kind: LearnerKind, spec: &ScenarioSpec, d: &SimulatedDataset) -> Result<ResponseSurfaces> {
    if kind == LearnerKind::Oracle {
        return ResponseSurfaces::new(d.mu_true.clone(), d.mu_true.clone(), kind);
    }
    let mut mu = Vec::with_capacity(2);
    for arm in [false, true] {
        let idx: Vec<usize> = (0..d.n()).filter(|&i| d.t[i] == arm).collect();
        let xs = DMatrix::from_fn(idx.len(), d.x.ncols(), |r, c| d.x[(idx[r], c)]);
        let ys: Vec<f64> = idx.iter().map(|&i| d.y[i]).collect();
        let learner = fit_learner(kind, Target::Outcome, spec, &xs, &ys)?;
        mu.push(learner.predict(&d.x)?);
    }
    let mu1 = mu.pop().expect("two arms");
    let mu0 = mu.pop().expect("two arms");
    ResponseSurfaces::new(mu0, mu1, kind)
}

fn propensity_for(kind: LearnerKind, spec: &ScenarioSpec, d: &SimulatedDataset) -> Result<Vec<f64>> {
    if kind == LearnerKind::Oracle {
        return Ok(d.e_true.clone());
    }
    let labels: Vec<f64> = d.t.iter().map(|&t| f64::from(u8::from(t))).collect();
    fit_learner(kind, Target::Propensity, spec, &d.x, &labels)?.predict(&d.x)
}

/// TLF hyperparameters for a scenario: fixed from the config, or selected by
/// cross-validation on replication 0 and cached per (scenario, estimand).
pub fn tlf_hyper(cfg: &RunConfig, spec: &ScenarioSpec, estimand: Estimand, cache: &TlfCache) -> Result<TlfHyper> {
    if let (Some(lambda), Some(gamma)) = (cfg.tlf_lambda, cfg.tlf_gamma) {
        return Ok(TlfHyper::Fixed { lambda, gamma });
    }
    let (lambda, gamma) = cache.get_or_select(&spec.id(), estimand, || {
        let d = dataset_for(cfg, spec, 0)?;
        let pick = select_hyperparameters(&d.x, &d.t, estimand, &TlfGrid::default())?;
        info!("{} {estimand}: TLF cross-validation chose lambda={} gamma={}", spec.id(), pick.0, pick.1);
        Ok(pick)
    })?;
    Ok(TlfHyper::Fixed { lambda, gamma })
}

fn dataset_for(cfg: &RunConfig, spec: &ScenarioSpec, replication: usize) -> Result<SimulatedDataset> {
    let seed = replication_seed(cfg.master_seed, spec.stream_key(), replication as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_dataset(spec, &mut rng)
}

type WeightEntry = ((Method, Option<LearnerKind>), std::result::Result<BalanceWeights, ReasonCode>, f64);

struct Cell<'a> {
    spec: &'a ScenarioSpec,
    replication: usize,
}

impl Cell<'_> {
    fn record(
        &self,
        method: Method,
        learner: Option<LearnerKind>,
        estimator: Estimator,
        estimand: Estimand,
    ) -> ReplicationRecord {
        ReplicationRecord {
            scenario: self.spec.id(),
            n: self.spec.n,
            rarity: self.spec.rarity,
            confounding: self.spec.confounding,
            replication: self.replication,
            method,
            learner,
            estimator,
            estimand,
            value: None,
            se: None,
            ci95: None,
            valid: false,
            reason: None,
            solver_status: None,
            kkt_residual: None,
            wall_ms: 0.0,
        }
    }
}

/// Runs every configured combination on one replication. Failures become
/// invalid records with a reason code.
pub fn run_replication(
    cfg: &RunConfig,
    spec: &ScenarioSpec,
    replication: usize,
    tlf: &[(Estimand, Result<TlfHyper>)],
) -> ReplicationOutput {
    let cell = Cell { spec, replication };
    let combos = combinations(cfg);
    let dataset = match dataset_for(cfg, spec, replication) {
        Ok(d) => d,
        Err(e) => {
            warn!("{} replication {replication}: {e}", spec.id());
            let mut records = Vec::new();
            for &estimand in &cfg.estimands {
                for &(m, l, e) in &combos {
                    let mut r = cell.record(m, l, e, estimand);
                    r.reason = Some(ReasonCode::DataGeneration);
                    records.push(r);
                }
            }
            return ReplicationOutput {
                records,
                weights: vec![],
                crude: None,
            };
        }
    };
    let d = &dataset;
    let crude = crude_estimate(&d.t, &d.y).ok();

    let needs_awa = cfg.estimators.contains(&Estimator::Awa);
    let surfaces: Vec<(LearnerKind, Result<ResponseSurfaces>)> = if needs_awa {
        cfg.learners.iter().map(|&k| (k, surfaces_for(k, spec, d))).collect()
    } else {
        vec![]
    };
    let propensities: Vec<(LearnerKind, Result<Vec<f64>>)> = if cfg.methods.contains(&Method::Iptw) {
        cfg.learners.iter().map(|&k| (k, propensity_for(k, spec, d))).collect()
    } else {
        vec![]
    };
    let surface_of = |k: LearnerKind| surfaces.iter().find(|(kk, _)| *kk == k).map(|(_, s)| s);

    let mut records = Vec::with_capacity(combos.len() * cfg.estimands.len());
    let mut exported = Vec::new();
    for &estimand in &cfg.estimands {
        // weights are computed once per (method, learner-for-propensity)
        let mut cache: Vec<WeightEntry> = Vec::new();
        for &(method, learner, estimator) in &combos {
            let weight_key = (method, if method == Method::Iptw { learner } else { None });
            if !cache.iter().any(|(k, _, _)| *k == weight_key) {
                let start = Instant::now();
                let w = compute_weights(cfg, method, weight_key.1, estimand, d, &propensities, tlf);
                let ms = start.elapsed().as_secs_f64() * 1e3;
                if cfg.debug_weights {
                    if let Ok(w) = &w {
                        let label = match weight_key.1 {
                            Some(l) => format!("{method}_{l}_{estimand}"),
                            None => format!("{method}_{estimand}"),
                        };
                        exported.push((label, w.clone()));
                    }
                }
                cache.push((weight_key, w, ms));
            }
            let (_, weights, weight_ms) = cache.iter().find(|(k, _, _)| *k == weight_key).expect("cached");

            let mut rec = cell.record(method, learner, estimator, estimand);
            let start = Instant::now();
            match weights {
                Err(reason) => rec.reason = Some(*reason),
                Ok(w) => {
                    rec.solver_status = w.diagnostics.solver_status;
                    rec.kkt_residual = w.diagnostics.kkt_residual;
                    let outcome = match w.diagnostics.solver_status {
                        Some(QpStatus::MaxIter) => Err(ReasonCode::SolverMaxIter),
                        Some(QpStatus::Infeasible) => Err(ReasonCode::SolverInfeasible),
                        _ => match (estimator, learner) {
                            (Estimator::Awa, Some(l)) => match surface_of(l) {
                                Some(Ok(s)) => estimate(estimator, &d.y, &d.t, w, Some(s))
                                    .map_err(|_| ReasonCode::EstimatorFailure),
                                _ => Err(ReasonCode::LearnerFailure),
                            },
                            _ => estimate(estimator, &d.y, &d.t, w, None).map_err(|_| ReasonCode::EstimatorFailure),
                        },
                    };
                    match outcome {
                        Ok(est) => {
                            rec.value = Some(est.value);
                            rec.se = est.se;
                            rec.ci95 = est.ci95;
                            rec.valid = est.valid;
                            if !est.valid {
                                rec.reason = Some(ReasonCode::OutOfRange);
                            }
                        }
                        Err(reason) => rec.reason = Some(reason),
                    }
                }
            }
            rec.wall_ms = weight_ms + start.elapsed().as_secs_f64() * 1e3;
            records.push(rec);
        }
    }
    ReplicationOutput {
        records,
        weights: exported,
        crude,
    }
}

fn compute_weights(
    cfg: &RunConfig,
    method: Method,
    learner: Option<LearnerKind>,
    estimand: Estimand,
    d: &SimulatedDataset,
    propensities: &[(LearnerKind, Result<Vec<f64>>)],
    tlf: &[(Estimand, Result<TlfHyper>)],
) -> std::result::Result<BalanceWeights, ReasonCode> {
    let balancer_failure = |e: Error| {
        debug!("{method} {estimand}: {e}");
        ReasonCode::BalancerFailure
    };
    match method {
        Method::Iptw => {
            let kind = learner.expect("IPTW runs with a learner");
            let e = propensities
                .iter()
                .find(|(k, _)| *k == kind)
                .map(|(_, e)| e)
                .expect("propensity computed for every learner");
            match e {
                Ok(e) => iptw_weights(e, &d.t, estimand, cfg.iptw_postproc).map_err(balancer_failure),
                Err(err) => {
                    debug!("{kind} propensity: {err}");
                    Err(ReasonCode::LearnerFailure)
                }
            }
        }
        Method::Eb => energy_balance(&d.x, &d.t, estimand).map_err(balancer_failure),
        Method::Kom => kom_weights(&d.x, &d.t, &d.y, estimand, &KomOptions::default()).map_err(balancer_failure),
        Method::Tlf => match tlf.iter().find(|(e, _)| *e == estimand).map(|(_, h)| h) {
            Some(Ok(h)) => tlf_weights(&d.x, &d.t, estimand, *h, &TlfGrid::default()).map_err(balancer_failure),
            _ => Err(ReasonCode::BalancerFailure),
        },
    }
}

/// All replications of one scenario, ordered by replication index regardless
/// of the worker count.
pub fn run_scenario(cfg: &RunConfig, spec: &ScenarioSpec, cache: &TlfCache) -> Result<Vec<ReplicationOutput>> {
    cfg.validate()?;
    let tlf: Vec<(Estimand, Result<TlfHyper>)> = if cfg.methods.contains(&Method::Tlf) {
        cfg.estimands.iter().map(|&e| (e, tlf_hyper(cfg, spec, e, cache))).collect()
    } else {
        vec![]
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let start = Instant::now();
    let outputs: Vec<ReplicationOutput> = pool.install(|| {
        (0..cfg.replications)
            .into_par_iter()
            .map(|r| run_replication(cfg, spec, r, &tlf))
            .collect()
    });
    let crude: Vec<f64> = outputs.iter().filter_map(|o| o.crude).collect();
    if !crude.is_empty() {
        info!(
            "{}: {} replications in {:.1}s, mean crude estimate {:.6}",
            spec.id(),
            cfg.replications,
            start.elapsed().as_secs_f64(),
            crude.iter().sum::<f64>() / crude.len() as f64
        );
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(text: &str) -> RunConfig {
        let mut cfg = RunConfig::from_text(text).unwrap();
        cfg.workers = 1;
        cfg
    }

    #[test]
    fn minimal_cardinality() {
        let cfg = small_config("n=250\nreps=2\nmethods=iptw\nlearners=oracle\nestimators=WA\nestimands=ATE");
        let spec = cfg.scenarios().unwrap()[0];
        let out = run_scenario(&cfg, &spec, &TlfCache::new()).unwrap();
        let records: Vec<_> = out.into_iter().flat_map(|o| o.records).collect();
        assert_eq!(records.len(), 2);
        assert!(records.iter().all(|r| r.valid && r.reason.is_none()));
    }

    #[test]
    fn combination_counts() {
        let cfg = small_config("methods=iptw,eb\nlearners=oracle,logistic_well\nestimators=WA,AWA,OLS");
        // IPTW: 2 learners x 3 estimators; EB: WA, OLS plus AWA per learner
        assert_eq!(combinations(&cfg).len(), 6 + 2 + 2);
        assert_eq!(records_per_replication(&cfg), 20);
    }

    #[test]
    fn every_combination_yields_a_record() {
        let cfg = small_config("n=250\nreps=2\nestimands=ATE,ATT\ntlf_lambda=0.01\ntlf_gamma=0.5");
        let spec = cfg.scenarios().unwrap()[0];
        let out = run_scenario(&cfg, &spec, &TlfCache::new()).unwrap();
        for o in &out {
            assert_eq!(o.records.len(), records_per_replication(&cfg));
            for r in &o.records {
                assert_eq!(r.valid, r.reason.is_none());
                assert_eq!(r.ci95.is_some(), r.estimator == Estimator::Ols && r.value.is_some());
            }
        }
    }
}
