//! Per-tuple marginal estimation over sampled worlds.
//!
//! Both evaluators implement the same estimator: after an initial full
//! query on the starting world, take `n` samples spaced `k`
//! Metropolis-Hastings steps apart (thinning) and count, per answer tuple,
//! the number of sampled worlds whose answer contains it. The naive
//! evaluator re-executes the query on every sampled world; the incremental
//! evaluator maintains the answer through the walk's coalesced delta. With
//! the same seed they visit identical worlds and must produce bit-identical
//! counts; that equivalence is the core correctness
//! property, and the cost difference is the whole point.

use std::collections::BTreeMap;
use std::path::Path;

use crate::factor::FactorGraphSpec;
use crate::incremental::{maintain, Session, WorldIs};
use crate::mcmc::{chain_rng, random_walk, ChainRng, Proposer};
use crate::query::{execute_plan, validate, Plan, Query};
use crate::store::{Value, World};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Naive,
    Incremental,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Naive => write!(f, "naive"),
            Mode::Incremental => write!(f, "incremental"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvaluationConfig {
    pub mode: Mode,
    /// Samples taken after the initial world (z ends at samples + 1).
    pub samples: u64,
    /// Thinning: Metropolis-Hastings steps between samples.
    pub steps_per_sample: u64,
    pub chains: u64,
    pub seed: u64,
    /// Walks discarded before the initial answer is taken.
    pub burn_in: u64,
    /// Every m-th sample, cross-check the maintained answer against a full
    /// execution (incremental mode debugging; off by default).
    pub crosscheck_every: Option<u64>,
    /// Give every chain the same RNG stream instead of independent ones.
    /// Diagnostic: merged estimates then equal the single-chain ones.
    pub shared_chain_streams: bool,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            mode: Mode::Incremental,
            samples: 100,
            steps_per_sample: 10_000,
            chains: 1,
            seed: 0,
            burn_in: 0,
            crosscheck_every: None,
            shared_chain_streams: false,
        }
    }
}

impl EvaluationConfig {
    fn check(&self) -> Result<()> {
        if self.samples < 1 || self.steps_per_sample < 1 || self.chains < 1 {
            return Err(Error::Contract(
                "samples, steps per sample and chains must all be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Estimated tuple marginals: `m` counts over `z` sampled worlds.
/// `probability(t) = m_t / z`; a tuple in every sampled answer reports 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalEstimate {
    /// Output column names of the query.
    pub columns: Vec<String>,
    pub counts: BTreeMap<Vec<Value>, u64>,
    pub z: u64,
}

impl MarginalEstimate {
    pub fn probability(&self, tuple: &[Value]) -> f64 {
        let m = self.counts.get(tuple).copied().unwrap_or(0);
        m as f64 / self.z as f64
    }

    /// All tuple probabilities.
    pub fn marginals(&self) -> BTreeMap<Vec<Value>, f64> {
        self.counts
            .iter()
            .map(|(t, m)| (t.clone(), *m as f64 / self.z as f64))
            .collect()
    }

    /// Fold another chain's counts in.
    pub fn merge(&mut self, other: &MarginalEstimate) -> Result<()> {
        if self.columns != other.columns {
            return Err(Error::Corruption(
                "merging estimates of different queries".into(),
            ));
        }
        for (t, m) in &other.counts {
            *self.counts.entry(t.clone()).or_insert(0) += m;
        }
        self.z += other.z;
        Ok(())
    }
}

/// Sum of squared probability differences over the union of tuples.
pub fn squared_error(est: &MarginalEstimate, truth: &MarginalEstimate) -> f64 {
    squared_error_maps(&est.marginals(), &truth.marginals())
}

/// Squared error of raw counts over `z` against a marginal map, without
/// materializing the estimate. Suits per-sample observers.
pub fn squared_error_counts(
    counts: &BTreeMap<Vec<Value>, u64>,
    z: u64,
    truth: &BTreeMap<Vec<Value>, f64>,
) -> f64 {
    let mut loss = 0.0;
    for (t, m) in counts {
        let pa = *m as f64 / z as f64;
        let pb = truth.get(t).copied().unwrap_or(0.0);
        loss += (pa - pb) * (pa - pb);
    }
    for (t, pb) in truth {
        if !counts.contains_key(t) {
            loss += pb * pb;
        }
    }
    loss
}

/// Squared error between two marginal maps over the union of their keys.
pub fn squared_error_maps(a: &BTreeMap<Vec<Value>, f64>, b: &BTreeMap<Vec<Value>, f64>) -> f64 {
    let mut loss = 0.0;
    for (t, pa) in a {
        let pb = b.get(t).copied().unwrap_or(0.0);
        loss += (pa - pb) * (pa - pb);
    }
    for (t, pb) in b {
        if !a.contains_key(t) {
            loss += pb * pb;
        }
    }
    loss
}

/// Scale a loss series so its maximum becomes 1. An all-zero series is
/// returned unchanged.
pub fn normalize_losses(losses: &[f64]) -> Vec<f64> {
    let max = losses.iter().copied().fold(0.0f64, f64::max);
    if max == 0.0 {
        return losses.to_vec();
    }
    losses.iter().map(|l| l / max).collect()
}

/// Per-sample progress handed to an observer: the sample index (0 is the
/// initial world), current counts, and current z. Returning `false` stops
/// the run early (the estimate so far is returned).
pub type Observer<'a> = &'a mut dyn FnMut(u64, &BTreeMap<Vec<Value>, u64>, u64) -> bool;

fn run_chain(
    world: &mut World,
    spec: &FactorGraphSpec,
    proposer: &mut dyn Proposer,
    query: &Query,
    cfg: &EvaluationConfig,
    rng: &mut ChainRng,
    mut observer: Option<Observer<'_>>,
) -> Result<MarginalEstimate> {
    cfg.check()?;
    let plan: Plan = validate(query, world)?;
    for _ in 0..cfg.burn_in {
        random_walk(world, spec, proposer, rng, cfg.steps_per_sample)?;
    }

    // The initial world contributes the first counted sample.
    let (mut answer, mut session) = match cfg.mode {
        Mode::Naive => (execute_plan(&plan, world)?, None),
        Mode::Incremental => {
            let (answer, session) = Session::start(query, world)?;
            (answer, Some(session))
        }
    };
    let mut counts: BTreeMap<Vec<Value>, u64> = BTreeMap::new();
    let mut z: u64 = 1;
    for t in answer.keys() {
        counts.insert(t.clone(), 1);
    }
    if let Some(obs) = observer.as_mut() {
        if !obs(0, &counts, z) {
            return Ok(MarginalEstimate {
                columns: plan.columns,
                counts,
                z,
            });
        }
    }

    for i in 1..=cfg.samples {
        let walk = random_walk(world, spec, proposer, rng, cfg.steps_per_sample)?;
        match (&cfg.mode, session.as_mut()) {
            (Mode::Naive, _) => {
                answer = execute_plan(&plan, world)?;
            }
            (Mode::Incremental, Some(session)) => {
                let ad = session.delta_execute(world, &walk.delta, WorldIs::Post)?;
                maintain(&mut answer, &ad)?;
                if let Some(every) = cfg.crosscheck_every {
                    if every > 0 && i % every == 0 {
                        let full = execute_plan(&plan, world)?;
                        if full != answer {
                            return Err(Error::Corruption(format!(
                                "maintained answer diverged from full execution at sample {i}"
                            )));
                        }
                    }
                }
            }
            (Mode::Incremental, None) => unreachable!("session built for incremental mode"),
        }
        for t in answer.keys() {
            *counts.entry(t.clone()).or_insert(0) += 1;
        }
        z += 1;
        if let Some(obs) = observer.as_mut() {
            if !obs(i, &counts, z) {
                break;
            }
        }
    }
    Ok(MarginalEstimate {
        columns: plan.columns,
        counts,
        z,
    })
}

/// Naive evaluation: run the full query on every sampled world.
pub fn evaluate_naive(
    world: &mut World,
    spec: &FactorGraphSpec,
    proposer: &mut dyn Proposer,
    query: &Query,
    cfg: &EvaluationConfig,
) -> Result<MarginalEstimate> {
    let mut rng = chain_rng(cfg.seed, 0);
    let cfg = EvaluationConfig {
        mode: Mode::Naive,
        ..cfg.clone()
    };
    run_chain(world, spec, proposer, query, &cfg, &mut rng, None)
}

/// Incremental evaluation: maintain the answer through each walk's delta.
pub fn evaluate_incremental(
    world: &mut World,
    spec: &FactorGraphSpec,
    proposer: &mut dyn Proposer,
    query: &Query,
    cfg: &EvaluationConfig,
) -> Result<MarginalEstimate> {
    let mut rng = chain_rng(cfg.seed, 0);
    let cfg = EvaluationConfig {
        mode: Mode::Incremental,
        ..cfg.clone()
    };
    run_chain(world, spec, proposer, query, &cfg, &mut rng, None)
}

/// Single-chain evaluation in the configured mode, with a per-sample
/// observer (loss curves, timing).
pub fn evaluate_with_observer(
    world: &mut World,
    spec: &FactorGraphSpec,
    proposer: &mut dyn Proposer,
    query: &Query,
    cfg: &EvaluationConfig,
    observer: Observer<'_>,
) -> Result<MarginalEstimate> {
    let mut rng = chain_rng(cfg.seed, 0);
    run_chain(world, spec, proposer, query, cfg, &mut rng, Some(observer))
}

/// Run `cfg.chains` independent chains on clones of `world`, each with its
/// own proposer and RNG stream, and merge counts: `m` and `z` simply add.
/// Chains run on OS threads; the spec is shared read-only.
pub fn evaluate_parallel(
    world: &World,
    spec: &FactorGraphSpec,
    make_proposer: &(dyn Fn(u64) -> Box<dyn Proposer + Send> + Sync),
    query: &Query,
    cfg: &EvaluationConfig,
) -> Result<MarginalEstimate> {
    cfg.check()?;
    let worlds: Vec<World> = (0..cfg.chains).map(|_| world.clone_world()).collect();
    let results: Vec<Result<MarginalEstimate>> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (i, mut chain_world) in worlds.into_iter().enumerate() {
            let chain = i as u64;
            let cfg = cfg.clone();
            let query = query.clone();
            handles.push(scope.spawn(move || {
                let stream = if cfg.shared_chain_streams { 0 } else { chain };
                let mut rng = chain_rng(cfg.seed, stream);
                let mut proposer = make_proposer(chain);
                run_chain(
                    &mut chain_world,
                    spec,
                    proposer.as_mut(),
                    &query,
                    &cfg,
                    &mut rng,
                    None,
                )
            }));
        }
        handles.into_iter().map(|h| h.join().expect("chain panicked")).collect()
    });
    let mut merged: Option<MarginalEstimate> = None;
    for r in results {
        let est = r?;
        match merged.as_mut() {
            None => merged = Some(est),
            Some(m) => m.merge(&est)?,
        }
    }
    merged.ok_or_else(|| Error::Contract("no chains ran".into()))
}

// --------------------------------------------------------------------------
// CSV input/output
// --------------------------------------------------------------------------

/// Write marginals as CSV: the query's output columns, then count, z,
/// probability. Rows come out in tuple order, so equal seeds give
/// byte-identical files.
pub fn write_marginals_csv(est: &MarginalEstimate, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = est.columns.clone();
    header.extend(["count".into(), "z".into(), "probability".into()]);
    w.write_record(&header).map_err(csv_err)?;
    for (t, m) in &est.counts {
        let mut rec: Vec<String> = t.iter().map(|v| v.to_string()).collect();
        rec.push(m.to_string());
        rec.push(est.z.to_string());
        rec.push((*m as f64 / est.z as f64).to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Write exact marginals (tuple columns plus probability).
pub fn write_exact_csv(
    columns: &[String],
    marginals: &BTreeMap<Vec<Value>, f64>,
    path: &Path,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = columns.to_vec();
    header.push("probability".into());
    w.write_record(&header).map_err(csv_err)?;
    for (t, p) in marginals {
        let mut rec: Vec<String> = t.iter().map(|v| v.to_string()).collect();
        rec.push(p.to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// A reference answer read back from CSV: stringified tuples to
/// probability. Accepts either the marginal format (with count and z
/// columns) or the exact format; the probability is the last column.
pub fn read_truth_csv(path: &Path) -> Result<BTreeMap<Vec<String>, f64>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = r.headers().map_err(csv_err)?.clone();
    let n = headers.len();
    if n < 2 {
        return Err(Error::Corruption(format!(
            "truth file {} needs tuple columns and a probability column",
            path.display()
        )));
    }
    let drop_tail = if n >= 4 && &headers[n - 3] == "count" && &headers[n - 2] == "z" {
        3
    } else {
        1
    };
    let mut out = BTreeMap::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let tuple: Vec<String> = rec.iter().take(n - drop_tail).map(str::to_string).collect();
        let p: f64 = rec[n - 1].parse().map_err(|_| {
            Error::Corruption(format!("bad probability {:?} in {}", &rec[n - 1], path.display()))
        })?;
        out.insert(tuple, p);
    }
    Ok(out)
}

/// Squared error of an estimate against a stringified truth table.
pub fn squared_error_vs_truth(
    est: &MarginalEstimate,
    truth: &BTreeMap<Vec<String>, f64>,
) -> f64 {
    let stringified: BTreeMap<Vec<String>, f64> = est
        .counts
        .iter()
        .map(|(t, m)| {
            (
                t.iter().map(|v| v.to_string()).collect(),
                *m as f64 / est.z as f64,
            )
        })
        .collect();
    let mut loss = 0.0;
    for (t, pa) in &stringified {
        let pb = truth.get(t).copied().unwrap_or(0.0);
        loss += (pa - pb) * (pa - pb);
    }
    for (t, pb) in truth {
        if !stringified.contains_key(t) {
            loss += pb * pb;
        }
    }
    loss
}

/// One point of a loss curve.
#[derive(Debug, Clone, Copy)]
pub struct LossPoint {
    pub sample: u64,
    pub elapsed_ms: u64,
    pub loss: f64,
}

pub fn write_loss_csv(points: &[LossPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["sample", "elapsed_ms", "loss"]).map_err(csv_err)?;
    for p in points {
        w.write_record([
            p.sample.to_string(),
            p.elapsed_ms.to_string(),
            p.loss.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Corruption(format!("csv: {e}"))
}
