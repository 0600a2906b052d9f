//! Brute-force enumeration over all assignments of the hidden variables.
//!
//! This is the test oracle and the engine behind the CLI's `oracle`
//! subcommand. It is deliberately kept off the sampling path: nothing in
//! [`crate::mcmc`] or [`crate::evaluator`] calls into it, since the whole
//! point of the sampler is that the normalizer is never computed.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::factor::FactorGraphSpec;
use crate::query::{self, Query};
use crate::store::{Domain, Value, VariableRef, World};
use crate::{Error, Result};

/// Default cap on the number of joint assignments the oracle will sweep.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

/// The exact distribution over possible worlds: the hidden variables in a
/// fixed order plus every assignment with positive probability. Impossible
/// worlds (unnormalized score zero) are omitted.
#[derive(Debug, Clone)]
pub struct ExactDistribution {
    pub vars: Vec<VariableRef>,
    pub entries: Vec<(Vec<Value>, f64)>,
}

impl ExactDistribution {
    pub fn probability_of(&self, assignment: &[Value]) -> f64 {
        self.entries
            .iter()
            .find(|(a, _)| a == assignment)
            .map(|(_, p)| *p)
            .unwrap_or(0.0)
    }

    /// Marginal distribution of each hidden variable.
    pub fn variable_marginals(&self) -> BTreeMap<VariableRef, BTreeMap<Value, f64>> {
        let mut out: BTreeMap<VariableRef, BTreeMap<Value, f64>> = BTreeMap::new();
        for (assignment, p) in &self.entries {
            for (var, value) in self.vars.iter().zip(assignment) {
                *out.entry(var.clone())
                    .or_default()
                    .entry(value.clone())
                    .or_insert(0.0) += p;
            }
        }
        out
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|(_, p)| p).sum()
    }
}

/// Odometer sweep over every joint assignment of the hidden variables of a
/// scratch world clone.
struct Sweep {
    vars: Vec<VariableRef>,
    domains: Vec<Arc<Domain>>,
    scratch: World,
}

impl Sweep {
    fn prepare(spec: &FactorGraphSpec, world: &World, cap: u64) -> Result<Sweep> {
        let mut scratch = world.clone_world();
        spec.bind(&mut scratch)?;
        let hidden = scratch.hidden_refs();
        let mut size: u128 = 1;
        for (_, d) in &hidden {
            size = size.saturating_mul(d.len() as u128);
            if size > cap as u128 {
                // Reported as the running product at the point it crossed
                // the cap; the full joint size is at least this.
                return Err(Error::CapExceeded { size, cap });
            }
        }
        let (vars, domains) = hidden.into_iter().unzip();
        Ok(Sweep {
            vars,
            domains,
            scratch,
        })
    }

    /// Visit every joint assignment in odometer order (last variable fastest).
    fn run(&mut self, mut visit: impl FnMut(&World) -> Result<()>) -> Result<()> {
        let n = self.vars.len();
        let mut odometer = vec![0usize; n];
        for (var, dom) in self.vars.iter().zip(&self.domains) {
            let v = dom.values()[0].clone();
            self.scratch.set_field_unchecked(var, v)?;
        }
        loop {
            visit(&self.scratch)?;
            let mut pos = n;
            loop {
                if pos == 0 {
                    return Ok(());
                }
                pos -= 1;
                odometer[pos] += 1;
                if odometer[pos] < self.domains[pos].len() {
                    let v = self.domains[pos].values()[odometer[pos]].clone();
                    self.scratch.set_field_unchecked(&self.vars[pos], v)?;
                    break;
                }
                odometer[pos] = 0;
                let v = self.domains[pos].values()[0].clone();
                self.scratch.set_field_unchecked(&self.vars[pos], v)?;
            }
        }
    }

    /// Current assignment of the hidden variables in `vars` order.
    fn current_assignment(world: &World, vars: &[VariableRef]) -> Result<Vec<Value>> {
        vars.iter().map(|r| world.field(r).cloned()).collect()
    }
}

fn log_sum_exp(scores: &[f64]) -> f64 {
    let m = scores
        .iter()
        .copied()
        .filter(|s| *s > f64::NEG_INFINITY)
        .fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + scores
        .iter()
        .filter(|s| **s > f64::NEG_INFINITY)
        .map(|s| (s - m).exp())
        .sum::<f64>()
        .ln()
}

/// Enumerate every possible world of `spec` over `world`'s hidden variables
/// and return the normalized distribution. Refuses when the joint state
/// space exceeds `cap`.
pub fn exact_distribution(
    spec: &FactorGraphSpec,
    world: &World,
    cap: u64,
) -> Result<ExactDistribution> {
    let mut sweep = Sweep::prepare(spec, world, cap)?;
    let vars = sweep.vars.clone();
    let mut assignments: Vec<Vec<Value>> = Vec::new();
    let mut scores: Vec<f64> = Vec::new();
    sweep.run(|w| {
        assignments.push(Sweep::current_assignment(w, &vars)?);
        scores.push(spec.world_log_score(w)?);
        Ok(())
    })?;
    let log_z = log_sum_exp(&scores);
    if log_z == f64::NEG_INFINITY {
        return Err(Error::Corruption(
            "every assignment is impossible: no possible worlds".into(),
        ));
    }
    let entries = assignments
        .into_iter()
        .zip(&scores)
        .filter(|(_, s)| **s > f64::NEG_INFINITY)
        .map(|(a, s)| (a, (s - log_z).exp()))
        .collect();
    Ok(ExactDistribution { vars, entries })
}

/// Exact per-tuple marginals of `query`: for every answer tuple, the summed
/// probability of the worlds whose answer contains it.
pub fn exact_query_marginals(
    spec: &FactorGraphSpec,
    world: &World,
    query: &Query,
    cap: u64,
) -> Result<BTreeMap<Vec<Value>, f64>> {
    let mut sweep = Sweep::prepare(spec, world, cap)?;
    let mut scores: Vec<f64> = Vec::new();
    sweep.run(|w| {
        scores.push(spec.world_log_score(w)?);
        Ok(())
    })?;
    let log_z = log_sum_exp(&scores);
    if log_z == f64::NEG_INFINITY {
        return Err(Error::Corruption(
            "every assignment is impossible: no possible worlds".into(),
        ));
    }
    let mut out: BTreeMap<Vec<Value>, f64> = BTreeMap::new();
    let mut i = 0usize;
    sweep.run(|w| {
        let s = scores[i];
        i += 1;
        if s > f64::NEG_INFINITY {
            let p = (s - log_z).exp();
            let answer = query::execute(query, w)?;
            for (tuple, _count) in answer.iter() {
                *out.entry(tuple.clone()).or_insert(0.0) += p;
            }
        }
        Ok(())
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor::fixtures::*;
    use crate::factor::{FactorGraphSpec, TableTemplate};

    #[test]
    fn single_binary_variable_without_factors_is_uniform() {
        // One hidden binary variable, no templates at all.
        let w = pair_world();
        let rel = w.relation(PAIR_REL).unwrap();
        let mut only_one = World::new();
        only_one.add_relation((*rel.schema).clone()).unwrap();
        only_one
            .insert_tuple(PAIR_REL, rel.tuples[&0].clone())
            .unwrap();
        only_one
            .declare_hidden(PAIR_REL, "VAL", pair_domain())
            .unwrap();
        let spec = FactorGraphSpec::new().with_hidden(PAIR_REL, "VAL", pair_domain());
        let dist = exact_distribution(&spec, &only_one, 100).unwrap();
        assert_eq!(dist.entries.len(), 2);
        for (_, p) in &dist.entries {
            assert!((p - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn agreement_pair_has_thirds_and_sixths() {
        // log psi(equal) = ln 2 gives worlds aa/bb weight 2 and ab/ba
        // weight 1, so Z = 6.
        let w = pair_world();
        let spec = agreement_spec((2.0f64).ln());
        let dist = exact_distribution(&spec, &w, 100).unwrap();
        assert_eq!(dist.entries.len(), 4);
        let p = |a: &str, b: &str| {
            dist.probability_of(&[Value::str(a), Value::str(b)])
        };
        assert!((p("a", "a") - 1.0 / 3.0).abs() < 1e-12);
        assert!((p("b", "b") - 1.0 / 3.0).abs() < 1e-12);
        assert!((p("a", "b") - 1.0 / 6.0).abs() < 1e-12);
        assert!((p("b", "a") - 1.0 / 6.0).abs() < 1e-12);
        assert!((dist.total() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn impossible_worlds_are_excluded() {
        let w = pair_world();
        let spec = constrained_spec();
        let dist = exact_distribution(&spec, &w, 100).unwrap();
        // Variable 0 = "b" is forbidden: only two worlds remain.
        assert_eq!(dist.entries.len(), 2);
        assert!((dist.total() - 1.0).abs() < 1e-9);
        assert_eq!(dist.probability_of(&[Value::str("b"), Value::str("a")]), 0.0);
    }

    #[test]
    fn probabilities_sum_to_one_on_chain() {
        let (w, spec) = chain3();
        let dist = exact_distribution(&spec, &w, 100).unwrap();
        assert_eq!(dist.entries.len(), 8);
        assert!((dist.total() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cap_exceeded_is_a_refusal() {
        let (w, spec) = chain3();
        match exact_distribution(&spec, &w, 7) {
            Err(Error::CapExceeded { size, cap }) => {
                assert_eq!(size, 8);
                assert_eq!(cap, 7);
            }
            other => panic!("expected cap refusal, got {other:?}"),
        }
    }

    #[test]
    fn marginals_of_constrained_pair() {
        let w = pair_world();
        let spec = constrained_spec();
        let dist = exact_distribution(&spec, &w, 100).unwrap();
        let marginals = dist.variable_marginals();
        let v0 = &marginals[&pair_ref(0)];
        assert!((v0[&Value::str("a")] - 1.0).abs() < 1e-12);
        assert!(!v0.contains_key(&Value::str("b")) || v0[&Value::str("b")] == 0.0);
    }

    #[test]
    fn zero_weight_table_keeps_uniformity() {
        let w = pair_world();
        let spec = FactorGraphSpec::new()
            .with_hidden(PAIR_REL, "VAL", pair_domain())
            .with_template(Box::new(
                TableTemplate::new(
                    "null",
                    vec![pair_ref(0), pair_ref(1)],
                    vec![pair_domain(), pair_domain()],
                    vec![0.0; 4],
                )
                .unwrap(),
            ));
        let dist = exact_distribution(&spec, &w, 100).unwrap();
        for (_, p) in &dist.entries {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }
}
