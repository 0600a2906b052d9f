//! Metropolis-Hastings kernel over worlds.
//!
//! A [`Proposer`] hypothesizes a modification to the current world as a
//! [`Proposal`]: a delta plus the forward and backward log proposal
//! densities. [`mh_step`] accepts with probability
//! `min(1, pi(w')q(w|w') / (pi(w)q(w'|w)))`, evaluated entirely through
//! [`FactorGraphSpec::log_score_ratio`]; the normalizer cancels and is
//! never computed. [`random_walk`] chains `k` steps and returns the
//! coalesced delta between the entry and exit worlds.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use std::collections::BTreeMap;

use crate::factor::FactorGraphSpec;
use crate::store::{Delta, Value, VariableRef, World};
use crate::{Error, Result};

/// The chain RNG: seedable, portable across platforms, with independent
/// streams per chain so parallel evaluators draw unrelated randomness from
/// one user-facing seed.
pub type ChainRng = ChaCha8Rng;

/// RNG for `(seed, chain_index)`. Chain 0 is the single-chain default.
pub fn chain_rng(seed: u64, chain: u64) -> ChainRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain);
    rng
}

/// A hypothesized world modification.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub delta: Delta,
    /// log q(w'|w)
    pub log_q_forward: f64,
    /// log q(w|w')
    pub log_q_backward: f64,
}

impl Proposal {
    /// A proposal from a symmetric proposer: the q-ratio contributes zero.
    pub fn symmetric(delta: Delta, log_q: f64) -> Proposal {
        Proposal {
            delta,
            log_q_forward: log_q,
            log_q_backward: log_q,
        }
    }
}

/// Proposal distributions. Implementations must only touch hidden
/// variables, must return finite log densities, and are responsible for
/// eventually reaching every world of positive probability (an obligation
/// documented here, not machine-checked).
pub trait Proposer {
    fn propose(&mut self, world: &World, rng: &mut ChainRng) -> Result<Proposal>;
}

/// Uniform single-variable flip over every hidden variable of the world:
/// pick a variable uniformly, then a value uniformly from its whole domain
/// (including the current one). Symmetric. Suits small fixture worlds; for
/// token corpora the batched proposer in [`crate::ner`] scales better.
#[derive(Clone)]
pub struct UniformFlipProposer {
    vars: Vec<(VariableRef, Vec<Value>)>,
}

impl UniformFlipProposer {
    pub fn new(world: &World) -> Result<UniformFlipProposer> {
        let vars: Vec<(VariableRef, Vec<Value>)> = world
            .hidden_refs()
            .into_iter()
            .map(|(r, d)| (r, d.values().to_vec()))
            .collect();
        if vars.is_empty() {
            return Err(Error::Contract(
                "world has no hidden variables to propose over".into(),
            ));
        }
        Ok(UniformFlipProposer { vars })
    }
}

impl Proposer for UniformFlipProposer {
    fn propose(&mut self, world: &World, rng: &mut ChainRng) -> Result<Proposal> {
        let (var, domain) = &self.vars[rng.gen_range(0..self.vars.len())];
        let value = domain[rng.gen_range(0..domain.len())].clone();
        let delta = flip_delta(world, var, value)?;
        // Uniform over |vars| * |domain|; identical in both directions.
        Ok(Proposal::symmetric(delta, 0.0))
    }
}

/// Delta that sets `var` to `value` without mutating the world. The
/// fragment keeps equal pre/post images for a no-op flip; composition
/// coalesces those away.
pub fn flip_delta(world: &World, var: &VariableRef, value: Value) -> Result<Delta> {
    let schema = world.schema(&var.relation)?.clone();
    let idx = schema
        .attr_index(&var.attribute)
        .ok_or_else(|| Error::UnknownVariable(var.to_string()))?;
    let pre = world.tuple(&var.relation, var.key)?.clone();
    let mut post = pre.clone();
    post.values[idx] = value;
    Ok(Delta::update(schema.relation.clone(), var.key, pre, post))
}

/// Outcome of one Metropolis-Hastings step.
#[derive(Debug)]
pub struct StepOutcome {
    pub accepted: bool,
    /// The applied delta when accepted; empty otherwise.
    pub delta: Delta,
}

/// Result of a `k`-step random walk.
#[derive(Debug, Clone)]
pub struct WalkResult {
    /// Coalesced difference between the entry world and the exit world.
    pub delta: Delta,
    pub accepted: u64,
    pub proposed: u64,
}

fn check_contract(spec: &FactorGraphSpec, world: &World, proposal: &Proposal) -> Result<()> {
    if !proposal.log_q_forward.is_finite() || !proposal.log_q_backward.is_finite() {
        return Err(Error::Contract(
            "proposal log densities must be finite".into(),
        ));
    }
    for (var, _, _) in spec.changed_vars(world, &proposal.delta)? {
        if !world.is_hidden(&var) {
            return Err(Error::Contract(format!(
                "proposal modifies observed variable {var}"
            )));
        }
    }
    Ok(())
}

/// One Metropolis-Hastings step. Draws exactly one uniform variate per
/// proposal, even when acceptance is certain, so the RNG stream stays
/// aligned across evaluators that replay the same seed.
pub fn mh_step(
    world: &mut World,
    spec: &FactorGraphSpec,
    proposer: &mut dyn Proposer,
    rng: &mut ChainRng,
) -> Result<StepOutcome> {
    let proposal = proposer.propose(world, rng)?;
    check_contract(spec, world, &proposal)?;
    let log_ratio = spec.log_score_ratio(world, &proposal.delta)?
        + proposal.log_q_backward
        - proposal.log_q_forward;
    let threshold = log_ratio.min(0.0);
    let u: f64 = rng.gen();
    let accepted = u.ln() < threshold;
    if accepted {
        world.apply_delta(&proposal.delta)?;
        Ok(StepOutcome {
            accepted: true,
            delta: proposal.delta,
        })
    } else {
        Ok(StepOutcome {
            accepted: false,
            delta: Delta::empty(),
        })
    }
}

/// Run `k` Metropolis-Hastings steps, mutating `world` in place, and return
/// the accepted deltas coalesced into one.
pub fn random_walk(
    world: &mut World,
    spec: &FactorGraphSpec,
    proposer: &mut dyn Proposer,
    rng: &mut ChainRng,
    k: u64,
) -> Result<WalkResult> {
    let mut delta = Delta::empty();
    let mut accepted = 0;
    for _ in 0..k {
        let step = mh_step(world, spec, proposer, rng)?;
        if step.accepted {
            accepted += 1;
            delta.merge(step.delta);
        }
    }
    Ok(WalkResult {
        delta,
        accepted,
        proposed: k,
    })
}

/// Sample `n` thinned samples (`k` steps apart) and tally per-variable value
/// frequencies. Convergence harness for comparing against exact marginals.
pub fn chain_marginals(
    world: &mut World,
    spec: &FactorGraphSpec,
    proposer: &mut dyn Proposer,
    rng: &mut ChainRng,
    n_samples: u64,
    k: u64,
) -> Result<BTreeMap<VariableRef, BTreeMap<Value, u64>>> {
    let vars: Vec<VariableRef> = world.hidden_refs().into_iter().map(|(r, _)| r).collect();
    let mut tally: BTreeMap<VariableRef, BTreeMap<Value, u64>> = BTreeMap::new();
    for _ in 0..n_samples {
        random_walk(world, spec, proposer, rng, k)?;
        for var in &vars {
            let v = world.field(var)?.clone();
            *tally.entry(var.clone()).or_default().entry(v).or_insert(0) += 1;
        }
    }
    Ok(tally)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor::exact::exact_distribution;
    use crate::factor::fixtures::*;
    use crate::factor::{FactorGraphSpec, TableTemplate};

    /// Proposer that always proposes the same flip; used to pin acceptance
    /// probabilities.
    struct FixedFlip {
        var: VariableRef,
        value: Value,
    }

    impl Proposer for FixedFlip {
        fn propose(&mut self, world: &World, _rng: &mut ChainRng) -> Result<Proposal> {
            Ok(Proposal::symmetric(
                flip_delta(world, &self.var, self.value.clone())?,
                0.0,
            ))
        }
    }

    #[test]
    fn ratio_one_always_accepts() {
        // No factors: every flip has ratio 1 under a symmetric proposer.
        let spec = FactorGraphSpec::new().with_hidden(PAIR_REL, "VAL", pair_domain());
        let mut w = pair_world();
        let mut rng = chain_rng(1, 0);
        let mut prop = UniformFlipProposer::new(&w).unwrap();
        for _ in 0..200 {
            let s = mh_step(&mut w, &spec, &mut prop, &mut rng).unwrap();
            assert!(s.accepted);
        }
    }

    #[test]
    fn half_ratio_accepts_half_the_time() {
        // A single-variable table with log psi(a)=ln 2, log psi(b)=0: the
        // a->b flip has ratio 0.5.
        let spec = FactorGraphSpec::new()
            .with_hidden(PAIR_REL, "VAL", pair_domain())
            .with_template(Box::new(
                TableTemplate::new(
                    "tilt",
                    vec![pair_ref(0)],
                    vec![pair_domain()],
                    vec![(2.0f64).ln(), 0.0],
                )
                .unwrap(),
            ));
        let mut rng = chain_rng(42, 0);
        let mut accepted = 0u32;
        let trials = 40_000u32;
        for _ in 0..trials {
            let mut w = pair_world();
            let mut prop = FixedFlip {
                var: pair_ref(0),
                value: Value::str("b"),
            };
            if mh_step(&mut w, &spec, &mut prop, &mut rng).unwrap().accepted {
                accepted += 1;
            }
        }
        let rate = accepted as f64 / trials as f64;
        assert!((rate - 0.5).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn impossible_proposal_is_never_accepted() {
        let spec = constrained_spec();
        let mut rng = chain_rng(9, 0);
        for _ in 0..500 {
            let mut w = pair_world();
            let mut prop = FixedFlip {
                var: pair_ref(0),
                value: Value::str("b"),
            };
            let before = w.digest();
            let s = mh_step(&mut w, &spec, &mut prop, &mut rng).unwrap();
            assert!(!s.accepted);
            assert_eq!(w.digest(), before, "rejected step must not move the world");
        }
    }

    #[test]
    fn proposer_touching_observed_variable_errors() {
        struct Bad;
        impl Proposer for Bad {
            fn propose(&mut self, world: &World, _rng: &mut ChainRng) -> Result<Proposal> {
                Ok(Proposal::symmetric(
                    flip_delta(world, &VariableRef::new(PAIR_REL, 0, "ID"), Value::Int(7))?,
                    0.0,
                ))
            }
        }
        let spec = agreement_spec(1.0);
        let mut w = pair_world();
        let mut rng = chain_rng(2, 0);
        assert!(matches!(
            mh_step(&mut w, &spec, &mut Bad, &mut rng),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn all_rejected_walk_has_empty_delta() {
        let spec = constrained_spec();
        let mut w = pair_world();
        let mut rng = chain_rng(5, 0);
        let mut prop = FixedFlip {
            var: pair_ref(0),
            value: Value::str("b"),
        };
        let res = random_walk(&mut w, &spec, &mut prop, &mut rng, 100).unwrap();
        assert_eq!(res.accepted, 0);
        assert_eq!(res.proposed, 100);
        assert!(res.delta.is_empty());
    }

    #[test]
    fn single_step_walk_yields_one_tuple_pair() {
        // No factors: every proposal accepted. A k=1 walk that flips a
        // value leaves a delta of exactly one (pre, post) pair.
        let spec = FactorGraphSpec::new().with_hidden(PAIR_REL, "VAL", pair_domain());
        let mut w = pair_world();
        let mut rng = chain_rng(8, 0);
        let mut prop = FixedFlip {
            var: pair_ref(1),
            value: Value::str("b"),
        };
        let res = random_walk(&mut w, &spec, &mut prop, &mut rng, 1).unwrap();
        assert_eq!(res.accepted, 1);
        assert_eq!(res.delta.len(), 1);
        let (_, _, pre) = res.delta.minus().next().unwrap();
        let (_, _, post) = res.delta.plus().next().unwrap();
        assert_eq!(pre.values[1], Value::str("a"));
        assert_eq!(post.values[1], Value::str("b"));
    }

    #[test]
    fn walk_delta_replays_to_exit_world() {
        let spec = agreement_spec((2.0f64).ln());
        let mut w = pair_world();
        let entry = w.clone_world();
        let mut rng = chain_rng(33, 0);
        let mut prop = UniformFlipProposer::new(&w).unwrap();
        let res = random_walk(&mut w, &spec, &mut prop, &mut rng, 1000).unwrap();
        assert!(res.accepted <= res.proposed);
        let mut replay = entry.clone_world();
        replay.apply_delta(&res.delta).unwrap();
        assert_eq!(replay.digest(), w.digest());
    }

    #[test]
    fn identical_seeds_give_identical_walks() {
        let spec = agreement_spec(0.7);
        for chain in [0u64, 3] {
            let run = |seed: u64| {
                let mut w = pair_world();
                let mut rng = chain_rng(seed, chain);
                let mut prop = UniformFlipProposer::new(&w).unwrap();
                let r = random_walk(&mut w, &spec, &mut prop, &mut rng, 500).unwrap();
                (r.accepted, r.proposed, format!("{:?}", r.delta), w.digest())
            };
            assert_eq!(run(77), run(77));
        }
        // Different streams of the same seed diverge.
        let walk = |chain: u64| {
            let mut w = pair_world();
            let mut rng = chain_rng(77, chain);
            let mut prop = UniformFlipProposer::new(&w).unwrap();
            let r = random_walk(&mut w, &spec, &mut prop, &mut rng, 500).unwrap();
            r.accepted
        };
        assert_ne!(walk(0), walk(1));
    }

    #[test]
    fn empirical_world_frequencies_match_enumeration() {
        let spec = agreement_spec((2.0f64).ln());
        let w0 = pair_world();
        let exact = exact_distribution(&spec, &w0, 100).unwrap();
        let mut w = w0.clone_world();
        let mut rng = chain_rng(4242, 0);
        let mut prop = UniformFlipProposer::new(&w).unwrap();
        let samples = 100_000u64;
        let mut counts: BTreeMap<Vec<Value>, u64> = BTreeMap::new();
        for _ in 0..samples {
            mh_step(&mut w, &spec, &mut prop, &mut rng).unwrap();
            let key = vec![
                w.field(&pair_ref(0)).unwrap().clone(),
                w.field(&pair_ref(1)).unwrap().clone(),
            ];
            *counts.entry(key).or_insert(0) += 1;
        }
        for (assignment, p) in &exact.entries {
            let hat = *counts.get(assignment).unwrap_or(&0) as f64 / samples as f64;
            assert!(
                (hat - p).abs() < 0.01,
                "world {assignment:?}: {hat} vs {p}"
            );
        }
    }

    #[test]
    fn detailed_balance_on_pair_fixture() {
        // Transition flow between world states must balance:
        // N(a->b) * pi_hat(a) is compared against N(b->a) * pi_hat(b)
        // through raw transition counts, which already embed pi_hat.
        let spec = agreement_spec((2.0f64).ln());
        let mut w = pair_world();
        let mut rng = chain_rng(99, 0);
        let mut prop = UniformFlipProposer::new(&w).unwrap();
        let key = |w: &World| {
            (
                w.field(&pair_ref(0)).unwrap().clone(),
                w.field(&pair_ref(1)).unwrap().clone(),
            )
        };
        type State = (Value, Value);
        let mut flows: BTreeMap<(State, State), u64> = BTreeMap::new();
        let mut prev = key(&w);
        let steps = 1_000_000u64;
        for _ in 0..steps {
            mh_step(&mut w, &spec, &mut prop, &mut rng).unwrap();
            let cur = key(&w);
            if cur != prev {
                *flows.entry((prev.clone(), cur.clone())).or_insert(0) += 1;
            }
            prev = cur;
        }
        for ((from, to), n) in &flows {
            if from < to {
                let back = *flows.get(&(to.clone(), from.clone())).unwrap_or(&0);
                let diff = (*n as f64 - back as f64).abs() / (*n as f64);
                assert!(
                    diff < 0.05,
                    "flow {from:?}->{to:?}: {n} vs {back} ({diff:.3})"
                );
            }
        }
    }

    #[test]
    fn chain_marginals_uniform_without_factors() {
        let spec = FactorGraphSpec::new().with_hidden(PAIR_REL, "VAL", pair_domain());
        let mut w = pair_world();
        let mut rng = chain_rng(11, 0);
        let mut prop = UniformFlipProposer::new(&w).unwrap();
        let tally = chain_marginals(&mut w, &spec, &mut prop, &mut rng, 10_000, 2).unwrap();
        let m = &tally[&pair_ref(0)];
        let f = m[&Value::str("a")] as f64 / 10_000.0;
        assert!((f - 0.5).abs() < 0.02, "frequency {f}");
    }

    #[test]
    fn forbidden_value_frequency_is_zero() {
        let spec = constrained_spec();
        let mut w = pair_world();
        let mut rng = chain_rng(13, 0);
        let mut prop = UniformFlipProposer::new(&w).unwrap();
        let tally = chain_marginals(&mut w, &spec, &mut prop, &mut rng, 2_000, 3).unwrap();
        assert!(!tally[&pair_ref(0)].contains_key(&Value::str("b")));
    }
}
