//! Factor templates and log-space world scoring.
//!
//! A [`FactorGraphSpec`] is a list of templates plus declarations of which
//! world fields are hidden. Templates are rules: given a world they name
//! factor instances (small sets of neighboring fields) and score joint
//! assignments of those neighbors. All scoring happens in log space; an
//! impossible assignment (a violated hard constraint) scores
//! `f64::NEG_INFINITY`, which absorbs addition, so the log score of a world
//! containing one is itself `-inf`.
//!
//! Factors are never materialized globally: [`FactorGraphSpec::world_log_score`]
//! and [`FactorGraphSpec::touched_factors`] instantiate them on demand, which
//! keeps the per-step cost of sampling independent of database size.

use std::collections::BTreeSet;

use smallvec::SmallVec;

use crate::store::{Delta, Domain, Value, VariableRef, World};
use crate::{Error, Result};

pub mod exact;

/// Neighbor slots of one factor instance.
pub type NeighborSet = SmallVec<[VariableRef; 4]>;

/// A factor instance paired with the index of the template that produced it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct FactorInstance {
    pub template: usize,
    pub vars: NeighborSet,
}

/// A parametric family of factors.
///
/// `features` and `weights` expose the log-linear form of the factor:
/// `log_score` must equal their sparse dot product whenever it is finite.
/// Implementations may override `log_score` with a direct computation; the
/// default derives it from the feature vector.
pub trait FactorTemplate: Send + Sync {
    fn name(&self) -> &str;

    /// Number of neighbor slots per instance.
    fn arity(&self) -> usize;

    /// Weight vector, aligned with `features`.
    fn weights(&self) -> &[f64];

    /// Feature vector for a joint assignment of the neighbor slots.
    fn features(&self, assignment: &[Value]) -> Result<Vec<f64>>;

    /// log of the factor value for the assignment. `-inf` only for a
    /// violated deterministic constraint.
    fn log_score(&self, assignment: &[Value]) -> Result<f64> {
        Ok(sparse_dot(&self.features(assignment)?, self.weights()))
    }

    /// Every factor instance this template induces over the world.
    fn instances(&self, world: &World) -> Result<Vec<NeighborSet>>;

    /// Instances having `changed` among their neighbors, appended to `out`.
    fn touched(&self, world: &World, changed: &VariableRef, out: &mut Vec<NeighborSet>)
        -> Result<()>;
}

/// Dot product that skips zero features, so one-hot features may select
/// `-inf` table entries without producing NaN from `0 * -inf`.
pub fn sparse_dot(features: &[f64], weights: &[f64]) -> f64 {
    debug_assert_eq!(features.len(), weights.len());
    let mut acc = 0.0;
    for (f, w) in features.iter().zip(weights) {
        if *f != 0.0 {
            acc += f * w;
        }
    }
    acc
}

/// Explicit table factor over a fixed list of variables: the weight vector
/// is the table of log scores indexed by the joint assignment (mixed-radix
/// over the per-slot domains) and the feature vector is the matching
/// one-hot. Table entries may be `-inf` to encode a hard constraint.
pub struct TableTemplate {
    name: String,
    vars: Vec<VariableRef>,
    domains: Vec<Domain>,
    table: Vec<f64>,
}

impl TableTemplate {
    pub fn new(
        name: impl Into<String>,
        vars: Vec<VariableRef>,
        domains: Vec<Domain>,
        table: Vec<f64>,
    ) -> Result<TableTemplate> {
        if vars.len() != domains.len() {
            return Err(Error::Corruption(
                "table template needs one domain per variable".into(),
            ));
        }
        let size: usize = domains.iter().map(|d| d.len()).product();
        if table.len() != size {
            return Err(Error::Corruption(format!(
                "table of {} entries does not match joint domain of {size}",
                table.len()
            )));
        }
        if table.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Corruption(
                "table entries must be finite or -inf".into(),
            ));
        }
        Ok(TableTemplate {
            name: name.into(),
            vars,
            domains,
            table,
        })
    }

    fn index_of(&self, assignment: &[Value]) -> Result<usize> {
        if assignment.len() != self.vars.len() {
            return Err(Error::Corruption(format!(
                "assignment arity {} does not cover template {}",
                assignment.len(),
                self.name
            )));
        }
        let mut idx = 0usize;
        for (slot, (v, d)) in assignment.iter().zip(&self.domains).enumerate() {
            let pos = d.index_of(v).ok_or_else(|| Error::OutOfDomain {
                target: format!("{} slot {slot}", self.name),
                value: format!("{v:?}"),
            })?;
            idx = idx * d.len() + pos;
        }
        Ok(idx)
    }
}

impl FactorTemplate for TableTemplate {
    fn name(&self) -> &str {
        &self.name
    }

    fn arity(&self) -> usize {
        self.vars.len()
    }

    fn weights(&self) -> &[f64] {
        &self.table
    }

    fn features(&self, assignment: &[Value]) -> Result<Vec<f64>> {
        let mut phi = vec![0.0; self.table.len()];
        phi[self.index_of(assignment)?] = 1.0;
        Ok(phi)
    }

    fn log_score(&self, assignment: &[Value]) -> Result<f64> {
        Ok(self.table[self.index_of(assignment)?])
    }

    fn instances(&self, _world: &World) -> Result<Vec<NeighborSet>> {
        Ok(vec![self.vars.iter().cloned().collect()])
    }

    fn touched(
        &self,
        _world: &World,
        changed: &VariableRef,
        out: &mut Vec<NeighborSet>,
    ) -> Result<()> {
        if self.vars.contains(changed) {
            out.push(self.vars.iter().cloned().collect());
        }
        Ok(())
    }
}

/// Declares one hidden (relation, attribute) pair and its domain.
#[derive(Debug, Clone)]
pub struct HiddenDecl {
    pub relation: String,
    pub attribute: String,
    pub domain: Domain,
}

/// Overlay of pending values used to score a hypothetical world without
/// mutating the stored one.
pub type Overlay<'a> = &'a [(VariableRef, Value)];

fn value_at<'a>(world: &'a World, overlay: Overlay<'a>, var: &VariableRef) -> Result<&'a Value> {
    for (r, v) in overlay {
        if r == var {
            return Ok(v);
        }
    }
    world.field(var)
}

/// Templates plus hidden-field declarations; immutable once built and safe
/// to share read-only across chains. Worlds are always passed in explicitly.
#[derive(Default)]
pub struct FactorGraphSpec {
    templates: Vec<Box<dyn FactorTemplate>>,
    hidden: Vec<HiddenDecl>,
}

impl FactorGraphSpec {
    pub fn new() -> FactorGraphSpec {
        FactorGraphSpec::default()
    }

    pub fn add_template(&mut self, t: Box<dyn FactorTemplate>) {
        self.templates.push(t);
    }

    pub fn with_template(mut self, t: Box<dyn FactorTemplate>) -> FactorGraphSpec {
        self.add_template(t);
        self
    }

    pub fn add_hidden(&mut self, relation: &str, attribute: &str, domain: Domain) {
        self.hidden.push(HiddenDecl {
            relation: relation.into(),
            attribute: attribute.into(),
            domain,
        });
    }

    pub fn with_hidden(mut self, relation: &str, attribute: &str, domain: Domain) -> Self {
        self.add_hidden(relation, attribute, domain);
        self
    }

    pub fn templates(&self) -> &[Box<dyn FactorTemplate>] {
        &self.templates
    }

    /// Move the templates out, leaving the spec empty. Supports splicing
    /// template sets together when assembling a spec from parts.
    pub fn take_templates(&mut self) -> Vec<Box<dyn FactorTemplate>> {
        std::mem::take(&mut self.templates)
    }

    pub fn hidden_decls(&self) -> &[HiddenDecl] {
        &self.hidden
    }

    /// Register this spec's hidden declarations on the world. Fails if a
    /// field is already hidden with a different domain.
    pub fn bind(&self, world: &mut World) -> Result<()> {
        for h in &self.hidden {
            world.declare_hidden(&h.relation, &h.attribute, h.domain.clone())?;
        }
        Ok(())
    }

    /// log of the factor value of one instance under `overlay`.
    pub fn instance_log_score(
        &self,
        world: &World,
        template: usize,
        vars: &NeighborSet,
        overlay: Overlay,
    ) -> Result<f64> {
        world.note_factor_eval();
        let tmpl = &self.templates[template];
        let mut assignment: SmallVec<[Value; 4]> = SmallVec::with_capacity(vars.len());
        for v in vars {
            assignment.push(value_at(world, overlay, v)?.clone());
        }
        tmpl.log_score(&assignment)
    }

    /// Sum of `log psi` over every instantiated factor: the unnormalized log
    /// probability of the world (the normalizer is never involved).
    pub fn world_log_score(&self, world: &World) -> Result<f64> {
        let mut total = 0.0;
        for (ti, tmpl) in self.templates.iter().enumerate() {
            for vars in tmpl.instances(world)? {
                total += self.instance_log_score(world, ti, &vars, &[])?;
            }
        }
        Ok(total)
    }

    /// Factor instances with at least one neighbor among `changed`. Each
    /// instance appears once even when several of its neighbors changed.
    pub fn touched_factors(
        &self,
        world: &World,
        changed: &[VariableRef],
    ) -> Result<Vec<FactorInstance>> {
        let mut scratch = Vec::new();
        if let [single] = changed {
            let mut out = Vec::new();
            for (ti, tmpl) in self.templates.iter().enumerate() {
                scratch.clear();
                tmpl.touched(world, single, &mut scratch)?;
                out.extend(scratch.drain(..).map(|vars| FactorInstance {
                    template: ti,
                    vars,
                }));
            }
            return Ok(out);
        }
        let mut seen = BTreeSet::new();
        for var in changed {
            for (ti, tmpl) in self.templates.iter().enumerate() {
                scratch.clear();
                tmpl.touched(world, var, &mut scratch)?;
                for vars in scratch.drain(..) {
                    seen.insert(FactorInstance {
                        template: ti,
                        vars,
                    });
                }
            }
        }
        Ok(seen.into_iter().collect())
    }

    /// Hidden fields whose value differs across `delta`, with old and new
    /// values. Insertions and deletions are not score-able modifications.
    pub fn changed_vars(
        &self,
        world: &World,
        delta: &Delta,
    ) -> Result<Vec<(VariableRef, Value, Value)>> {
        let mut out = Vec::new();
        for ((rel_name, key), entry) in delta.entries() {
            let schema = world.schema(rel_name)?.clone();
            let (pre, post) = match (&entry.pre, &entry.post) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(Error::Unsupported(
                        "score ratio over tuple insertion/deletion".into(),
                    ))
                }
            };
            for (i, attr) in schema.attrs.iter().enumerate() {
                if pre.values[i] != post.values[i] {
                    out.push((
                        VariableRef {
                            relation: schema.relation.clone(),
                            key: *key,
                            attribute: attr.name.clone(),
                        },
                        pre.values[i].clone(),
                        post.values[i].clone(),
                    ));
                }
            }
        }
        Ok(out)
    }

    /// `log pi(w') - log pi(w)` where `w` is the current world and `w'` the
    /// world after `delta`, computed over touched factors only. Factors not
    /// neighboring a changed variable cancel from the ratio exactly.
    pub fn log_score_ratio(&self, world: &World, delta: &Delta) -> Result<f64> {
        let changed = self.changed_vars(world, delta)?;
        if changed.is_empty() {
            return Ok(0.0);
        }
        let overlay: SmallVec<[(VariableRef, Value); 2]> = changed
            .iter()
            .map(|(r, _, new)| (r.clone(), new.clone()))
            .collect();
        let refs: SmallVec<[VariableRef; 2]> =
            changed.iter().map(|(r, _, _)| r.clone()).collect();
        let touched = self.touched_factors(world, &refs)?;
        let mut new_total = 0.0;
        let mut old_total = 0.0;
        for inst in &touched {
            new_total += self.instance_log_score(world, inst.template, &inst.vars, &overlay)?;
            if new_total == f64::NEG_INFINITY {
                // The proposed world is impossible; the old side no longer
                // matters and finishing it could only manufacture NaN.
                return Ok(f64::NEG_INFINITY);
            }
            old_total += self.instance_log_score(world, inst.template, &inst.vars, &[])?;
        }
        Ok(new_total - old_total)
    }
}

/// Free-function form of template scoring: `phi(assignment) . theta`.
pub fn factor_log_score(template: &dyn FactorTemplate, assignment: &[Value]) -> Result<f64> {
    template.log_score(assignment)
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn table_template_scores_are_dot_products() {
        let t = TableTemplate::new(
            "t",
            vec![pair_ref(0)],
            vec![pair_domain()],
            vec![0.5, -1.25],
        )
        .unwrap();
        let a = [Value::str("a")];
        assert_eq!(t.log_score(&a).unwrap(), 0.5);
        assert_eq!(
            sparse_dot(&t.features(&a).unwrap(), t.weights()),
            t.log_score(&a).unwrap()
        );
        let b = [Value::str("b")];
        assert_eq!(t.log_score(&b).unwrap(), -1.25);
    }

    #[test]
    fn zero_feature_vector_scores_zero() {
        struct ZeroFeatures;
        impl FactorTemplate for ZeroFeatures {
            fn name(&self) -> &str {
                "zero"
            }
            fn arity(&self) -> usize {
                1
            }
            fn weights(&self) -> &[f64] {
                &[3.0, 4.0]
            }
            fn features(&self, _: &[Value]) -> Result<Vec<f64>> {
                Ok(vec![0.0, 0.0])
            }
            fn instances(&self, _: &World) -> Result<Vec<NeighborSet>> {
                Ok(vec![])
            }
            fn touched(&self, _: &World, _: &VariableRef, _: &mut Vec<NeighborSet>) -> Result<()> {
                Ok(())
            }
        }
        assert_eq!(
            factor_log_score(&ZeroFeatures, &[Value::str("a")]).unwrap(),
            0.0
        );
    }

    #[test]
    fn violated_constraint_scores_neg_infinity() {
        let t = TableTemplate::new(
            "forbid-b",
            vec![pair_ref(0)],
            vec![pair_domain()],
            vec![0.0, f64::NEG_INFINITY],
        )
        .unwrap();
        assert_eq!(t.log_score(&[Value::str("b")]).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn out_of_domain_assignment_is_an_error() {
        let t = TableTemplate::new("t", vec![pair_ref(0)], vec![pair_domain()], vec![0.0, 0.0])
            .unwrap();
        assert!(matches!(
            t.log_score(&[Value::str("zzz")]),
            Err(Error::OutOfDomain { .. })
        ));
    }

    #[test]
    fn empty_spec_scores_zero() {
        let w = pair_world();
        let spec = FactorGraphSpec::new();
        assert_eq!(spec.world_log_score(&w).unwrap(), 0.0);
    }

    #[test]
    fn world_log_score_matches_per_factor_enumeration() {
        let (mut w, spec) = chain3();
        w.update_field(&VariableRef::new("C", 1, "L"), Value::str("y"))
            .unwrap();
        // Independent route: gather each instance's values by hand and sum
        // template scores directly.
        let mut expected = 0.0;
        for (ti, tmpl) in spec.templates().iter().enumerate() {
            for vars in tmpl.instances(&w).unwrap() {
                let assignment: Vec<Value> = vars
                    .iter()
                    .map(|r| w.field(r).unwrap().clone())
                    .collect();
                expected += spec.templates()[ti].log_score(&assignment).unwrap();
            }
        }
        assert!((spec.world_log_score(&w).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn score_is_invariant_under_enumeration_order() {
        let (w, spec) = chain3();
        let baseline = spec.world_log_score(&w).unwrap();
        // Re-sum per-instance scores under multiple shuffled orders.
        let mut parts = Vec::new();
        for (ti, tmpl) in spec.templates().iter().enumerate() {
            for vars in tmpl.instances(&w).unwrap() {
                parts.push(spec.instance_log_score(&w, ti, &vars, &[]).unwrap());
            }
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            for i in (1..parts.len()).rev() {
                parts.swap(i, rng.gen_range(0..=i));
            }
            let sum: f64 = parts.iter().sum();
            assert!((sum - baseline).abs() < 1e-9);
        }
    }

    #[test]
    fn all_zero_template_changes_nothing() {
        let (w, mut spec) = chain3();
        let before = spec.world_log_score(&w).unwrap();
        spec.add_template(Box::new(
            TableTemplate::new(
                "null",
                vec![VariableRef::new("C", 0, "L"), VariableRef::new("C", 1, "L")],
                vec![Domain::of_strs(&["x", "y"]), Domain::of_strs(&["x", "y"])],
                vec![0.0; 4],
            )
            .unwrap(),
        ));
        assert_eq!(spec.world_log_score(&w).unwrap(), before);
    }

    #[test]
    fn touched_factors_on_chain_middle() {
        let (w, spec) = chain3();
        assert!(spec.touched_factors(&w, &[]).unwrap().is_empty());
        // Transition templates are indices 3 and 4; the middle label touches
        // both, plus its own emission.
        let touched = spec
            .touched_factors(&w, &[VariableRef::new("C", 1, "L")])
            .unwrap();
        let transitions = touched.iter().filter(|f| f.template >= 3).count();
        assert_eq!(transitions, 2);
        assert_eq!(touched.len(), 3);
    }

    #[test]
    fn empty_delta_ratio_is_zero() {
        let (w, spec) = chain3();
        assert_eq!(spec.log_score_ratio(&w, &Delta::empty()).unwrap(), 0.0);
    }

    #[test]
    fn ratio_matches_full_score_difference() {
        let (w0, spec) = chain3();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let mut w = w0.clone_world();
            // Randomize the base world.
            for id in 0..3 {
                let v = if rng.gen::<bool>() { "x" } else { "y" };
                w.update_field(&VariableRef::new("C", id, "L"), Value::str(v))
                    .unwrap();
            }
            let base = spec.world_log_score(&w).unwrap();
            // A delta over 1..3 variables.
            let mut probe = w.clone_world();
            let mut delta = Delta::empty();
            for id in 0..3 {
                if rng.gen::<f64>() < 0.6 {
                    let v = if rng.gen::<bool>() { "x" } else { "y" };
                    delta.merge(
                        probe
                            .update_field(&VariableRef::new("C", id, "L"), Value::str(v))
                            .unwrap(),
                    );
                }
            }
            let full = spec.world_log_score(&probe).unwrap() - base;
            let local = spec.log_score_ratio(&w, &delta).unwrap();
            assert!(
                (full - local).abs() < 1e-9,
                "full {full} vs local {local}"
            );
        }
    }

    #[test]
    fn ratio_into_forbidden_world_is_neg_infinity() {
        let spec = constrained_spec();
        let mut w = pair_world();
        let d = w.update_field(&pair_ref(0), Value::str("b")).unwrap();
        w.revert_delta(&d).unwrap();
        assert_eq!(
            spec.log_score_ratio(&w, &d).unwrap(),
            f64::NEG_INFINITY
        );
    }
}
