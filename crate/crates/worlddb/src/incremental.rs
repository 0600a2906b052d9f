//! Delta-query evaluation and multiset answer maintenance.
//!
//! Instead of re-running a query on every sampled world, the answer is
//! carried forward: `Q(w') = Q(w) - Q'(w, minus) + Q'(w, plus)` where the
//! delta queries touch only the changed tuples (selections, projections,
//! aggregates) or the changed tuples joined against the untouched side
//! (products). All bookkeeping is multiset arithmetic, so projections keep
//! correct membership under removal.
//!
//! Algebra-only trees need no state and can go through [`delta_execute`].
//! Aggregates maintain per-group counters across samples, owned by a
//! [`Session`]; the session also accepts the world in either its pre- or
//! post-delta state, reconstructing the other side from the delta, so the
//! sampler may mutate its world in place.

use std::collections::BTreeMap;

use crate::query::exec::{eval_pred, Node, Plan};
use crate::query::{execute_plan, validate, MultisetAnswer, Query};
use crate::store::{Delta, DeltaEntry, Value, World};
use crate::{Error, Result};

/// Which side of the delta the supplied world is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorldIs {
    /// The world is `w`: the delta has not been applied to it.
    Pre,
    /// The world is `w'`: the delta has already been applied.
    Post,
}

/// Rows to remove from and add to a maintained answer. Splitting a signed
/// computation guarantees a tuple never appears on both sides.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnswerDelta {
    pub removals: MultisetAnswer,
    pub additions: MultisetAnswer,
}

impl AnswerDelta {
    pub fn is_empty(&self) -> bool {
        self.removals.is_empty() && self.additions.is_empty()
    }

    /// The delta that undoes this one.
    pub fn inverted(&self) -> AnswerDelta {
        AnswerDelta {
            removals: self.additions.clone(),
            additions: self.removals.clone(),
        }
    }
}

/// Apply an answer delta: subtract removals (checked), then add additions.
/// A removal exceeding the stored count is a corruption error; it means
/// the delta being maintained did not describe the world transition.
pub fn maintain(answer: &mut MultisetAnswer, delta: &AnswerDelta) -> Result<()> {
    for (tuple, count) in delta.removals.iter() {
        answer.remove_checked(tuple, count)?;
    }
    for (tuple, count) in delta.additions.iter() {
        answer.add(tuple.clone(), count);
    }
    Ok(())
}

/// Rows with signed multiplicities; negatives are pending removals.
type Signed = BTreeMap<Vec<Value>, i64>;

fn signed_add(map: &mut Signed, row: Vec<Value>, count: i64) {
    use std::collections::btree_map::Entry;
    if count == 0 {
        return;
    }
    match map.entry(row) {
        Entry::Occupied(mut e) => {
            *e.get_mut() += count;
            if *e.get() == 0 {
                e.remove();
            }
        }
        Entry::Vacant(e) => {
            e.insert(count);
        }
    }
}

fn split_signed(signed: Signed) -> AnswerDelta {
    let mut out = AnswerDelta::default();
    for (row, c) in signed {
        use std::cmp::Ordering::*;
        match c.cmp(&0) {
            Less => out.removals.add(row, (-c) as u64),
            Greater => out.additions.add(row, c as u64),
            Equal => {}
        }
    }
    out
}

/// Evaluation ages inside a delta view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Age {
    Old,
    New,
}

/// A world plus a delta, oriented by [`WorldIs`]; presents old-world and
/// new-world row sets for any relation, whichever side the stored world
/// actually is.
struct DeltaView<'a> {
    world: &'a World,
    world_is: WorldIs,
    /// Per relation: key -> delta entry.
    patches: BTreeMap<&'a str, BTreeMap<i64, &'a DeltaEntry>>,
}

impl<'a> DeltaView<'a> {
    fn new(world: &'a World, delta: &'a Delta, world_is: WorldIs) -> DeltaView<'a> {
        let mut patches: BTreeMap<&str, BTreeMap<i64, &DeltaEntry>> = BTreeMap::new();
        for ((rel, key), entry) in delta.entries() {
            patches.entry(rel).or_default().insert(*key, entry);
        }
        DeltaView {
            world,
            world_is,
            patches,
        }
    }

    fn patch(&self, relation: &str) -> Option<&BTreeMap<i64, &'a DeltaEntry>> {
        self.patches.get(relation)
    }

    /// Signed scan delta of a base relation: post-images +1, pre-images -1.
    fn scan_signed(&self, relation: &str) -> Signed {
        let mut out = Signed::new();
        if let Some(patch) = self.patch(relation) {
            for entry in patch.values() {
                if let Some(pre) = &entry.pre {
                    signed_add(&mut out, pre.values.clone(), -1);
                }
                if let Some(post) = &entry.post {
                    signed_add(&mut out, post.values.clone(), 1);
                }
            }
        }
        out
    }

    /// Materialize a relation's rows at the requested age. The age matching
    /// the stored world is a plain scan; the other age is the stored world
    /// patched through the delta. Either way every base tuple inspected is
    /// counted.
    fn scan_rows(&self, relation: &str, age: Age) -> Result<Vec<Vec<Value>>> {
        let rel = self.world.relation(relation)?;
        let native = (age == Age::Old) == (self.world_is == WorldIs::Pre);
        self.world.note_tuple_reads(rel.tuples.len() as u64);
        if native {
            return Ok(rel.tuples.values().map(|t| t.values.clone()).collect());
        }
        let empty = BTreeMap::new();
        let patch = self.patch(relation).unwrap_or(&empty);
        // Substitute patched tuples, then append patch-only keys (insertions
        // when walking forward, deletions when walking backward).
        let mut rows = Vec::with_capacity(rel.tuples.len());
        let side = |e: &DeltaEntry| match (self.world_is, age) {
            (WorldIs::Pre, Age::New) => e.post.clone(),
            (WorldIs::Post, Age::Old) => e.pre.clone(),
            _ => unreachable!("native ages are scanned directly"),
        };
        for (key, tuple) in &rel.tuples {
            match patch.get(key) {
                None => rows.push(tuple.values.clone()),
                Some(e) => {
                    if let Some(t) = side(e) {
                        rows.push(t.values);
                    }
                }
            }
        }
        for (key, e) in patch {
            if !rel.tuples.contains_key(key) {
                if let Some(t) = side(e) {
                    rows.push(t.values);
                }
            }
        }
        Ok(rows)
    }
}

/// Signed delta of the rows an algebra node produces. Aggregate nodes are
/// stateful and rejected here; they are handled by [`Session`].
fn node_delta(node: &Node, view: &DeltaView) -> Result<Signed> {
    match node {
        Node::Scan { relation } => Ok(view.scan_signed(relation)),
        Node::Select { input, predicate } => {
            let mut signed = node_delta(input, view)?;
            signed.retain(|row, _| eval_pred(predicate, row));
            Ok(signed)
        }
        Node::Project { input, indices } => {
            let signed = node_delta(input, view)?;
            let mut out = Signed::new();
            for (row, c) in signed {
                let projected: Vec<Value> = indices.iter().map(|i| row[*i].clone()).collect();
                signed_add(&mut out, projected, c);
            }
            Ok(out)
        }
        Node::Product { left, right } => {
            let dl = node_delta(left, view)?;
            let dr = node_delta(right, view)?;
            if dl.is_empty() && dr.is_empty() {
                return Ok(Signed::new());
            }
            // With the native side S (old rows under a pre world, new rows
            // under a post world):
            //   pre:  delta = L_old x dR + dL x R_old + dL x dR
            //   post: delta = L_new x dR + dL x R_new - dL x dR
            let (age, cross_sign) = match view.world_is {
                WorldIs::Pre => (Age::Old, 1),
                WorldIs::Post => (Age::New, -1),
            };
            let mut out = Signed::new();
            if !dr.is_empty() {
                let lrows = view_rows(left, view, age)?;
                for l in &lrows {
                    for (r, c) in &dr {
                        let mut row = Vec::with_capacity(l.len() + r.len());
                        row.extend(l.iter().cloned());
                        row.extend(r.iter().cloned());
                        signed_add(&mut out, row, *c);
                    }
                }
            }
            if !dl.is_empty() {
                let rrows = view_rows(right, view, age)?;
                for (l, c) in &dl {
                    for r in &rrows {
                        let mut row = Vec::with_capacity(l.len() + r.len());
                        row.extend(l.iter().cloned());
                        row.extend(r.iter().cloned());
                        signed_add(&mut out, row, *c);
                    }
                }
            }
            if !dl.is_empty() && !dr.is_empty() {
                for (l, cl) in &dl {
                    for (r, cr) in &dr {
                        let mut row = Vec::with_capacity(l.len() + r.len());
                        row.extend(l.iter().cloned());
                        row.extend(r.iter().cloned());
                        signed_add(&mut out, row, cl * cr * cross_sign);
                    }
                }
            }
            Ok(out)
        }
        Node::CountAll { .. } | Node::GroupCount { .. } | Node::CountEq { .. } => {
            Err(Error::Unsupported(
                "aggregate maintenance needs a Session with cached group counts".into(),
            ))
        }
    }
}

/// Rows of an algebra node at the requested age of the view.
fn view_rows(node: &Node, view: &DeltaView, age: Age) -> Result<Vec<Vec<Value>>> {
    match node {
        Node::Scan { relation } => view.scan_rows(relation, age),
        Node::Select { input, predicate } => {
            let mut rows = view_rows(input, view, age)?;
            rows.retain(|r| eval_pred(predicate, r));
            Ok(rows)
        }
        Node::Project { input, indices } => {
            let rows = view_rows(input, view, age)?;
            Ok(rows
                .into_iter()
                .map(|r| indices.iter().map(|i| r[*i].clone()).collect())
                .collect())
        }
        Node::Product { left, right } => {
            let l = view_rows(left, view, age)?;
            let r = view_rows(right, view, age)?;
            let mut out = Vec::with_capacity(l.len() * r.len());
            for lr in &l {
                for rr in &r {
                    let mut row = Vec::with_capacity(lr.len() + rr.len());
                    row.extend(lr.iter().cloned());
                    row.extend(rr.iter().cloned());
                    out.push(row);
                }
            }
            Ok(out)
        }
        Node::CountAll { .. } | Node::GroupCount { .. } | Node::CountEq { .. } => Err(
            Error::Unsupported("aggregates cannot appear under other operators".into()),
        ),
    }
}

/// Stateless delta query for algebra-only trees (selections, projections,
/// products): the answer delta turning `Q(prev_world)` into
/// `Q(apply(prev_world, delta))`. Aggregates need a [`Session`].
pub fn delta_execute(query: &Query, prev_world: &World, delta: &Delta) -> Result<AnswerDelta> {
    let plan = validate(query, prev_world)?;
    let view = DeltaView::new(prev_world, delta, WorldIs::Pre);
    Ok(split_signed(node_delta(&plan.root, &view)?))
}

/// Per-group counters for the correlated count-equality query.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct GroupStats {
    total: i64,
    left: i64,
    right: i64,
}

/// Cached aggregate state, keyed by the root node shape.
enum AggState {
    /// Pure algebra: nothing to cache.
    None,
    CountAll { count: i64 },
    GroupCount { groups: BTreeMap<Vec<Value>, i64> },
    CountEq { groups: BTreeMap<Value, GroupStats> },
}

/// One maintained query: the validated plan plus whatever per-group counts
/// its root aggregate needs. State is confined to a single chain and is
/// rebuilt by constructing a fresh session (the caches belong to the query;
/// change the query, drop the session).
pub struct Session {
    plan: Plan,
    state: AggState,
}

impl Session {
    /// Validate and fully execute `query` on the initial world: the one
    /// exhaustive evaluation. Returns the initial answer and the session
    /// that maintains it.
    pub fn start(query: &Query, world: &World) -> Result<(MultisetAnswer, Session)> {
        let plan = validate(query, world)?;
        let (state, answer) = match &plan.root {
            Node::CountAll { input } => {
                let rows = crate::query::exec::eval_rows(input, world)?;
                let count = rows.len() as i64;
                let mut answer = MultisetAnswer::new();
                answer.add(vec![Value::Int(count)], 1);
                (AggState::CountAll { count }, answer)
            }
            Node::GroupCount { input, indices } => {
                let rows = crate::query::exec::eval_rows(input, world)?;
                let mut groups: BTreeMap<Vec<Value>, i64> = BTreeMap::new();
                for r in rows {
                    let g: Vec<Value> = indices.iter().map(|i| r[*i].clone()).collect();
                    *groups.entry(g).or_insert(0) += 1;
                }
                let mut answer = MultisetAnswer::new();
                for (g, c) in &groups {
                    let mut row = g.clone();
                    row.push(Value::Int(*c));
                    answer.add(row, 1);
                }
                (AggState::GroupCount { groups }, answer)
            }
            Node::CountEq {
                relation,
                group_idx,
                left,
                right,
                distinct,
            } => {
                let rel = world.relation(relation)?;
                world.note_tuple_reads(rel.tuples.len() as u64);
                let mut groups: BTreeMap<Value, GroupStats> = BTreeMap::new();
                for t in rel.tuples.values() {
                    let g = t.values[*group_idx].clone();
                    let e = groups.entry(g).or_default();
                    e.total += 1;
                    if eval_pred(left, &t.values) {
                        e.left += 1;
                    }
                    if eval_pred(right, &t.values) {
                        e.right += 1;
                    }
                }
                let mut answer = MultisetAnswer::new();
                for (g, s) in &groups {
                    if s.left == s.right {
                        let copies = if *distinct { 1 } else { s.total as u64 };
                        answer.add(vec![g.clone()], copies);
                    }
                }
                (AggState::CountEq { groups }, answer)
            }
            _ => (AggState::None, execute_plan(&plan, world)?),
        };
        Ok((answer, Session { plan, state }))
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    /// Answer delta for one world transition. `world` may be supplied
    /// before or after the delta was applied; say which via `world_is`.
    pub fn delta_execute(
        &mut self,
        world: &World,
        delta: &Delta,
        world_is: WorldIs,
    ) -> Result<AnswerDelta> {
        if delta.is_empty() {
            return Ok(AnswerDelta::default());
        }
        let view = DeltaView::new(world, delta, world_is);
        match &mut self.state {
            AggState::None => Ok(split_signed(node_delta(&self.plan.root, &view)?)),
            AggState::CountAll { count } => {
                let Node::CountAll { input } = &self.plan.root else {
                    unreachable!("state matches root shape by construction");
                };
                let signed = node_delta(input, &view)?;
                let net: i64 = signed.values().sum();
                let mut out = AnswerDelta::default();
                if net != 0 {
                    let new = *count + net;
                    if new < 0 {
                        return Err(Error::Corruption(format!(
                            "count aggregate driven negative ({new})"
                        )));
                    }
                    out.removals.add(vec![Value::Int(*count)], 1);
                    out.additions.add(vec![Value::Int(new)], 1);
                    *count = new;
                }
                Ok(out)
            }
            AggState::GroupCount { groups } => {
                let Node::GroupCount { input, indices } = &self.plan.root else {
                    unreachable!("state matches root shape by construction");
                };
                let signed = node_delta(input, &view)?;
                let mut nets: BTreeMap<Vec<Value>, i64> = BTreeMap::new();
                for (row, c) in signed {
                    let g: Vec<Value> = indices.iter().map(|i| row[*i].clone()).collect();
                    *nets.entry(g).or_insert(0) += c;
                }
                let mut out = AnswerDelta::default();
                for (g, net) in nets {
                    if net == 0 {
                        continue;
                    }
                    let old = groups.get(&g).copied().unwrap_or(0);
                    let new = old + net;
                    if new < 0 {
                        return Err(Error::Corruption(format!(
                            "group {g:?} count driven negative ({new})"
                        )));
                    }
                    if old > 0 {
                        let mut row = g.clone();
                        row.push(Value::Int(old));
                        out.removals.add(row, 1);
                    }
                    if new > 0 {
                        let mut row = g.clone();
                        row.push(Value::Int(new));
                        out.additions.add(row, 1);
                        groups.insert(g, new);
                    } else {
                        groups.remove(&g);
                    }
                }
                Ok(out)
            }
            AggState::CountEq { groups } => {
                let Node::CountEq {
                    relation,
                    group_idx,
                    left,
                    right,
                    distinct,
                } = &self.plan.root
                else {
                    unreachable!("state matches root shape by construction");
                };
                let signed = view.scan_signed(relation);
                // Snapshot each touched group before mutating its counters.
                let mut touched: BTreeMap<Value, GroupStats> = BTreeMap::new();
                for (row, c) in &signed {
                    let g = row[*group_idx].clone();
                    let before = groups.get(&g).copied().unwrap_or_default();
                    touched.entry(g.clone()).or_insert(before);
                    let e = groups.entry(g).or_default();
                    e.total += c;
                    if eval_pred(left, row) {
                        e.left += c;
                    }
                    if eval_pred(right, row) {
                        e.right += c;
                    }
                }
                let contribution = |s: &GroupStats| -> Result<u64> {
                    if s.total < 0 || s.left < 0 || s.right < 0 {
                        return Err(Error::Corruption(format!(
                            "group counters driven negative: {s:?}"
                        )));
                    }
                    Ok(if s.total > 0 && s.left == s.right {
                        if *distinct {
                            1
                        } else {
                            s.total as u64
                        }
                    } else {
                        0
                    })
                };
                let mut out = AnswerDelta::default();
                for (g, before) in touched {
                    let after = groups.get(&g).copied().unwrap_or_default();
                    let old_c = contribution(&before)?;
                    let new_c = contribution(&after)?;
                    if after.total == 0 {
                        groups.remove(&g);
                    }
                    if old_c > 0 {
                        out.removals.add(vec![g.clone()], old_c);
                    }
                    if new_c > 0 {
                        out.additions.add(vec![g.clone()], new_c);
                    }
                }
                // Cancel tuples present on both sides (a group keeping the
                // same contribution emits nothing).
                let mut signed_out = Signed::new();
                for (t, c) in out.removals.iter() {
                    signed_add(&mut signed_out, t.clone(), -(c as i64));
                }
                for (t, c) in out.additions.iter() {
                    signed_add(&mut signed_out, t.clone(), c as i64);
                }
                Ok(split_signed(signed_out))
            }
        }
    }
}
