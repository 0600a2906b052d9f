//! Shared test infrastructure: an independent reference query evaluator
//! (plain nested loops, no shared code with the engine's evaluator), world
//! builders, and randomized generators for worlds, deltas and queries.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use worlddb::query::{ColRef, Literal, Predicate, Query};
use worlddb::store::{
    bio_domain, token_schema, Delta, Tuple, Value, VariableRef, World, BIO_LABELS, LABEL, TOKEN,
};

pub type RefAnswer = BTreeMap<Vec<Value>, u64>;

/// Rows with named columns, the working representation of the reference
/// evaluator.
#[derive(Clone)]
pub struct RefRows {
    pub names: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

fn ref_resolve(names: &[String], col: &ColRef) -> usize {
    if let Some(i) = names.iter().position(|n| n == &col.name) {
        return i;
    }
    let suffix = format!(".{}", col.name);
    let hits: Vec<usize> = names
        .iter()
        .enumerate()
        .filter(|(_, n)| n.ends_with(&suffix))
        .map(|(i, _)| i)
        .collect();
    assert_eq!(hits.len(), 1, "reference resolution of {} in {names:?}", col.name);
    hits[0]
}

fn ref_pred(pred: &Predicate, names: &[String], row: &[Value]) -> bool {
    match pred {
        Predicate::And(ps) => ps.iter().all(|p| ref_pred(p, names, row)),
        Predicate::Eq(c, lit) => row[ref_resolve(names, c)] == lit.to_value(),
        Predicate::Ne(c, lit) => row[ref_resolve(names, c)] != lit.to_value(),
        Predicate::EqCol(a, b) => {
            row[ref_resolve(names, a)] == row[ref_resolve(names, b)]
        }
    }
}

fn ref_rows(query: &Query, world: &World) -> RefRows {
    match query {
        Query::Scan { relation, alias } => {
            let rel = world.relation(relation).expect("reference scan");
            let names = rel
                .schema
                .attrs
                .iter()
                .map(|a| match alias {
                    Some(al) => format!("{al}.{}", a.name),
                    None => a.name.to_string(),
                })
                .collect();
            RefRows {
                names,
                rows: rel.tuples.values().map(|t| t.values.clone()).collect(),
            }
        }
        Query::Select { input, predicate } => {
            let mut r = ref_rows(input, world);
            r.rows.retain(|row| ref_pred(predicate, &r.names, row));
            r
        }
        Query::Project { input, columns } => {
            let r = ref_rows(input, world);
            let idx: Vec<usize> = columns.iter().map(|c| ref_resolve(&r.names, c)).collect();
            RefRows {
                names: idx.iter().map(|i| r.names[*i].clone()).collect(),
                rows: r
                    .rows
                    .iter()
                    .map(|row| idx.iter().map(|i| row[*i].clone()).collect())
                    .collect(),
            }
        }
        Query::Product { left, right } => {
            let l = ref_rows(left, world);
            let r = ref_rows(right, world);
            let mut names = l.names.clone();
            names.extend(r.names.iter().cloned());
            let mut rows = Vec::new();
            for a in &l.rows {
                for b in &r.rows {
                    let mut row = a.clone();
                    row.extend(b.iter().cloned());
                    rows.push(row);
                }
            }
            RefRows { names, rows }
        }
        Query::CountAll { input } => {
            let r = ref_rows(input, world);
            RefRows {
                names: vec!["COUNT(*)".into()],
                rows: vec![vec![Value::Int(r.rows.len() as i64)]],
            }
        }
        Query::GroupCount { input, group_by } => {
            let r = ref_rows(input, world);
            let idx: Vec<usize> = group_by.iter().map(|c| ref_resolve(&r.names, c)).collect();
            let mut groups: BTreeMap<Vec<Value>, i64> = BTreeMap::new();
            for row in &r.rows {
                let g: Vec<Value> = idx.iter().map(|i| row[*i].clone()).collect();
                *groups.entry(g).or_insert(0) += 1;
            }
            let mut names: Vec<String> = idx.iter().map(|i| r.names[*i].clone()).collect();
            names.push("COUNT(*)".into());
            RefRows {
                names,
                rows: groups
                    .into_iter()
                    .map(|(mut g, c)| {
                        g.push(Value::Int(c));
                        g
                    })
                    .collect(),
            }
        }
        Query::CountEq {
            relation,
            group_attr,
            left,
            right,
            distinct,
        } => {
            // Literal correlated-subquery semantics: for each tuple of the
            // relation, compare the two counts within its group.
            let rel = world.relation(relation).expect("reference count-eq");
            let names: Vec<String> =
                rel.schema.attrs.iter().map(|a| a.name.to_string()).collect();
            let gi = ref_resolve(&names, group_attr);
            let all: Vec<&Tuple> = rel.tuples.values().collect();
            let mut rows = Vec::new();
            let mut seen_groups: Vec<Value> = Vec::new();
            for t in &all {
                let g = &t.values[gi];
                let count_of = |p: &Predicate| {
                    all.iter()
                        .filter(|u| &u.values[gi] == g && ref_pred(p, &names, &u.values))
                        .count()
                };
                if count_of(left) == count_of(right) {
                    if *distinct {
                        if !seen_groups.contains(g) {
                            seen_groups.push(g.clone());
                            rows.push(vec![g.clone()]);
                        }
                    } else {
                        rows.push(vec![g.clone()]);
                    }
                }
            }
            RefRows {
                names: vec![names[gi].clone()],
                rows,
            }
        }
    }
}

/// Reference answer by brute force: bag semantics over plain nested loops.
pub fn reference_execute(query: &Query, world: &World) -> RefAnswer {
    let r = ref_rows(query, world);
    let mut out = RefAnswer::new();
    for row in r.rows {
        *out.entry(row).or_insert(0) += 1;
    }
    out
}

pub fn answer_to_map(a: &worlddb::query::MultisetAnswer) -> RefAnswer {
    a.iter().map(|(t, c)| (t.clone(), c)).collect()
}

// --------------------------------------------------------------------------
// World builders
// --------------------------------------------------------------------------

/// TOKEN world from (id, doc, string) triples; labels "O", hidden.
pub fn token_world(tokens: &[(i64, i64, &str)]) -> World {
    let mut w = World::new();
    w.add_relation(token_schema()).unwrap();
    w.declare_hidden(TOKEN, LABEL, bio_domain()).unwrap();
    for (id, doc, s) in tokens {
        w.insert_tuple(
            TOKEN,
            Tuple::new(vec![
                Value::Int(*id),
                Value::Int(*doc),
                Value::str(*s),
                Value::str("O"),
                Value::str("O"),
            ]),
        )
        .unwrap();
    }
    w.build_token_index(
        TOKEN,
        "DOC_ID",
        "STRING",
        worlddb::store::SkipScope::Document,
        true,
    )
    .unwrap();
    w
}

pub fn label_ref(key: i64) -> VariableRef {
    VariableRef::new(TOKEN, key, LABEL)
}

/// Random TOKEN world: `n` tuples spread over documents of ~`doc_size`
/// tokens drawing strings from a small pool (repeats make joins and skip
/// factors interesting), labels randomized.
pub fn random_token_world(rng: &mut impl Rng, n: usize, doc_size: usize) -> World {
    let pool = ["Ada", "Byte", "Cray", "Dell", "Enigma", "fox", "git", "hub"];
    let tokens: Vec<(i64, i64, &str)> = (0..n)
        .map(|i| {
            (
                i as i64,
                (i / doc_size.max(1)) as i64,
                pool[rng.gen_range(0..pool.len())],
            )
        })
        .collect();
    let mut w = token_world(&tokens);
    for i in 0..n {
        let label = BIO_LABELS[rng.gen_range(0..BIO_LABELS.len())];
        w.update_field(&label_ref(i as i64), Value::str(label))
            .unwrap();
    }
    w
}

/// Coalesced delta of `flips` random label flips applied to `world`.
pub fn random_delta(world: &mut World, rng: &mut impl Rng, flips: usize) -> Delta {
    let keys: Vec<i64> = world
        .relation(TOKEN)
        .unwrap()
        .tuples
        .keys()
        .copied()
        .collect();
    let mut acc = Delta::empty();
    for _ in 0..flips {
        let key = keys[rng.gen_range(0..keys.len())];
        let label = BIO_LABELS[rng.gen_range(0..BIO_LABELS.len())];
        acc.merge(
            world
                .update_field(&label_ref(key), Value::str(label))
                .unwrap(),
        );
    }
    acc
}

// --------------------------------------------------------------------------
// Random queries from the four benchmark shapes
// --------------------------------------------------------------------------

fn random_label(rng: &mut impl Rng) -> &'static str {
    BIO_LABELS[rng.gen_range(0..BIO_LABELS.len())]
}

/// A query drawn from the selection / projection / count / group-count /
/// self-join / correlated-count family.
pub fn random_query(rng: &mut impl Rng) -> Query {
    match rng.gen_range(0..6) {
        // Selection + projection over STRING (shape of the scalability
        // query).
        0 => Query::scan(TOKEN)
            .select(Predicate::eq_str(LABEL, random_label(rng)))
            .project(&["STRING"]),
        // Bare selection, full rows.
        1 => {
            let p = if rng.gen::<bool>() {
                Predicate::eq_str(LABEL, random_label(rng))
            } else {
                Predicate::Ne(ColRef::new(LABEL), Literal::Str(random_label(rng).into()))
            };
            Query::scan(TOKEN).select(p)
        }
        // Count of a selection.
        2 => Query::scan(TOKEN)
            .select(Predicate::eq_str(LABEL, random_label(rng)))
            .count_all(),
        // Per-document counts of a selection.
        3 => Query::scan(TOKEN)
            .select(Predicate::eq_str(LABEL, random_label(rng)))
            .group_count(&["DOC_ID"]),
        // Self-join on DOC_ID (shape of the co-occurrence query).
        4 => Query::scan_as(TOKEN, "T1")
            .product(Query::scan_as(TOKEN, "T2"))
            .select(Predicate::And(vec![
                Predicate::eq_str("T1.LABEL", random_label(rng)),
                Predicate::EqCol(ColRef::new("T1.DOC_ID"), ColRef::new("T2.DOC_ID")),
                Predicate::eq_str("T2.LABEL", random_label(rng)),
            ]))
            .project(&["T2.STRING"]),
        // Correlated count equality (the document-balance query).
        _ => Query::CountEq {
            relation: TOKEN.into(),
            group_attr: ColRef::new("DOC_ID"),
            left: Box::new(Predicate::eq_str(LABEL, random_label(rng))),
            right: Box::new(Predicate::eq_str(LABEL, random_label(rng))),
            distinct: rng.gen::<f64>() < 0.3,
        },
    }
}
