//! Query validation and the from-scratch evaluator.
//!
//! [`validate`] resolves every column reference against the world's schemas
//! up front and produces a [`Plan`] with positional lookups, so execution
//! can never fail on a schema mismatch mid-flight. [`execute`] runs the
//! plan with standard multiset semantics.

use std::collections::BTreeMap;

use crate::error::ValidationError;
use crate::query::{ColRef, MultisetAnswer, Predicate, Query};
use crate::store::{AttrKind, Value, World};
use crate::{Error, Result};

/// Column type as far as predicates care: integers or text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ColType {
    Int,
    Text,
}

/// Output column layout of a plan node.
#[derive(Debug, Clone)]
pub(crate) struct RowSchema {
    pub names: Vec<String>,
    pub types: Vec<ColType>,
}

impl RowSchema {
    /// Resolve a possibly-qualified column reference: exact name match
    /// first, then a unique `.name` suffix match.
    fn resolve(&self, col: &ColRef, errors: &mut Vec<ValidationError>) -> Option<usize> {
        if let Some(i) = self.names.iter().position(|n| n == &col.name) {
            return Some(i);
        }
        let suffix = format!(".{}", col.name);
        let mut hits = self.names.iter().enumerate().filter(|(_, n)| n.ends_with(&suffix));
        match (hits.next(), hits.next()) {
            (Some((i, _)), None) => Some(i),
            (Some(_), Some(_)) => {
                errors.push(ValidationError {
                    message: format!("ambiguous column {}", col.name),
                    position: col.pos,
                });
                None
            }
            _ => {
                errors.push(ValidationError {
                    message: format!("unknown column {}", col.name),
                    position: col.pos,
                });
                None
            }
        }
    }
}

/// One comparison with resolved column positions.
#[derive(Debug, Clone)]
pub(crate) enum PredOp {
    Eq(usize, Value),
    Ne(usize, Value),
    EqCol(usize, usize),
}

pub(crate) fn eval_pred(ops: &[PredOp], row: &[Value]) -> bool {
    ops.iter().all(|op| match op {
        PredOp::Eq(i, v) => &row[*i] == v,
        PredOp::Ne(i, v) => &row[*i] != v,
        PredOp::EqCol(i, j) => row[*i] == row[*j],
    })
}

#[derive(Debug, Clone)]
pub(crate) enum Node {
    Scan {
        relation: String,
    },
    Select {
        input: Box<Node>,
        predicate: Vec<PredOp>,
    },
    Project {
        input: Box<Node>,
        indices: Vec<usize>,
    },
    Product {
        left: Box<Node>,
        right: Box<Node>,
    },
    CountAll {
        input: Box<Node>,
    },
    GroupCount {
        input: Box<Node>,
        indices: Vec<usize>,
    },
    CountEq {
        relation: String,
        group_idx: usize,
        left: Vec<PredOp>,
        right: Vec<PredOp>,
        distinct: bool,
    },
}

/// A validated query: output column names plus an executable tree with all
/// references resolved to positions.
#[derive(Debug, Clone)]
pub struct Plan {
    pub columns: Vec<String>,
    pub(crate) root: Node,
}

fn flatten_predicate(
    p: &Predicate,
    schema: &RowSchema,
    errors: &mut Vec<ValidationError>,
    out: &mut Vec<PredOp>,
) {
    match p {
        Predicate::And(ps) => {
            for q in ps {
                flatten_predicate(q, schema, errors, out);
            }
        }
        Predicate::Eq(c, lit) | Predicate::Ne(c, lit) => {
            let Some(i) = schema.resolve(c, errors) else {
                return;
            };
            let want = match lit {
                super::Literal::Int(_) => ColType::Int,
                super::Literal::Str(_) => ColType::Text,
            };
            if schema.types[i] != want {
                errors.push(ValidationError {
                    message: format!(
                        "type mismatch: column {} compared with {:?}",
                        schema.names[i], lit
                    ),
                    position: c.pos,
                });
                return;
            }
            let v = lit.to_value();
            out.push(match p {
                Predicate::Eq(..) => PredOp::Eq(i, v),
                _ => PredOp::Ne(i, v),
            });
        }
        Predicate::EqCol(a, b) => {
            let ia = schema.resolve(a, errors);
            let ib = schema.resolve(b, errors);
            if let (Some(ia), Some(ib)) = (ia, ib) {
                if schema.types[ia] != schema.types[ib] {
                    errors.push(ValidationError {
                        message: format!(
                            "type mismatch: {} and {}",
                            schema.names[ia], schema.names[ib]
                        ),
                        position: a.pos,
                    });
                } else {
                    out.push(PredOp::EqCol(ia, ib));
                }
            }
        }
    }
}

fn attr_type(kind: &AttrKind) -> ColType {
    match kind {
        AttrKind::Int => ColType::Int,
        AttrKind::Text | AttrKind::Enum(_) => ColType::Text,
    }
}

fn scan_schema(
    world: &World,
    relation: &str,
    alias: &Option<String>,
    errors: &mut Vec<ValidationError>,
) -> Option<RowSchema> {
    match world.relation(relation) {
        Ok(rel) => {
            let names = rel
                .schema
                .attrs
                .iter()
                .map(|a| match alias {
                    Some(al) => format!("{al}.{}", a.name),
                    None => a.name.to_string(),
                })
                .collect();
            let types = rel.schema.attrs.iter().map(|a| attr_type(&a.kind)).collect();
            Some(RowSchema { names, types })
        }
        Err(_) => {
            errors.push(ValidationError {
                message: format!("unknown relation {relation}"),
                position: None,
            });
            None
        }
    }
}

fn build(
    q: &Query,
    world: &World,
    errors: &mut Vec<ValidationError>,
) -> Option<(Node, RowSchema)> {
    match q {
        Query::Scan { relation, alias } => {
            let schema = scan_schema(world, relation, alias, errors)?;
            Some((
                Node::Scan {
                    relation: relation.clone(),
                },
                schema,
            ))
        }
        Query::Select { input, predicate } => {
            let (node, schema) = build(input, world, errors)?;
            let mut ops = Vec::new();
            flatten_predicate(predicate, &schema, errors, &mut ops);
            if !errors.is_empty() {
                return None;
            }
            Some((
                Node::Select {
                    input: Box::new(node),
                    predicate: ops,
                },
                schema,
            ))
        }
        Query::Project { input, columns } => {
            let (node, schema) = build(input, world, errors)?;
            let mut indices = Vec::new();
            for c in columns {
                if let Some(i) = schema.resolve(c, errors) {
                    indices.push(i);
                }
            }
            if indices.len() != columns.len() {
                return None;
            }
            let out = RowSchema {
                names: indices.iter().map(|i| schema.names[*i].clone()).collect(),
                types: indices.iter().map(|i| schema.types[*i]).collect(),
            };
            Some((
                Node::Project {
                    input: Box::new(node),
                    indices,
                },
                out,
            ))
        }
        Query::Product { left, right } => {
            let (ln, ls) = build(left, world, errors)?;
            let (rn, rs) = build(right, world, errors)?;
            let mut names = ls.names.clone();
            for n in &rs.names {
                if names.contains(n) {
                    errors.push(ValidationError {
                        message: format!("duplicate column {n} in product; alias the scans"),
                        position: None,
                    });
                }
                names.push(n.clone());
            }
            if !errors.is_empty() {
                return None;
            }
            let mut types = ls.types.clone();
            types.extend(rs.types.iter().copied());
            Some((
                Node::Product {
                    left: Box::new(ln),
                    right: Box::new(rn),
                },
                RowSchema { names, types },
            ))
        }
        Query::CountAll { input } => {
            let (node, _schema) = build(input, world, errors)?;
            Some((
                Node::CountAll {
                    input: Box::new(node),
                },
                RowSchema {
                    names: vec!["COUNT(*)".into()],
                    types: vec![ColType::Int],
                },
            ))
        }
        Query::GroupCount { input, group_by } => {
            let (node, schema) = build(input, world, errors)?;
            let mut indices = Vec::new();
            for c in group_by {
                if let Some(i) = schema.resolve(c, errors) {
                    indices.push(i);
                }
            }
            if indices.len() != group_by.len() {
                return None;
            }
            let mut names: Vec<String> =
                indices.iter().map(|i| schema.names[*i].clone()).collect();
            let mut types: Vec<ColType> = indices.iter().map(|i| schema.types[*i]).collect();
            names.push("COUNT(*)".into());
            types.push(ColType::Int);
            Some((
                Node::GroupCount {
                    input: Box::new(node),
                    indices,
                },
                RowSchema { names, types },
            ))
        }
        Query::CountEq {
            relation,
            group_attr,
            left,
            right,
            distinct,
        } => {
            let schema = scan_schema(world, relation, &None, errors)?;
            let group_idx = schema.resolve(group_attr, errors)?;
            let mut lops = Vec::new();
            let mut rops = Vec::new();
            flatten_predicate(left, &schema, errors, &mut lops);
            flatten_predicate(right, &schema, errors, &mut rops);
            if !errors.is_empty() {
                return None;
            }
            let out = RowSchema {
                names: vec![schema.names[group_idx].clone()],
                types: vec![schema.types[group_idx]],
            };
            Some((
                Node::CountEq {
                    relation: relation.clone(),
                    group_idx,
                    left: lops,
                    right: rops,
                    distinct: *distinct,
                },
                out,
            ))
        }
    }
}

/// Validate `query` against the world's schemas, producing the typed plan
/// or the full list of problems found.
pub fn validate(query: &Query, world: &World) -> Result<Plan> {
    let mut errors = Vec::new();
    match build(query, world, &mut errors) {
        Some((root, schema)) if errors.is_empty() => Ok(Plan {
            columns: schema.names,
            root,
        }),
        _ => Err(Error::Validation(errors)),
    }
}

/// Materialize the bag of rows a node produces on `world`.
pub(crate) fn eval_rows(node: &Node, world: &World) -> Result<Vec<Vec<Value>>> {
    match node {
        Node::Scan { relation } => {
            let rel = world.relation(relation)?;
            world.note_tuple_reads(rel.tuples.len() as u64);
            Ok(rel.tuples.values().map(|t| t.values.clone()).collect())
        }
        Node::Select { input, predicate } => {
            let mut rows = eval_rows(input, world)?;
            rows.retain(|r| eval_pred(predicate, r));
            Ok(rows)
        }
        Node::Project { input, indices } => {
            let rows = eval_rows(input, world)?;
            Ok(rows
                .into_iter()
                .map(|r| indices.iter().map(|i| r[*i].clone()).collect())
                .collect())
        }
        Node::Product { left, right } => {
            let lrows = eval_rows(left, world)?;
            let rrows = eval_rows(right, world)?;
            let mut out = Vec::with_capacity(lrows.len() * rrows.len());
            for l in &lrows {
                for r in &rrows {
                    let mut row = Vec::with_capacity(l.len() + r.len());
                    row.extend(l.iter().cloned());
                    row.extend(r.iter().cloned());
                    out.push(row);
                }
            }
            Ok(out)
        }
        Node::CountAll { input } => {
            let rows = eval_rows(input, world)?;
            Ok(vec![vec![Value::Int(rows.len() as i64)]])
        }
        Node::GroupCount { input, indices } => {
            let rows = eval_rows(input, world)?;
            let mut groups: BTreeMap<Vec<Value>, i64> = BTreeMap::new();
            for r in rows {
                let g: Vec<Value> = indices.iter().map(|i| r[*i].clone()).collect();
                *groups.entry(g).or_insert(0) += 1;
            }
            Ok(groups
                .into_iter()
                .map(|(mut g, c)| {
                    g.push(Value::Int(c));
                    g
                })
                .collect())
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
            // Per group: total tuples, matches of each side.
            let mut groups: BTreeMap<Value, (i64, i64, i64)> = BTreeMap::new();
            for t in rel.tuples.values() {
                let g = t.values[*group_idx].clone();
                let e = groups.entry(g).or_insert((0, 0, 0));
                e.0 += 1;
                if eval_pred(left, &t.values) {
                    e.1 += 1;
                }
                if eval_pred(right, &t.values) {
                    e.2 += 1;
                }
            }
            let mut out = Vec::new();
            for (g, (t, nl, nr)) in groups {
                if nl == nr {
                    let copies = if *distinct { 1 } else { t };
                    for _ in 0..copies {
                        out.push(vec![g.clone()]);
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Evaluate `query` on `world` from scratch. Validates first; execution
/// itself cannot fail on schema problems.
pub fn execute(query: &Query, world: &World) -> Result<MultisetAnswer> {
    let plan = validate(query, world)?;
    execute_plan(&plan, world)
}

/// Evaluate an already validated plan.
pub fn execute_plan(plan: &Plan, world: &World) -> Result<MultisetAnswer> {
    Ok(MultisetAnswer::from_rows(eval_rows(&plan.root, world)?))
}
