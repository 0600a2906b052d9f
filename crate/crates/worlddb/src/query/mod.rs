//! Relational-algebra queries with multiset (bag) semantics.
//!
//! The [`Query`] tree can be built directly or parsed from a small SQL-like
//! surface grammar (see [`parse`]). Answers are [`MultisetAnswer`]s: maps
//! from projected value vectors to positive counts. Counts matter because
//! the incremental evaluator maintains answers by adding and subtracting
//! tuple multiplicities under projections; membership is `count > 0`.

pub(crate) mod exec;
mod parse;

pub use exec::{execute, execute_plan, validate, Plan};
pub use parse::parse;

use std::collections::BTreeMap;

use crate::store::Value;
use crate::{Error, Result};

/// Column reference, optionally qualified (`T1.STRING`), with the byte
/// offset of its occurrence when it came from query text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColRef {
    pub name: String,
    pub pos: Option<usize>,
}

impl ColRef {
    pub fn new(name: impl Into<String>) -> ColRef {
        ColRef {
            name: name.into(),
            pos: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Int(i64),
    Str(String),
}

impl Literal {
    pub fn to_value(&self) -> Value {
        match self {
            Literal::Int(i) => Value::Int(*i),
            Literal::Str(s) => Value::str(s),
        }
    }
}

/// Selection predicate over the columns of the input rows.
#[derive(Debug, Clone, PartialEq)]
pub enum Predicate {
    Eq(ColRef, Literal),
    Ne(ColRef, Literal),
    EqCol(ColRef, ColRef),
    And(Vec<Predicate>),
}

impl Predicate {
    pub fn eq(col: &str, lit: Literal) -> Predicate {
        Predicate::Eq(ColRef::new(col), lit)
    }

    pub fn eq_str(col: &str, s: &str) -> Predicate {
        Predicate::Eq(ColRef::new(col), Literal::Str(s.into()))
    }
}

/// Relational-algebra expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Query {
    /// All tuples of a relation. With an alias, output columns are named
    /// `alias.attr`; otherwise plain `attr`.
    Scan {
        relation: String,
        alias: Option<String>,
    },
    Select {
        input: Box<Query>,
        predicate: Predicate,
    },
    Project {
        input: Box<Query>,
        columns: Vec<ColRef>,
    },
    Product {
        left: Box<Query>,
        right: Box<Query>,
    },
    /// Single `(count)` tuple counting input rows with multiplicity.
    CountAll { input: Box<Query> },
    /// One `(group.., count)` tuple per non-empty group.
    GroupCount {
        input: Box<Query>,
        group_by: Vec<ColRef>,
    },
    /// Tuples of `relation` grouped by `group_attr`; a group qualifies when
    /// its count of tuples matching `left` equals its count matching
    /// `right`. Emits the group value once per tuple of the group, or once
    /// per group when `distinct`.
    CountEq {
        relation: String,
        group_attr: ColRef,
        left: Box<Predicate>,
        right: Box<Predicate>,
        distinct: bool,
    },
}

impl Query {
    pub fn scan(relation: &str) -> Query {
        Query::Scan {
            relation: relation.into(),
            alias: None,
        }
    }

    pub fn scan_as(relation: &str, alias: &str) -> Query {
        Query::Scan {
            relation: relation.into(),
            alias: Some(alias.into()),
        }
    }

    pub fn select(self, predicate: Predicate) -> Query {
        Query::Select {
            input: Box::new(self),
            predicate,
        }
    }

    pub fn project(self, columns: &[&str]) -> Query {
        Query::Project {
            input: Box::new(self),
            columns: columns.iter().map(|c| ColRef::new(*c)).collect(),
        }
    }

    pub fn product(self, right: Query) -> Query {
        Query::Product {
            left: Box::new(self),
            right: Box::new(right),
        }
    }

    pub fn count_all(self) -> Query {
        Query::CountAll {
            input: Box::new(self),
        }
    }

    pub fn group_count(self, group_by: &[&str]) -> Query {
        Query::GroupCount {
            input: Box::new(self),
            group_by: group_by.iter().map(|c| ColRef::new(*c)).collect(),
        }
    }
}

/// Answer tuples with positive multiplicities. Tuple identity is the vector
/// of projected values, never the primary key.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MultisetAnswer {
    map: BTreeMap<Vec<Value>, u64>,
}

impl MultisetAnswer {
    pub fn new() -> MultisetAnswer {
        MultisetAnswer::default()
    }

    pub fn from_rows(rows: impl IntoIterator<Item = Vec<Value>>) -> MultisetAnswer {
        let mut a = MultisetAnswer::new();
        for r in rows {
            a.add(r, 1);
        }
        a
    }

    pub fn add(&mut self, tuple: Vec<Value>, count: u64) {
        if count > 0 {
            *self.map.entry(tuple).or_insert(0) += count;
        }
    }

    /// Subtract `count` occurrences; removing more than stored is a
    /// corruption error, and a count reaching zero deletes the key.
    pub fn remove_checked(&mut self, tuple: &[Value], count: u64) -> Result<()> {
        match self.map.get_mut(tuple) {
            Some(c) if *c > count => {
                *c -= count;
                Ok(())
            }
            Some(c) if *c == count => {
                self.map.remove(tuple);
                Ok(())
            }
            Some(c) => Err(Error::Corruption(format!(
                "removing {count} copies of {tuple:?} which has only {c}"
            ))),
            None => Err(Error::Corruption(format!(
                "removing {count} copies of absent tuple {tuple:?}"
            ))),
        }
    }

    pub fn count(&self, tuple: &[Value]) -> u64 {
        self.map.get(tuple).copied().unwrap_or(0)
    }

    /// Membership is `count > 0`.
    pub fn contains(&self, tuple: &[Value]) -> bool {
        self.count(tuple) > 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<Value>, u64)> {
        self.map.iter().map(|(t, c)| (t, *c))
    }

    pub fn keys(&self) -> impl Iterator<Item = &Vec<Value>> {
        self.map.keys()
    }

    /// Number of distinct tuples.
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total multiplicity.
    pub fn total(&self) -> u64 {
        self.map.values().sum()
    }
}

impl FromIterator<(Vec<Value>, u64)> for MultisetAnswer {
    fn from_iter<T: IntoIterator<Item = (Vec<Value>, u64)>>(iter: T) -> Self {
        let mut a = MultisetAnswer::new();
        for (t, c) in iter {
            a.add(t, c);
        }
        a
    }
}
