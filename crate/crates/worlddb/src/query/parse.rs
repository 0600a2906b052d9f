//! Parser for the query surface grammar.
//!
//! The grammar covers exactly the shapes the engine evaluates (see the
//! README for the full grammar): single-relation selections and
//! projections, `COUNT(*)` aggregates with an optional `GROUP BY`,
//! multi-relation products with equality predicates, and the correlated
//! pair-of-`COUNT(*)`-subqueries comparison which compiles to
//! [`Query::CountEq`]. Errors carry byte offsets into the query text.

use crate::query::{ColRef, Literal, Predicate, Query};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Str(String),
    Int(i64),
    Star,
    Comma,
    Dot,
    LParen,
    RParen,
    Eq,
    Ne,
    Eof,
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    pos: usize,
}

fn lex(text: &str) -> Result<Vec<Spanned>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '*' => {
                out.push(Spanned { tok: Tok::Star, pos: i });
                i += 1;
            }
            ',' => {
                out.push(Spanned { tok: Tok::Comma, pos: i });
                i += 1;
            }
            '.' => {
                out.push(Spanned { tok: Tok::Dot, pos: i });
                i += 1;
            }
            '(' => {
                out.push(Spanned { tok: Tok::LParen, pos: i });
                i += 1;
            }
            ')' => {
                out.push(Spanned { tok: Tok::RParen, pos: i });
                i += 1;
            }
            '=' => {
                out.push(Spanned { tok: Tok::Eq, pos: i });
                i += 1;
            }
            '!' | '<' => {
                let two = &text[i..text.len().min(i + 2)];
                if two == "!=" || two == "<>" {
                    out.push(Spanned { tok: Tok::Ne, pos: i });
                    i += 2;
                } else {
                    return Err(Error::Parse {
                        message: format!("unexpected character {c:?}"),
                        position: i,
                    });
                }
            }
            '\'' => {
                let start = i + 1;
                let mut j = start;
                while j < bytes.len() && bytes[j] as char != '\'' {
                    j += 1;
                }
                if j >= bytes.len() {
                    return Err(Error::Parse {
                        message: "unterminated string literal".into(),
                        position: i,
                    });
                }
                out.push(Spanned {
                    tok: Tok::Str(text[start..j].to_string()),
                    pos: i,
                });
                i = j + 1;
            }
            c if c.is_ascii_digit() || c == '-' => {
                let start = i;
                let mut j = i + 1;
                while j < bytes.len() && (bytes[j] as char).is_ascii_digit() {
                    j += 1;
                }
                let lit = &text[start..j];
                let v: i64 = lit.parse().map_err(|_| Error::Parse {
                    message: format!("bad integer {lit:?}"),
                    position: start,
                })?;
                out.push(Spanned {
                    tok: Tok::Int(v),
                    pos: start,
                });
                i = j;
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                let mut j = i + 1;
                while j < bytes.len() {
                    let d = bytes[j] as char;
                    if d.is_ascii_alphanumeric() || d == '_' || d == '-' {
                        j += 1;
                    } else {
                        break;
                    }
                }
                out.push(Spanned {
                    tok: Tok::Ident(text[start..j].to_string()),
                    pos: start,
                });
                i = j;
            }
            _ => {
                return Err(Error::Parse {
                    message: format!("unexpected character {c:?}"),
                    position: i,
                });
            }
        }
    }
    out.push(Spanned {
        tok: Tok::Eof,
        pos: text.len(),
    });
    Ok(out)
}

struct Parser {
    toks: Vec<Spanned>,
    at: usize,
}

/// Outer select list before it is matched against the FROM/WHERE shape.
enum SelectList {
    Star,
    Count,
    Columns { cols: Vec<ColRef>, distinct: bool },
    /// `col.., COUNT(*)`: requires GROUP BY on the same columns.
    ColumnsAndCount { cols: Vec<ColRef> },
}

impl Parser {
    fn peek(&self) -> &Spanned {
        &self.toks[self.at]
    }

    fn next(&mut self) -> Spanned {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            message: message.into(),
            position: self.peek().pos,
        })
    }

    fn keyword(&mut self, kw: &str) -> Result<()> {
        match self.next() {
            Spanned { tok: Tok::Ident(s), .. } if s.eq_ignore_ascii_case(kw) => Ok(()),
            Spanned { pos, .. } => Err(Error::Parse {
                message: format!("expected {kw}"),
                position: pos,
            }),
        }
    }

    fn at_keyword(&self, kw: &str) -> bool {
        matches!(&self.peek().tok, Tok::Ident(s) if s.eq_ignore_ascii_case(kw))
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<usize> {
        let s = self.next();
        if s.tok == tok {
            Ok(s.pos)
        } else {
            Err(Error::Parse {
                message: format!("expected {what}"),
                position: s.pos,
            })
        }
    }

    fn ident(&mut self, what: &str) -> Result<(String, usize)> {
        match self.next() {
            Spanned { tok: Tok::Ident(s), pos } => Ok((s, pos)),
            Spanned { pos, .. } => Err(Error::Parse {
                message: format!("expected {what}"),
                position: pos,
            }),
        }
    }

    /// `IDENT` or `IDENT . IDENT`, rendered as a qualified column name.
    fn colref(&mut self) -> Result<ColRef> {
        let (first, pos) = self.ident("column name")?;
        if self.peek().tok == Tok::Dot {
            self.next();
            let (second, _) = self.ident("column name after '.'")?;
            Ok(ColRef {
                name: format!("{first}.{second}"),
                pos: Some(pos),
            })
        } else {
            Ok(ColRef {
                name: first,
                pos: Some(pos),
            })
        }
    }

    fn count_star(&mut self) -> Result<()> {
        self.keyword("COUNT")?;
        self.expect(Tok::LParen, "'(' after COUNT")?;
        self.expect(Tok::Star, "'*' inside COUNT")?;
        self.expect(Tok::RParen, "')' after COUNT(*)")?;
        Ok(())
    }

    fn select_list(&mut self) -> Result<SelectList> {
        if self.peek().tok == Tok::Star {
            self.next();
            return Ok(SelectList::Star);
        }
        if self.at_keyword("COUNT") {
            self.count_star()?;
            return Ok(SelectList::Count);
        }
        let distinct = if self.at_keyword("DISTINCT") {
            self.next();
            true
        } else {
            false
        };
        let mut cols = vec![self.colref()?];
        while self.peek().tok == Tok::Comma {
            self.next();
            if self.at_keyword("COUNT") {
                self.count_star()?;
                if distinct {
                    return self.err("DISTINCT cannot be combined with COUNT(*)");
                }
                return Ok(SelectList::ColumnsAndCount { cols });
            }
            cols.push(self.colref()?);
        }
        Ok(SelectList::Columns { cols, distinct })
    }

    /// `rel [alias] (, rel [alias])*`
    fn relation_list(&mut self) -> Result<Vec<(String, Option<String>)>> {
        let mut rels = Vec::new();
        loop {
            let (rel, _) = self.ident("relation name")?;
            let alias = match &self.peek().tok {
                Tok::Ident(s)
                    if !s.eq_ignore_ascii_case("WHERE") && !s.eq_ignore_ascii_case("GROUP") =>
                {
                    let (a, _) = self.ident("alias")?;
                    Some(a)
                }
                _ => None,
            };
            rels.push((rel, alias));
            if self.peek().tok == Tok::Comma {
                self.next();
            } else {
                break;
            }
        }
        Ok(rels)
    }

    /// A correlated `(SELECT COUNT(*) FROM rel alias WHERE ...)` subquery.
    fn count_subquery(&mut self) -> Result<CountSub> {
        self.expect(Tok::LParen, "'('")?;
        self.keyword("SELECT")?;
        self.count_star()?;
        self.keyword("FROM")?;
        let (relation, _) = self.ident("relation name")?;
        let alias = match &self.peek().tok {
            Tok::Ident(s) if !s.eq_ignore_ascii_case("WHERE") => {
                let (a, _) = self.ident("alias")?;
                Some(a)
            }
            _ => None,
        };
        self.keyword("WHERE")?;
        let atoms = self.conjunction()?;
        self.expect(Tok::RParen, "')' closing subquery")?;
        Ok(CountSub {
            relation,
            alias,
            atoms,
        })
    }

    fn conjunction(&mut self) -> Result<Vec<Atom>> {
        let mut atoms = vec![self.atom()?];
        while self.at_keyword("AND") {
            self.next();
            atoms.push(self.atom()?);
        }
        Ok(atoms)
    }

    fn atom(&mut self) -> Result<Atom> {
        if self.peek().tok == Tok::LParen {
            let a = self.count_subquery()?;
            self.expect(Tok::Eq, "'=' between COUNT subqueries")?;
            let b = self.count_subquery()?;
            return Ok(Atom::CountPair(a, b));
        }
        let col = self.colref()?;
        let negated = match self.next() {
            Spanned { tok: Tok::Eq, .. } => false,
            Spanned { tok: Tok::Ne, .. } => true,
            Spanned { pos, .. } => {
                return Err(Error::Parse {
                    message: "expected '=' or '!='".into(),
                    position: pos,
                })
            }
        };
        match self.next() {
            Spanned { tok: Tok::Str(s), .. } => Ok(Atom::Lit(col, Literal::Str(s), negated)),
            Spanned { tok: Tok::Int(v), .. } => Ok(Atom::Lit(col, Literal::Int(v), negated)),
            Spanned { tok: Tok::Ident(first), pos } => {
                // Column-to-column equality.
                let name = if self.peek().tok == Tok::Dot {
                    self.next();
                    let (second, _) = self.ident("column name after '.'")?;
                    format!("{first}.{second}")
                } else {
                    first
                };
                if negated {
                    return Err(Error::Parse {
                        message: "'!=' between columns is not supported".into(),
                        position: pos,
                    });
                }
                Ok(Atom::Cols(col, ColRef { name, pos: Some(pos) }))
            }
            Spanned { pos, .. } => Err(Error::Parse {
                message: "expected a literal or column".into(),
                position: pos,
            }),
        }
    }
}

struct CountSub {
    relation: String,
    alias: Option<String>,
    atoms: Vec<Atom>,
}

enum Atom {
    Lit(ColRef, Literal, bool),
    Cols(ColRef, ColRef),
    CountPair(CountSub, CountSub),
}

fn atoms_to_predicate(atoms: Vec<Atom>) -> Result<Predicate> {
    let mut ps = Vec::new();
    for a in atoms {
        match a {
            Atom::Lit(c, l, false) => ps.push(Predicate::Eq(c, l)),
            Atom::Lit(c, l, true) => ps.push(Predicate::Ne(c, l)),
            Atom::Cols(a, b) => ps.push(Predicate::EqCol(a, b)),
            Atom::CountPair(..) => {
                return Err(Error::Parse {
                    message: "COUNT subqueries may only appear as the entire WHERE clause".into(),
                    position: 0,
                })
            }
        }
    }
    Ok(if ps.len() == 1 {
        ps.pop().unwrap()
    } else {
        Predicate::And(ps)
    })
}

/// Strip `alias.` prefixes so subquery predicates apply to bare relation
/// attributes, and find the correlation attribute against the outer alias.
fn compile_count_sub(
    sub: CountSub,
    outer_alias: &str,
    relation: &str,
) -> Result<(String, Predicate)> {
    if sub.relation != relation {
        return Err(Error::Parse {
            message: format!(
                "COUNT subquery must scan {relation}, found {}",
                sub.relation
            ),
            position: 0,
        });
    }
    let inner_alias = sub.alias.clone();
    let strip = |c: &ColRef| -> ColRef {
        let name = match (&inner_alias, c.name.split_once('.')) {
            (Some(al), Some((q, rest))) if q == al => rest.to_string(),
            _ => c.name.clone(),
        };
        ColRef { name, pos: c.pos }
    };
    let mut correlation: Option<String> = None;
    let mut preds = Vec::new();
    for a in sub.atoms {
        match a {
            Atom::Lit(c, l, neg) => {
                let c = strip(&c);
                preds.push(if neg {
                    Predicate::Ne(c, l)
                } else {
                    Predicate::Eq(c, l)
                });
            }
            Atom::Cols(a, b) => {
                // One side must be outer_alias.attr, the other the same
                // attr on the subquery's relation.
                let is_outer = |c: &ColRef| {
                    c.name
                        .split_once('.')
                        .is_some_and(|(q, _)| q == outer_alias)
                };
                let (outer, inner) = match (is_outer(&a), is_outer(&b)) {
                    (true, false) => (a, b),
                    (false, true) => (b, a),
                    _ => {
                        return Err(Error::Parse {
                            message: "subquery needs one correlation with the outer relation"
                                .into(),
                            position: a.pos.unwrap_or(0),
                        })
                    }
                };
                let outer_attr = outer.name.split_once('.').unwrap().1.to_string();
                let inner_attr = strip(&inner).name;
                if outer_attr != inner_attr {
                    return Err(Error::Parse {
                        message: format!(
                            "correlation must join the same attribute, found {outer_attr} and {inner_attr}"
                        ),
                        position: outer.pos.unwrap_or(0),
                    });
                }
                if correlation.replace(outer_attr).is_some() {
                    return Err(Error::Parse {
                        message: "subquery has more than one correlation".into(),
                        position: outer.pos.unwrap_or(0),
                    });
                }
            }
            Atom::CountPair(..) => {
                return Err(Error::Parse {
                    message: "nested COUNT subqueries are not supported".into(),
                    position: 0,
                })
            }
        }
    }
    let correlation = correlation.ok_or_else(|| Error::Parse {
        message: "subquery lacks a correlation with the outer relation".into(),
        position: 0,
    })?;
    let pred = if preds.len() == 1 {
        preds.pop().unwrap()
    } else {
        Predicate::And(preds)
    };
    Ok((correlation, pred))
}

/// Parse one query from text.
pub fn parse(text: &str) -> Result<Query> {
    let toks = lex(text)?;
    let mut p = Parser { toks, at: 0 };
    p.keyword("SELECT")?;
    let select = p.select_list()?;
    p.keyword("FROM")?;
    let rels = p.relation_list()?;
    let mut where_atoms = Vec::new();
    if p.at_keyword("WHERE") {
        p.next();
        where_atoms = p.conjunction()?;
    }
    let mut group_by: Option<ColRef> = None;
    if p.at_keyword("GROUP") {
        p.next();
        p.keyword("BY")?;
        group_by = Some(p.colref()?);
    }
    if p.peek().tok != Tok::Eof {
        return p.err("trailing input after query");
    }

    // The correlated count-comparison shape.
    let count_pair = where_atoms
        .iter()
        .any(|a| matches!(a, Atom::CountPair(..)));
    if count_pair {
        if where_atoms.len() != 1 {
            return Err(Error::Parse {
                message: "a COUNT-subquery comparison must be the entire WHERE clause".into(),
                position: 0,
            });
        }
        let Some(Atom::CountPair(left, right)) = where_atoms.into_iter().next() else {
            unreachable!()
        };
        if rels.len() != 1 {
            return Err(Error::Parse {
                message: "COUNT-subquery comparison requires a single outer relation".into(),
                position: 0,
            });
        }
        let (relation, alias) = rels.into_iter().next().unwrap();
        let alias = alias.ok_or_else(|| Error::Parse {
            message: "the outer relation needs an alias to correlate against".into(),
            position: 0,
        })?;
        let (distinct, cols) = match select {
            SelectList::Columns { cols, distinct } => (distinct, cols),
            _ => {
                return Err(Error::Parse {
                    message: "select one column with a COUNT-subquery comparison".into(),
                    position: 0,
                })
            }
        };
        if cols.len() != 1 {
            return Err(Error::Parse {
                message: "select exactly one column with a COUNT-subquery comparison".into(),
                position: 0,
            });
        }
        let (lcorr, lpred) = compile_count_sub(left, &alias, &relation)?;
        let (rcorr, rpred) = compile_count_sub(right, &alias, &relation)?;
        if lcorr != rcorr {
            return Err(Error::Parse {
                message: format!("subqueries correlate on different attributes: {lcorr} vs {rcorr}"),
                position: 0,
            });
        }
        let projected = cols.into_iter().next().unwrap();
        let bare = projected
            .name
            .strip_prefix(&format!("{alias}."))
            .unwrap_or(&projected.name)
            .to_string();
        if bare != lcorr {
            return Err(Error::Parse {
                message: format!("projected column must be the correlation attribute {lcorr}"),
                position: projected.pos.unwrap_or(0),
            });
        }
        if group_by.is_some() {
            return Err(Error::Parse {
                message: "GROUP BY cannot combine with a COUNT-subquery comparison".into(),
                position: 0,
            });
        }
        return Ok(Query::CountEq {
            relation,
            group_attr: ColRef {
                name: lcorr,
                pos: projected.pos,
            },
            left: Box::new(lpred),
            right: Box::new(rpred),
            distinct,
        });
    }

    // Plain scans, products, selections, projections, aggregates.
    let mut root = {
        let mut iter = rels.into_iter();
        let (rel, alias) = iter.next().expect("relation_list yields at least one");
        let mut q = Query::Scan {
            relation: rel,
            alias,
        };
        for (rel, alias) in iter {
            q = q.product(Query::Scan {
                relation: rel,
                alias,
            });
        }
        q
    };
    if !where_atoms.is_empty() {
        root = root.select(atoms_to_predicate(where_atoms)?);
    }
    match (select, group_by) {
        (SelectList::Star, None) => Ok(root),
        (SelectList::Star, Some(_)) => Err(Error::Parse {
            message: "GROUP BY requires selecting the group columns and COUNT(*)".into(),
            position: 0,
        }),
        (SelectList::Count, None) => Ok(root.count_all()),
        (SelectList::Count, Some(g)) => Ok(Query::GroupCount {
            input: Box::new(root),
            group_by: vec![g],
        }),
        (SelectList::Columns { cols, distinct }, None) => {
            if distinct {
                return Err(Error::Parse {
                    message: "DISTINCT is only supported with COUNT-subquery comparisons".into(),
                    position: 0,
                });
            }
            Ok(Query::Project {
                input: Box::new(root),
                columns: cols,
            })
        }
        (SelectList::ColumnsAndCount { cols }, Some(g)) => {
            if cols.len() != 1 || cols[0].name != g.name {
                return Err(Error::Parse {
                    message: "selected columns must match the GROUP BY column".into(),
                    position: 0,
                });
            }
            Ok(Query::GroupCount {
                input: Box::new(root),
                group_by: cols,
            })
        }
        (SelectList::ColumnsAndCount { .. }, None) => Err(Error::Parse {
            message: "COUNT(*) alongside columns requires GROUP BY".into(),
            position: 0,
        }),
        (SelectList::Columns { .. }, Some(_)) => Err(Error::Parse {
            message: "GROUP BY requires COUNT(*) in the select list".into(),
            position: 0,
        }),
    }
}
