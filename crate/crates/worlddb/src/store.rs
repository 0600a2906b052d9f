//! In-memory relational store holding exactly one possible world.
//!
//! A [`World`] is a set of relations with typed attributes and integer
//! primary keys. Fields are either observed (fixed constants) or hidden:
//! hidden fields are registered per (relation, attribute) with a finite
//! [`Domain`], and they are the only fields [`World::update_field`] may
//! touch. Every mutation is described by a [`Delta`] carrying the full
//! pre-image and post-image tuples, so a sequence of updates can be
//! coalesced, applied, reverted and shipped to the incremental query
//! evaluator.

use std::cell::Cell;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use crate::{Error, Result};

/// A scalar field value. Strings are reference-counted so tuple clones on
/// the sampling hot path stay cheap.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Value {
    Int(i64),
    Str(Arc<str>),
}

impl Value {
    pub fn str(s: impl AsRef<str>) -> Value {
        Value::Str(Arc::from(s.as_ref()))
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            Value::Str(_) => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Int(_) => None,
            Value::Str(s) => Some(s),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Str(s) => write!(f, "{s}"),
        }
    }
}

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Str(s) => write!(f, "{s:?}"),
        }
    }
}

/// An ordered finite set of values a hidden field may take. The ordering is
/// fixed so uniform sampling over the domain is reproducible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Domain {
    values: Arc<[Value]>,
}

impl Domain {
    pub fn new(values: Vec<Value>) -> Result<Domain> {
        if values.is_empty() {
            return Err(Error::Corruption("empty domain".into()));
        }
        for (i, v) in values.iter().enumerate() {
            if values[..i].contains(v) {
                return Err(Error::Corruption(format!(
                    "duplicate domain value {v:?}"
                )));
            }
        }
        Ok(Domain {
            values: values.into(),
        })
    }

    pub fn of_strs(values: &[&str]) -> Domain {
        Domain::new(values.iter().map(Value::str).collect()).expect("static domain")
    }

    pub fn values(&self) -> &[Value] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, v: &Value) -> Option<usize> {
        self.values.iter().position(|x| x == v)
    }

    pub fn contains(&self, v: &Value) -> bool {
        self.index_of(v).is_some()
    }
}

/// Attribute type: free integers, free text, or an enumerated domain.
#[derive(Debug, Clone, PartialEq)]
pub enum AttrKind {
    Int,
    Text,
    Enum(Domain),
}

impl AttrKind {
    fn admits(&self, v: &Value) -> bool {
        match self {
            AttrKind::Int => matches!(v, Value::Int(_)),
            AttrKind::Text => matches!(v, Value::Str(_)),
            AttrKind::Enum(d) => d.contains(v),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Attr {
    pub name: Arc<str>,
    pub kind: AttrKind,
}

/// Relation schema: named attributes plus a designated integer primary key.
#[derive(Debug, Clone)]
pub struct Schema {
    pub relation: Arc<str>,
    pub attrs: Vec<Attr>,
    pub key: usize,
}

impl Schema {
    pub fn new(relation: &str, attrs: Vec<(&str, AttrKind)>, key_attr: &str) -> Result<Schema> {
        let attrs: Vec<Attr> = attrs
            .into_iter()
            .map(|(n, k)| Attr {
                name: Arc::from(n),
                kind: k,
            })
            .collect();
        for (i, a) in attrs.iter().enumerate() {
            if attrs[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::Corruption(format!(
                    "duplicate attribute {} in schema {relation}",
                    a.name
                )));
            }
        }
        let key = attrs
            .iter()
            .position(|a| &*a.name == key_attr)
            .ok_or_else(|| {
                Error::Corruption(format!("primary key {key_attr} missing from {relation}"))
            })?;
        if !matches!(attrs[key].kind, AttrKind::Int) {
            return Err(Error::Corruption(format!(
                "primary key {key_attr} of {relation} must be an integer"
            )));
        }
        Ok(Schema {
            relation: Arc::from(relation),
            attrs,
            key,
        })
    }

    pub fn attr_index(&self, name: &str) -> Option<usize> {
        self.attrs.iter().position(|a| &*a.name == name)
    }

    pub fn arity(&self) -> usize {
        self.attrs.len()
    }
}

/// One row: values aligned to the schema's attributes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Tuple {
    pub values: Vec<Value>,
}

impl Tuple {
    pub fn new(values: Vec<Value>) -> Tuple {
        Tuple { values }
    }

    pub fn key(&self, schema: &Schema) -> i64 {
        self.values[schema.key]
            .as_int()
            .expect("primary key is an integer by schema construction")
    }
}

/// Names one field of the bound world: (relation, primary key, attribute).
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VariableRef {
    pub relation: Arc<str>,
    pub key: i64,
    pub attribute: Arc<str>,
}

impl VariableRef {
    pub fn new(relation: impl AsRef<str>, key: i64, attribute: impl AsRef<str>) -> VariableRef {
        VariableRef {
            relation: Arc::from(relation.as_ref()),
            key,
            attribute: Arc::from(attribute.as_ref()),
        }
    }
}

impl fmt::Debug for VariableRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}].{}", self.relation, self.key, self.attribute)
    }
}

impl fmt::Display for VariableRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}].{}", self.relation, self.key, self.attribute)
    }
}

/// Pre- and post-image of one tuple across a world modification. `None` on
/// either side encodes insertion/deletion; label flips are updates with both
/// sides present.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaEntry {
    pub pre: Option<Tuple>,
    pub post: Option<Tuple>,
}

/// Coalesced difference between two worlds: for each touched (relation, key)
/// the tuple as it appeared before and after. The "minus" side of the
/// classic (Δ⁻, Δ⁺) pair is the set of pre-images, the "plus" side the set
/// of post-images; a key present on both sides is an update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Delta {
    entries: BTreeMap<(Arc<str>, i64), DeltaEntry>,
}

impl Delta {
    pub fn empty() -> Delta {
        Delta::default()
    }

    pub fn update(relation: Arc<str>, key: i64, pre: Tuple, post: Tuple) -> Delta {
        let mut d = Delta::empty();
        d.entries.insert(
            (relation, key),
            DeltaEntry {
                pre: Some(pre),
                post: Some(post),
            },
        );
        d
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of touched (relation, key) pairs.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&(Arc<str>, i64), &DeltaEntry)> {
        self.entries.iter()
    }

    pub fn entries_for<'a>(
        &'a self,
        relation: &'a str,
    ) -> impl Iterator<Item = (i64, &'a DeltaEntry)> + 'a {
        self.entries
            .iter()
            .filter(move |((r, _), _)| &**r == relation)
            .map(|((_, k), e)| (*k, e))
    }

    pub fn get(&self, relation: &str, key: i64) -> Option<&DeltaEntry> {
        self.entries.get(&(Arc::from(relation), key))
    }

    /// Pre-image tuples (Δ⁻).
    pub fn minus(&self) -> impl Iterator<Item = (&Arc<str>, i64, &Tuple)> {
        self.entries
            .iter()
            .filter_map(|((r, k), e)| e.pre.as_ref().map(|t| (r, *k, t)))
    }

    /// Post-image tuples (Δ⁺).
    pub fn plus(&self) -> impl Iterator<Item = (&Arc<str>, i64, &Tuple)> {
        self.entries
            .iter()
            .filter_map(|((r, k), e)| e.post.as_ref().map(|t| (r, *k, t)))
    }

    /// Fold `next` into `self` as a later modification. Entries whose post
    /// image returns to the original pre image drop out entirely, so the
    /// coalesced delta never grows beyond the set of distinct tuples touched.
    pub fn merge(&mut self, next: Delta) {
        for (k, e) in next.entries {
            match self.entries.get_mut(&k) {
                None => {
                    if e.pre != e.post {
                        self.entries.insert(k, e);
                    }
                }
                Some(cur) => {
                    debug_assert_eq!(
                        cur.post, e.pre,
                        "delta composed onto a mismatched intermediate state"
                    );
                    if cur.pre == e.post {
                        self.entries.remove(&k);
                    } else {
                        cur.post = e.post;
                    }
                }
            }
        }
    }

    /// `d1` then `d2` as one delta; reverted tuples are dropped.
    pub fn compose(mut self, d2: Delta) -> Delta {
        self.merge(d2);
        self
    }

    /// Swap the roles of Δ⁻ and Δ⁺.
    pub fn inverted(&self) -> Delta {
        Delta {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        DeltaEntry {
                            pre: e.post.clone(),
                            post: e.pre.clone(),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Skip-index scope: group identical strings within one document or across
/// the whole corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipScope {
    Document,
    Corpus,
}

/// Derived lookup structures over the observed fields of a token-shaped
/// relation: document order for adjacency, and groups of identically
/// spelled tokens for skip factors. Observed fields never change under
/// sampling deltas, so the index is built once and shared read-only across
/// world clones.
#[derive(Debug)]
pub struct TokenIndex {
    pub doc_attr: Arc<str>,
    pub string_attr: Arc<str>,
    pub scope: SkipScope,
    pub caps_only: bool,
    /// Document ids in ascending order.
    pub docs: Vec<i64>,
    /// Document id -> token keys in ascending key order (sequence order).
    pub doc_tokens: BTreeMap<i64, Vec<i64>>,
    /// Token key -> (document id, position within document).
    pub positions: HashMap<i64, (i64, u32)>,
    /// (scope key, string) -> token keys sharing that string, in key order.
    /// The scope key is the document id under document scope, `None` under
    /// corpus scope.
    pub skip_groups: HashMap<(Option<i64>, Arc<str>), Vec<i64>>,
}

impl TokenIndex {
    /// Keys of tokens sharing `string` with the token in `doc`, including
    /// the probe token itself. Empty when the string is out of skip scope.
    pub fn skip_partners(&self, doc: i64, string: &Arc<str>) -> &[i64] {
        if self.caps_only && !string.chars().next().is_some_and(|c| c.is_uppercase()) {
            return &[];
        }
        let scope_key = match self.scope {
            SkipScope::Document => Some(doc),
            SkipScope::Corpus => None,
        };
        self.skip_groups
            .get(&(scope_key, string.clone()))
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }
}

#[derive(Debug, Clone)]
pub struct Relation {
    pub schema: Arc<Schema>,
    pub tuples: BTreeMap<i64, Tuple>,
}

/// Instrumentation counters, cheap enough to leave on. `tuple_reads` counts
/// base tuples inspected by query evaluation; `factor_evals` counts factor
/// evaluations during scoring.
#[derive(Debug, Clone, Default)]
pub struct Counters {
    pub tuple_reads: Cell<u64>,
    pub factor_evals: Cell<u64>,
}

/// One possible world: relations, plus the registry of hidden fields and
/// their domains. A world is confined to one chain at a time;
/// [`World::clone`] is the only cross-chain transfer mechanism.
#[derive(Debug, Clone, Default)]
pub struct World {
    relations: BTreeMap<Arc<str>, Relation>,
    hidden: BTreeMap<(Arc<str>, Arc<str>), Arc<Domain>>,
    token_indexes: BTreeMap<Arc<str>, Arc<TokenIndex>>,
    pub counters: Counters,
}

impl World {
    pub fn new() -> World {
        World::default()
    }

    pub fn add_relation(&mut self, schema: Schema) -> Result<()> {
        if self.relations.contains_key(&*schema.relation) {
            return Err(Error::Corruption(format!(
                "relation {} already exists",
                schema.relation
            )));
        }
        self.relations.insert(
            schema.relation.clone(),
            Relation {
                schema: Arc::new(schema),
                tuples: BTreeMap::new(),
            },
        );
        Ok(())
    }

    pub fn relation(&self, name: &str) -> Result<&Relation> {
        self.relations
            .get(name)
            .ok_or_else(|| Error::UnknownVariable(format!("relation {name}")))
    }

    pub fn relations(&self) -> impl Iterator<Item = &Relation> {
        self.relations.values()
    }

    pub fn schema(&self, name: &str) -> Result<&Arc<Schema>> {
        Ok(&self.relation(name)?.schema)
    }

    pub fn insert_tuple(&mut self, relation: &str, tuple: Tuple) -> Result<()> {
        let rel = self
            .relations
            .get_mut(relation)
            .ok_or_else(|| Error::UnknownVariable(format!("relation {relation}")))?;
        let schema = rel.schema.clone();
        if tuple.values.len() != schema.arity() {
            return Err(Error::Corruption(format!(
                "tuple arity {} does not match schema {relation}",
                tuple.values.len()
            )));
        }
        for (v, a) in tuple.values.iter().zip(&schema.attrs) {
            if !a.kind.admits(v) {
                return Err(Error::OutOfDomain {
                    target: format!("{relation}.{}", a.name),
                    value: format!("{v:?}"),
                });
            }
        }
        let key = tuple.key(&schema);
        if rel.tuples.contains_key(&key) {
            return Err(Error::Corruption(format!(
                "duplicate primary key {key} in {relation}"
            )));
        }
        rel.tuples.insert(key, tuple);
        Ok(())
    }

    pub fn tuple(&self, relation: &str, key: i64) -> Result<&Tuple> {
        self.relation(relation)?
            .tuples
            .get(&key)
            .ok_or_else(|| Error::UnknownVariable(format!("{relation}[{key}]")))
    }

    /// Current value of a field, observed or hidden.
    pub fn field(&self, r: &VariableRef) -> Result<&Value> {
        let rel = self.relation(&r.relation)?;
        let idx = rel
            .schema
            .attr_index(&r.attribute)
            .ok_or_else(|| Error::UnknownVariable(r.to_string()))?;
        let t = rel
            .tuples
            .get(&r.key)
            .ok_or_else(|| Error::UnknownVariable(r.to_string()))?;
        Ok(&t.values[idx])
    }

    /// Register (relation, attribute) as hidden with the given domain.
    /// Re-declaring with an identical domain is a no-op; a mismatch is an
    /// error.
    pub fn declare_hidden(&mut self, relation: &str, attribute: &str, domain: Domain) -> Result<()> {
        let rel = self.relation(relation)?;
        let schema = rel.schema.clone();
        if schema.attr_index(attribute).is_none() {
            return Err(Error::UnknownVariable(format!("{relation}.{attribute}")));
        }
        if schema.attr_index(attribute) == Some(schema.key) {
            return Err(Error::Corruption(format!(
                "primary key {relation}.{attribute} cannot be hidden"
            )));
        }
        let k = (schema.relation.clone(), Arc::from(attribute));
        match self.hidden.get(&k) {
            Some(existing) if **existing == domain => Ok(()),
            Some(_) => Err(Error::Corruption(format!(
                "{relation}.{attribute} already hidden with a different domain"
            ))),
            None => {
                self.hidden.insert(k, Arc::new(domain));
                Ok(())
            }
        }
    }

    pub fn hidden_domain(&self, relation: &str, attribute: &str) -> Option<&Arc<Domain>> {
        self.hidden
            .iter()
            .find(|((r, a), _)| &**r == relation && &**a == attribute)
            .map(|(_, d)| d)
    }

    pub fn is_hidden(&self, r: &VariableRef) -> bool {
        self.hidden_domain(&r.relation, &r.attribute).is_some()
            && self
                .relation(&r.relation)
                .is_ok_and(|rel| rel.tuples.contains_key(&r.key))
    }

    /// All hidden variables of the world in deterministic order.
    pub fn hidden_refs(&self) -> Vec<(VariableRef, Arc<Domain>)> {
        let mut out = Vec::new();
        for ((rel_name, attr), dom) in &self.hidden {
            if let Some(rel) = self.relations.get(&**rel_name) {
                for key in rel.tuples.keys() {
                    out.push((
                        VariableRef {
                            relation: rel_name.clone(),
                            key: *key,
                            attribute: attr.clone(),
                        },
                        dom.clone(),
                    ));
                }
            }
        }
        out
    }

    /// Set a hidden field to `value`, returning the delta fragment with the
    /// full pre-image tuple on the minus side and the post-image on the plus
    /// side. Setting a field to its current value yields a fragment whose
    /// sides are equal; it coalesces to nothing under [`Delta::merge`].
    pub fn update_field(&mut self, r: &VariableRef, value: Value) -> Result<Delta> {
        let domain = self
            .hidden_domain(&r.relation, &r.attribute)
            .ok_or_else(|| Error::Contract(format!("{r} is not a hidden variable")))?
            .clone();
        if !domain.contains(&value) {
            return Err(Error::OutOfDomain {
                target: r.to_string(),
                value: format!("{value:?}"),
            });
        }
        let rel = self
            .relations
            .get_mut(&*r.relation)
            .ok_or_else(|| Error::UnknownVariable(r.to_string()))?;
        let idx = rel
            .schema
            .attr_index(&r.attribute)
            .ok_or_else(|| Error::UnknownVariable(r.to_string()))?;
        let tuple = rel
            .tuples
            .get_mut(&r.key)
            .ok_or_else(|| Error::UnknownVariable(r.to_string()))?;
        let pre = tuple.clone();
        tuple.values[idx] = value;
        let post = tuple.clone();
        Ok(Delta::update(rel.schema.relation.clone(), r.key, pre, post))
    }

    /// Raw field write without hidden/domain checks. Used by enumeration
    /// internals that sweep a scratch world through assignments.
    pub(crate) fn set_field_unchecked(&mut self, r: &VariableRef, value: Value) -> Result<()> {
        let rel = self
            .relations
            .get_mut(&*r.relation)
            .ok_or_else(|| Error::UnknownVariable(r.to_string()))?;
        let idx = rel
            .schema
            .attr_index(&r.attribute)
            .ok_or_else(|| Error::UnknownVariable(r.to_string()))?;
        let tuple = rel
            .tuples
            .get_mut(&r.key)
            .ok_or_else(|| Error::UnknownVariable(r.to_string()))?;
        tuple.values[idx] = value;
        Ok(())
    }

    /// Apply `delta`, verifying each pre-image matches the stored tuple
    /// bit-for-bit.
    pub fn apply_delta(&mut self, delta: &Delta) -> Result<()> {
        for ((rel_name, key), entry) in &delta.entries {
            let rel = self
                .relations
                .get_mut(&**rel_name)
                .ok_or_else(|| Error::Corruption(format!("delta names unknown relation {rel_name}")))?;
            let current = rel.tuples.get(key);
            if current != entry.pre.as_ref() {
                return Err(Error::Corruption(format!(
                    "delta pre-image mismatch at {rel_name}[{key}]"
                )));
            }
            match &entry.post {
                Some(t) => {
                    rel.tuples.insert(*key, t.clone());
                }
                None => {
                    rel.tuples.remove(key);
                }
            }
        }
        Ok(())
    }

    /// Undo `delta`; inverse of [`World::apply_delta`].
    pub fn revert_delta(&mut self, delta: &Delta) -> Result<()> {
        self.apply_delta(&delta.inverted())
    }

    /// Deep, independent copy. Schemas, domains and observed-field indexes
    /// are shared (they are immutable); tuples are copied.
    pub fn clone_world(&self) -> World {
        self.clone()
    }

    /// Build the token index over `relation` from its current (observed)
    /// contents and attach it to the world.
    pub fn build_token_index(
        &mut self,
        relation: &str,
        doc_attr: &str,
        string_attr: &str,
        scope: SkipScope,
        caps_only: bool,
    ) -> Result<()> {
        let rel = self.relation(relation)?;
        let schema = rel.schema.clone();
        let doc_idx = schema
            .attr_index(doc_attr)
            .ok_or_else(|| Error::UnknownVariable(format!("{relation}.{doc_attr}")))?;
        let str_idx = schema
            .attr_index(string_attr)
            .ok_or_else(|| Error::UnknownVariable(format!("{relation}.{string_attr}")))?;

        let mut doc_tokens: BTreeMap<i64, Vec<i64>> = BTreeMap::new();
        let mut positions = HashMap::new();
        let mut skip_groups: HashMap<(Option<i64>, Arc<str>), Vec<i64>> = HashMap::new();
        for (key, t) in &rel.tuples {
            let doc = t.values[doc_idx].as_int().ok_or_else(|| {
                Error::Corruption(format!("{relation}.{doc_attr} must be an integer"))
            })?;
            let s = match &t.values[str_idx] {
                Value::Str(s) => s.clone(),
                Value::Int(_) => {
                    return Err(Error::Corruption(format!(
                        "{relation}.{string_attr} must be text"
                    )))
                }
            };
            let toks = doc_tokens.entry(doc).or_default();
            positions.insert(*key, (doc, toks.len() as u32));
            toks.push(*key);
            if !caps_only || s.chars().next().is_some_and(|c| c.is_uppercase()) {
                let scope_key = match scope {
                    SkipScope::Document => Some(doc),
                    SkipScope::Corpus => None,
                };
                skip_groups.entry((scope_key, s)).or_default().push(*key);
            }
        }
        let index = TokenIndex {
            doc_attr: Arc::from(doc_attr),
            string_attr: Arc::from(string_attr),
            scope,
            caps_only,
            docs: doc_tokens.keys().copied().collect(),
            doc_tokens,
            positions,
            skip_groups,
        };
        self.token_indexes
            .insert(schema.relation.clone(), Arc::new(index));
        Ok(())
    }

    pub fn token_index(&self, relation: &str) -> Option<&Arc<TokenIndex>> {
        self.token_indexes.get(relation)
    }

    /// Hash of the full store contents; test aid for bit-identity checks.
    pub fn digest(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, rel) in &self.relations {
            name.hash(&mut h);
            for (k, t) in &rel.tuples {
                k.hash(&mut h);
                t.hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn note_tuple_reads(&self, n: u64) {
        self.counters
            .tuple_reads
            .set(self.counters.tuple_reads.get() + n);
    }

    pub fn note_factor_eval(&self) {
        self.counters
            .factor_evals
            .set(self.counters.factor_evals.get() + 1);
    }

    pub fn reset_counters(&self) {
        self.counters.tuple_reads.set(0);
        self.counters.factor_evals.set(0);
    }
}

// ---------------------------------------------------------------------------
// The TOKEN corpus
// ---------------------------------------------------------------------------

/// Relation name for ingested token corpora.
pub const TOKEN: &str = "TOKEN";
pub const TOK_ID: &str = "TOK_ID";
pub const DOC_ID: &str = "DOC_ID";
pub const STRING: &str = "STRING";
pub const LABEL: &str = "LABEL";
pub const TRUTH: &str = "TRUTH";

/// The nine sequence labels, in fixed domain order.
pub const BIO_LABELS: [&str; 9] = [
    "B-PER", "I-PER", "B-ORG", "I-ORG", "B-LOC", "I-LOC", "B-MISC", "I-MISC", "O",
];

/// Label a token carries before any inference has run.
pub const INITIAL_LABEL: &str = "O";

const CORPUS_HEADER: &str = "TOK_ID\tDOC_ID\tSTRING\tTRUTH";

pub fn bio_domain() -> Domain {
    Domain::of_strs(&BIO_LABELS)
}

pub fn token_schema() -> Schema {
    Schema::new(
        TOKEN,
        vec![
            (TOK_ID, AttrKind::Int),
            (DOC_ID, AttrKind::Int),
            (STRING, AttrKind::Text),
            (LABEL, AttrKind::Enum(bio_domain())),
            (TRUTH, AttrKind::Text),
        ],
        TOK_ID,
    )
    .expect("static schema")
}

/// Options controlling the observed-field index built at ingest time.
#[derive(Debug, Clone, Copy)]
pub struct IngestOptions {
    pub skip_scope: SkipScope,
    pub caps_only: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            skip_scope: SkipScope::Document,
            caps_only: true,
        }
    }
}

/// Read a tab-separated corpus (TOK_ID, DOC_ID, STRING, TRUTH) into a fresh
/// world. Every LABEL field starts at `"O"` and is declared hidden over the
/// nine-label domain; the remaining fields are observed.
pub fn ingest_tokens(path: &Path, options: IngestOptions) -> Result<World> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Corpus {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
    let reader = std::io::BufReader::new(file);
    let mut world = World::new();
    world.add_relation(token_schema())?;
    world.declare_hidden(TOKEN, LABEL, bio_domain())?;

    let corpus_err = |line: usize, message: String| Error::Corpus {
        path: path.display().to_string(),
        line,
        message,
    };

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| corpus_err(line_no, e.to_string()))?;
        if line.is_empty() {
            continue;
        }
        if i == 0 && line == CORPUS_HEADER {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(corpus_err(
                line_no,
                format!("expected 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        let tok_id: i64 = fields[0]
            .parse()
            .map_err(|_| corpus_err(line_no, format!("bad TOK_ID {:?}", fields[0])))?;
        let doc_id: i64 = fields[1]
            .parse()
            .map_err(|_| corpus_err(line_no, format!("bad DOC_ID {:?}", fields[1])))?;
        let tuple = Tuple::new(vec![
            Value::Int(tok_id),
            Value::Int(doc_id),
            Value::str(fields[2]),
            Value::str(INITIAL_LABEL),
            Value::str(fields[3]),
        ]);
        world
            .insert_tuple(TOKEN, tuple)
            .map_err(|e| corpus_err(line_no, e.to_string()))?;
    }
    world.build_token_index(
        TOKEN,
        DOC_ID,
        STRING,
        options.skip_scope,
        options.caps_only,
    )?;
    Ok(world)
}

// ---------------------------------------------------------------------------
// Snapshots
// ---------------------------------------------------------------------------

const SNAPSHOT_HEADER: &str = "worlddb-snapshot v1";

/// Write the world to a line-oriented snapshot. The format is versioned by
/// its header line; see the repo README for the grammar. Text values may
/// not contain tabs or newlines (the corpus reader never produces them;
/// programmatic writers get a corruption error instead of a broken file).
pub fn write_snapshot(world: &World, path: &Path) -> Result<()> {
    for rel in world.relations.values() {
        for t in rel.tuples.values() {
            for v in &t.values {
                if let Value::Str(s) = v {
                    if s.contains('\t') || s.contains('\n') || s.contains('\r') {
                        return Err(Error::Corruption(format!(
                            "value {s:?} in {} contains tab or newline; not snapshot-safe",
                            rel.schema.relation
                        )));
                    }
                }
            }
        }
    }
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{SNAPSHOT_HEADER}")?;
    for rel in world.relations.values() {
        let schema = &rel.schema;
        writeln!(
            w,
            "relation {} key={}",
            schema.relation, schema.attrs[schema.key].name
        )?;
        for a in &schema.attrs {
            match &a.kind {
                AttrKind::Int => writeln!(w, "attr {} int", a.name)?,
                AttrKind::Text => writeln!(w, "attr {} text", a.name)?,
                AttrKind::Enum(d) => {
                    let vals: Vec<String> = d.values().iter().map(|v| v.to_string()).collect();
                    writeln!(w, "attr {} enum {}", a.name, vals.join(" "))?;
                }
            }
        }
    }
    for ((rel, attr), dom) in &world.hidden {
        let vals: Vec<String> = dom.values().iter().map(|v| v.to_string()).collect();
        writeln!(w, "hidden {rel} {attr} {}", vals.join(" "))?;
    }
    for (rel, idx) in &world.token_indexes {
        writeln!(
            w,
            "index {rel} doc={} string={} scope={} caps={}",
            idx.doc_attr,
            idx.string_attr,
            match idx.scope {
                SkipScope::Document => "document",
                SkipScope::Corpus => "corpus",
            },
            idx.caps_only
        )?;
    }
    for rel in world.relations.values() {
        writeln!(w, "tuples {} {}", rel.schema.relation, rel.tuples.len())?;
        for t in rel.tuples.values() {
            let fields: Vec<String> = t.values.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", fields.join("\t"))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a world from a snapshot written by [`write_snapshot`].
pub fn read_snapshot(path: &Path) -> Result<World> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let snap_err = |line: usize, message: String| Error::Corpus {
        path: path.display().to_string(),
        line,
        message,
    };
    match lines.next() {
        Some((_, l)) if l == SNAPSHOT_HEADER => {}
        _ => return Err(snap_err(1, "missing snapshot header".into())),
    }

    // (relation name, key attribute, attributes) accumulated until the
    // schema block ends.
    type PendingSchema = (String, String, Vec<(String, AttrKind)>);
    let mut world = World::new();
    let mut pending: Option<PendingSchema> = None;
    let mut indexes: Vec<(String, String, String, SkipScope, bool)> = Vec::new();
    let mut tuples_left = 0usize;
    let mut current_rel = String::new();

    let flush_schema =
        |world: &mut World, pending: &mut Option<PendingSchema>| -> Result<()> {
            if let Some((name, key, attrs)) = pending.take() {
                let borrowed: Vec<(&str, AttrKind)> =
                    attrs.iter().map(|(n, k)| (n.as_str(), k.clone())).collect();
                world.add_relation(Schema::new(&name, borrowed, &key)?)?;
            }
            Ok(())
        };

    for (i, line) in lines {
        let line_no = i + 1;
        if tuples_left > 0 {
            let rel = world.relation(&current_rel)?;
            let schema = rel.schema.clone();
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != schema.arity() {
                return Err(snap_err(line_no, format!("expected {} fields", schema.arity())));
            }
            let mut values = Vec::with_capacity(fields.len());
            for (f, a) in fields.iter().zip(&schema.attrs) {
                values.push(match a.kind {
                    AttrKind::Int => Value::Int(f.parse().map_err(|_| {
                        snap_err(line_no, format!("bad integer {f:?} for {}", a.name))
                    })?),
                    _ => Value::str(*f),
                });
            }
            world
                .insert_tuple(&current_rel, Tuple::new(values))
                .map_err(|e| snap_err(line_no, e.to_string()))?;
            tuples_left -= 1;
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        let tag = parts.next().unwrap_or("");
        match tag {
            "relation" => {
                flush_schema(&mut world, &mut pending)?;
                let name = parts
                    .next()
                    .ok_or_else(|| snap_err(line_no, "relation needs a name".into()))?;
                let key = parts
                    .next()
                    .and_then(|p| p.strip_prefix("key="))
                    .ok_or_else(|| snap_err(line_no, "relation needs key=<attr>".into()))?;
                pending = Some((name.to_string(), key.to_string(), Vec::new()));
            }
            "attr" => {
                let (_, _, attrs) = pending
                    .as_mut()
                    .ok_or_else(|| snap_err(line_no, "attr outside a relation".into()))?;
                let name = parts
                    .next()
                    .ok_or_else(|| snap_err(line_no, "attr needs a name".into()))?;
                let kind = match parts.next() {
                    Some("int") => AttrKind::Int,
                    Some("text") => AttrKind::Text,
                    Some("enum") => {
                        let vals: Vec<Value> = parts.by_ref().map(Value::str).collect();
                        AttrKind::Enum(Domain::new(vals).map_err(|e| {
                            snap_err(line_no, e.to_string())
                        })?)
                    }
                    other => {
                        return Err(snap_err(line_no, format!("bad attr kind {other:?}")));
                    }
                };
                attrs.push((name.to_string(), kind));
            }
            "hidden" => {
                flush_schema(&mut world, &mut pending)?;
                let rel = parts
                    .next()
                    .ok_or_else(|| snap_err(line_no, "hidden needs a relation".into()))?;
                let attr = parts
                    .next()
                    .ok_or_else(|| snap_err(line_no, "hidden needs an attribute".into()))?;
                let vals: Vec<Value> = parts.map(Value::str).collect();
                let dom = Domain::new(vals).map_err(|e| snap_err(line_no, e.to_string()))?;
                world
                    .declare_hidden(rel, attr, dom)
                    .map_err(|e| snap_err(line_no, e.to_string()))?;
            }
            "index" => {
                flush_schema(&mut world, &mut pending)?;
                let rel = parts
                    .next()
                    .ok_or_else(|| snap_err(line_no, "index needs a relation".into()))?
                    .to_string();
                let mut doc = None;
                let mut string = None;
                let mut scope = SkipScope::Document;
                let mut caps = true;
                for p in parts {
                    if let Some(v) = p.strip_prefix("doc=") {
                        doc = Some(v.to_string());
                    } else if let Some(v) = p.strip_prefix("string=") {
                        string = Some(v.to_string());
                    } else if let Some(v) = p.strip_prefix("scope=") {
                        scope = match v {
                            "document" => SkipScope::Document,
                            "corpus" => SkipScope::Corpus,
                            _ => return Err(snap_err(line_no, format!("bad scope {v:?}"))),
                        };
                    } else if let Some(v) = p.strip_prefix("caps=") {
                        caps = v == "true";
                    }
                }
                let doc =
                    doc.ok_or_else(|| snap_err(line_no, "index needs doc=<attr>".into()))?;
                let string =
                    string.ok_or_else(|| snap_err(line_no, "index needs string=<attr>".into()))?;
                indexes.push((rel, doc, string, scope, caps));
            }
            "tuples" => {
                flush_schema(&mut world, &mut pending)?;
                current_rel = parts
                    .next()
                    .ok_or_else(|| snap_err(line_no, "tuples needs a relation".into()))?
                    .to_string();
                tuples_left = parts
                    .next()
                    .and_then(|p| p.parse().ok())
                    .ok_or_else(|| snap_err(line_no, "tuples needs a count".into()))?;
                world.relation(&current_rel).map_err(|e| {
                    snap_err(line_no, e.to_string())
                })?;
            }
            other => {
                return Err(snap_err(line_no, format!("unknown snapshot directive {other:?}")));
            }
        }
    }
    flush_schema(&mut world, &mut pending)?;
    if tuples_left > 0 {
        return Err(snap_err(0, "snapshot truncated inside a tuple block".into()));
    }
    for (rel, doc, string, scope, caps) in indexes {
        world.build_token_index(&rel, &doc, &string, scope, caps)?;
    }
    Ok(world)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mini_world() -> World {
        let mut w = World::new();
        w.add_relation(token_schema()).unwrap();
        w.declare_hidden(TOKEN, LABEL, bio_domain()).unwrap();
        for (i, (doc, s)) in [(1, "Alice"), (1, "works"), (1, "IBM"), (2, "IBM")]
            .iter()
            .enumerate()
        {
            w.insert_tuple(
                TOKEN,
                Tuple::new(vec![
                    Value::Int(i as i64),
                    Value::Int(*doc),
                    Value::str(*s),
                    Value::str("O"),
                    Value::str("O"),
                ]),
            )
            .unwrap();
        }
        w.build_token_index(TOKEN, DOC_ID, STRING, SkipScope::Document, true)
            .unwrap();
        w
    }

    fn label_ref(key: i64) -> VariableRef {
        VariableRef::new(TOKEN, key, LABEL)
    }

    #[test]
    fn update_field_returns_pre_and_post_images() {
        let mut w = mini_world();
        let d = w.update_field(&label_ref(0), Value::str("B-PER")).unwrap();
        assert_eq!(d.len(), 1);
        let (_, _, pre) = d.minus().next().unwrap();
        let (_, _, post) = d.plus().next().unwrap();
        assert_eq!(pre.values[3], Value::str("O"));
        assert_eq!(post.values[3], Value::str("B-PER"));
        assert_eq!(w.field(&label_ref(0)).unwrap(), &Value::str("B-PER"));
    }

    #[test]
    fn update_to_same_value_coalesces_to_empty() {
        let mut w = mini_world();
        let d = w.update_field(&label_ref(0), Value::str("O")).unwrap();
        let mut acc = Delta::empty();
        acc.merge(d);
        assert!(acc.is_empty());
    }

    #[test]
    fn two_updates_coalesce_to_oldest_newest_pair() {
        let mut w = mini_world();
        let mut acc = Delta::empty();
        acc.merge(w.update_field(&label_ref(0), Value::str("B-PER")).unwrap());
        acc.merge(w.update_field(&label_ref(0), Value::str("I-PER")).unwrap());
        assert_eq!(acc.len(), 1);
        let (_, _, pre) = acc.minus().next().unwrap();
        let (_, _, post) = acc.plus().next().unwrap();
        assert_eq!(pre.values[3], Value::str("O"));
        assert_eq!(post.values[3], Value::str("I-PER"));
    }

    #[test]
    fn flip_and_flip_back_cancels() {
        let mut w = mini_world();
        let mut acc = Delta::empty();
        acc.merge(w.update_field(&label_ref(0), Value::str("B-ORG")).unwrap());
        acc.merge(w.update_field(&label_ref(0), Value::str("O")).unwrap());
        assert!(acc.is_empty());
    }

    #[test]
    fn compose_with_empty_is_identity() {
        let mut w = mini_world();
        let d = w.update_field(&label_ref(1), Value::str("B-LOC")).unwrap();
        assert_eq!(d.clone().compose(Delta::empty()), d);
    }

    #[test]
    fn apply_then_revert_roundtrips() {
        let mut w = mini_world();
        let before = w.digest();
        let mut acc = Delta::empty();
        acc.merge(w.update_field(&label_ref(0), Value::str("B-PER")).unwrap());
        acc.merge(w.update_field(&label_ref(2), Value::str("B-ORG")).unwrap());
        let after = w.digest();
        w.revert_delta(&acc).unwrap();
        assert_eq!(w.digest(), before);
        w.apply_delta(&acc).unwrap();
        assert_eq!(w.digest(), after);
    }

    #[test]
    fn apply_rejects_mismatched_pre_image() {
        let mut w = mini_world();
        let d = w.update_field(&label_ref(0), Value::str("B-PER")).unwrap();
        // Already applied by update_field; applying again must fail on the
        // stale pre-image.
        let err = w.apply_delta(&d).unwrap_err();
        assert!(matches!(err, Error::Corruption(_)));
    }

    #[test]
    fn update_rejects_observed_and_out_of_domain() {
        let mut w = mini_world();
        let obs = VariableRef::new(TOKEN, 0, STRING);
        assert!(matches!(
            w.update_field(&obs, Value::str("x")),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            w.update_field(&label_ref(0), Value::str("B-CAT")),
            Err(Error::OutOfDomain { .. })
        ));
        assert!(matches!(
            w.update_field(&label_ref(99), Value::str("O")),
            Err(Error::UnknownVariable(_))
        ));
    }

    #[test]
    fn clone_world_is_independent() {
        let w = mini_world();
        for (i, label) in [(0, "B-PER"), (2, "B-ORG"), (3, "I-LOC")] {
            let mut c = w.clone_world();
            c.update_field(&label_ref(i), Value::str(label)).unwrap();
            assert_eq!(w.field(&label_ref(i)).unwrap(), &Value::str("O"));
            assert_eq!(c.field(&label_ref(i)).unwrap(), &Value::str(label));
        }
    }

    #[test]
    fn skip_partners_scope_and_caps() {
        let w = mini_world();
        let idx = w.token_index(TOKEN).unwrap();
        let ibm: Arc<str> = Arc::from("IBM");
        // Document scope: the two IBM tokens live in different documents.
        assert_eq!(idx.skip_partners(1, &ibm), &[2]);
        assert_eq!(idx.skip_partners(2, &ibm), &[3]);
        // Lowercase strings are out of scope under caps_only.
        let works: Arc<str> = Arc::from("works");
        assert!(idx.skip_partners(1, &works).is_empty());
    }

    #[test]
    fn corpus_roundtrip_and_initialization() {
        let dir = std::env::temp_dir().join("worlddb-store-test");
        std::fs::create_dir_all(&dir).unwrap();
        let corpus = dir.join("five.tsv");
        std::fs::write(
            &corpus,
            "TOK_ID\tDOC_ID\tSTRING\tTRUTH\n\
             1\t1\tAlice\tB-PER\n\
             2\t1\tworks\tO\n\
             3\t1\tat\tO\n\
             4\t1\tIBM\tB-ORG\n\
             5\t2\tIBM\tB-ORG\n",
        )
        .unwrap();
        let w = ingest_tokens(&corpus, IngestOptions::default()).unwrap();
        let rel = w.relation(TOKEN).unwrap();
        assert_eq!(rel.tuples.len(), 5);
        for t in rel.tuples.values() {
            assert_eq!(t.values[3], Value::str("O"));
        }
        assert!(w.hidden_domain(TOKEN, LABEL).is_some());

        let snap = dir.join("five.snap");
        write_snapshot(&w, &snap).unwrap();
        let w2 = read_snapshot(&snap).unwrap();
        assert_eq!(w.digest(), w2.digest());
        assert!(w2.token_index(TOKEN).is_some());
    }

    #[test]
    fn snapshot_rejects_tab_bearing_values() {
        let dir = std::env::temp_dir().join("worlddb-store-test");
        std::fs::create_dir_all(&dir).unwrap();
        let mut w = mini_world();
        w.insert_tuple(
            TOKEN,
            Tuple::new(vec![
                Value::Int(50),
                Value::Int(1),
                Value::str("has\ttab"),
                Value::str("O"),
                Value::str("O"),
            ]),
        )
        .unwrap();
        let err = write_snapshot(&w, &dir.join("bad.snap")).unwrap_err();
        assert!(matches!(err, Error::Corruption(_)));
    }

    #[test]
    fn empty_corpus_gives_empty_relation() {
        let dir = std::env::temp_dir().join("worlddb-store-test");
        std::fs::create_dir_all(&dir).unwrap();
        let corpus = dir.join("empty.tsv");
        std::fs::write(&corpus, "").unwrap();
        let w = ingest_tokens(&corpus, IngestOptions::default()).unwrap();
        assert_eq!(w.relation(TOKEN).unwrap().tuples.len(), 0);
    }

    #[test]
    fn duplicate_tok_id_is_rejected_with_line() {
        let dir = std::env::temp_dir().join("worlddb-store-test");
        std::fs::create_dir_all(&dir).unwrap();
        let corpus = dir.join("dup.tsv");
        std::fs::write(&corpus, "1\t1\ta\tO\n1\t1\tb\tO\n").unwrap();
        match ingest_tokens(&corpus, IngestOptions::default()) {
            Err(Error::Corpus { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected corpus error, got {other:?}"),
        }
    }

    #[test]
    fn randomized_update_sequences_roundtrip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let mut w = mini_world();
            let w0 = w.clone_world();
            let before = w.digest();
            let mut acc = Delta::empty();
            let steps = rng.gen_range(1..12);
            let mut touched = std::collections::BTreeSet::new();
            for _ in 0..steps {
                let key = rng.gen_range(0..4);
                let label = BIO_LABELS[rng.gen_range(0..BIO_LABELS.len())];
                touched.insert(key);
                acc.merge(w.update_field(&label_ref(key), Value::str(label)).unwrap());
            }
            // Coalesced size never exceeds the distinct tuples touched.
            assert!(acc.len() <= touched.len());
            // Replaying the coalesced delta on the initial world matches the
            // final world exactly.
            let mut replay = w0.clone_world();
            replay.apply_delta(&acc).unwrap();
            assert_eq!(replay.digest(), w.digest());
            // And reverting restores the starting world.
            w.revert_delta(&acc).unwrap();
            assert_eq!(w.digest(), before);
        }
    }
}
