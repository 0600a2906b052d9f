//! Skip-chain sequence-labeling model over the TOKEN relation.
//!
//! Four factor families: emission (observed string with its label),
//! transition (consecutive labels within a document), bias (each label on
//! its own), and skip (agreement between labels of identically spelled
//! tokens). Skip factors make the graph loopy, which is exactly why the
//! engine samples instead of running exact inference.
//!
//! Also here: the batched uniform-flip proposer, BIO validity checking, and
//! a reproducible synthetic corpus generator for desk-scale runs.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use smallvec::smallvec;

use crate::factor::{FactorGraphSpec, FactorTemplate, NeighborSet};
use crate::mcmc::{flip_delta, ChainRng, Proposal, Proposer};
use crate::store::{
    bio_domain, Value, VariableRef, World, BIO_LABELS, DOC_ID, LABEL, STRING, TOKEN,
};
use crate::{Error, Result};

/// One of the nine sequence labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BioLabel {
    BPer,
    IPer,
    BOrg,
    IOrg,
    BLoc,
    ILoc,
    BMisc,
    IMisc,
    Outside,
}

impl BioLabel {
    pub const ALL: [BioLabel; 9] = [
        BioLabel::BPer,
        BioLabel::IPer,
        BioLabel::BOrg,
        BioLabel::IOrg,
        BioLabel::BLoc,
        BioLabel::ILoc,
        BioLabel::BMisc,
        BioLabel::IMisc,
        BioLabel::Outside,
    ];

    pub fn as_str(self) -> &'static str {
        BIO_LABELS[self as usize]
    }

    pub fn parse(s: &str) -> Option<BioLabel> {
        BIO_LABELS
            .iter()
            .position(|l| *l == s)
            .map(|i| BioLabel::ALL[i])
    }

    /// Entity type ("PER", "ORG", ...) for B-/I- labels, `None` for O.
    pub fn entity_type(self) -> Option<&'static str> {
        self.as_str().split_once('-').map(|(_, t)| t)
    }

    pub fn is_inside(self) -> bool {
        self.as_str().starts_with("I-")
    }
}

/// A position whose I- label does not continue a same-type mention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BioViolation {
    pub index: usize,
    pub label: BioLabel,
}

/// Report the positions where an inside label follows neither B-T nor I-T
/// of the same type. The proposer is free to produce such sequences; this
/// is a diagnostic, not an enforced constraint.
pub fn bio_validate(labels: &[BioLabel]) -> Vec<BioViolation> {
    let mut out = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        if !l.is_inside() {
            continue;
        }
        let legal = i > 0 && labels[i - 1].entity_type() == l.entity_type();
        if !legal {
            out.push(BioViolation {
                index: i,
                label: *l,
            });
        }
    }
    out
}

fn label_index(v: &Value) -> Result<usize> {
    let s = v.as_str().ok_or_else(|| Error::OutOfDomain {
        target: "label".into(),
        value: format!("{v:?}"),
    })?;
    BIO_LABELS
        .iter()
        .position(|l| *l == s)
        .ok_or_else(|| Error::OutOfDomain {
            target: "label".into(),
            value: s.to_string(),
        })
}

/// Weights of the four template families. Missing entries score zero.
#[derive(Debug, Clone, Default)]
pub struct SkipChainWeights {
    /// string -> per-label emission weights.
    pub emission: BTreeMap<String, [f64; 9]>,
    /// previous label x next label.
    pub transition: [[f64; 9]; 9],
    /// per-label bias.
    pub bias: [f64; 9],
    /// agreement bonus for identically spelled tokens sharing a label.
    pub skip: f64,
}

// --------------------------------------------------------------------------
// Templates
// --------------------------------------------------------------------------

fn token_ref(key: i64) -> VariableRef {
    VariableRef::new(TOKEN, key, LABEL)
}

fn string_ref(key: i64) -> VariableRef {
    VariableRef::new(TOKEN, key, STRING)
}

fn require_index(world: &World) -> Result<&Arc<crate::store::TokenIndex>> {
    world.token_index(TOKEN).ok_or_else(|| {
        Error::Corruption("TOKEN relation has no token index; ingest builds one".into())
    })
}

/// Observed string with its label.
pub struct EmissionTemplate {
    emission: BTreeMap<String, [f64; 9]>,
    flat: Vec<f64>,
}

impl EmissionTemplate {
    fn new(emission: BTreeMap<String, [f64; 9]>) -> EmissionTemplate {
        let flat = emission.values().flatten().copied().collect();
        EmissionTemplate { emission, flat }
    }
}

impl FactorTemplate for EmissionTemplate {
    fn name(&self) -> &str {
        "emission"
    }

    fn arity(&self) -> usize {
        2
    }

    fn weights(&self) -> &[f64] {
        &self.flat
    }

    fn features(&self, assignment: &[Value]) -> Result<Vec<f64>> {
        // One-hot over the (string, label) entries present in the weights;
        // strings outside the table have all-zero features.
        let mut phi = vec![0.0; self.flat.len()];
        let s = assignment[0].as_str().unwrap_or("");
        let li = label_index(&assignment[1])?;
        if let Some(row) = self.emission.keys().position(|k| k == s) {
            phi[row * 9 + li] = 1.0;
        }
        Ok(phi)
    }

    fn log_score(&self, assignment: &[Value]) -> Result<f64> {
        let s = assignment[0].as_str().unwrap_or("");
        let li = label_index(&assignment[1])?;
        Ok(self.emission.get(s).map_or(0.0, |row| row[li]))
    }

    fn instances(&self, world: &World) -> Result<Vec<NeighborSet>> {
        let rel = world.relation(TOKEN)?;
        Ok(rel
            .tuples
            .keys()
            .map(|k| smallvec![string_ref(*k), token_ref(*k)])
            .collect())
    }

    fn touched(
        &self,
        _world: &World,
        changed: &VariableRef,
        out: &mut Vec<NeighborSet>,
    ) -> Result<()> {
        if &*changed.attribute == LABEL && &*changed.relation == TOKEN {
            out.push(smallvec![string_ref(changed.key), token_ref(changed.key)]);
        }
        Ok(())
    }
}

/// Consecutive labels within a document.
pub struct TransitionTemplate {
    transition: [[f64; 9]; 9],
    flat: Vec<f64>,
}

impl TransitionTemplate {
    fn new(transition: [[f64; 9]; 9]) -> TransitionTemplate {
        let flat = transition.iter().flatten().copied().collect();
        TransitionTemplate { transition, flat }
    }
}

impl FactorTemplate for TransitionTemplate {
    fn name(&self) -> &str {
        "transition"
    }

    fn arity(&self) -> usize {
        2
    }

    fn weights(&self) -> &[f64] {
        &self.flat
    }

    fn features(&self, assignment: &[Value]) -> Result<Vec<f64>> {
        let a = label_index(&assignment[0])?;
        let b = label_index(&assignment[1])?;
        let mut phi = vec![0.0; 81];
        phi[a * 9 + b] = 1.0;
        Ok(phi)
    }

    fn log_score(&self, assignment: &[Value]) -> Result<f64> {
        let a = label_index(&assignment[0])?;
        let b = label_index(&assignment[1])?;
        Ok(self.transition[a][b])
    }

    fn instances(&self, world: &World) -> Result<Vec<NeighborSet>> {
        let index = require_index(world)?;
        let mut out = Vec::new();
        for toks in index.doc_tokens.values() {
            for pair in toks.windows(2) {
                out.push(smallvec![token_ref(pair[0]), token_ref(pair[1])]);
            }
        }
        Ok(out)
    }

    fn touched(
        &self,
        world: &World,
        changed: &VariableRef,
        out: &mut Vec<NeighborSet>,
    ) -> Result<()> {
        if &*changed.attribute != LABEL || &*changed.relation != TOKEN {
            return Ok(());
        }
        let index = require_index(world)?;
        let Some((doc, pos)) = index.positions.get(&changed.key) else {
            return Ok(());
        };
        let toks = &index.doc_tokens[doc];
        let pos = *pos as usize;
        if pos > 0 {
            out.push(smallvec![token_ref(toks[pos - 1]), token_ref(toks[pos])]);
        }
        if pos + 1 < toks.len() {
            out.push(smallvec![token_ref(toks[pos]), token_ref(toks[pos + 1])]);
        }
        Ok(())
    }
}

/// Per-label bias.
pub struct BiasTemplate {
    bias: [f64; 9],
}

impl FactorTemplate for BiasTemplate {
    fn name(&self) -> &str {
        "bias"
    }

    fn arity(&self) -> usize {
        1
    }

    fn weights(&self) -> &[f64] {
        &self.bias
    }

    fn features(&self, assignment: &[Value]) -> Result<Vec<f64>> {
        let li = label_index(&assignment[0])?;
        let mut phi = vec![0.0; 9];
        phi[li] = 1.0;
        Ok(phi)
    }

    fn log_score(&self, assignment: &[Value]) -> Result<f64> {
        Ok(self.bias[label_index(&assignment[0])?])
    }

    fn instances(&self, world: &World) -> Result<Vec<NeighborSet>> {
        let rel = world.relation(TOKEN)?;
        Ok(rel.tuples.keys().map(|k| smallvec![token_ref(*k)]).collect())
    }

    fn touched(
        &self,
        _world: &World,
        changed: &VariableRef,
        out: &mut Vec<NeighborSet>,
    ) -> Result<()> {
        if &*changed.attribute == LABEL && &*changed.relation == TOKEN {
            out.push(smallvec![token_ref(changed.key)]);
        }
        Ok(())
    }
}

/// Agreement between labels of identically spelled tokens (the skip edges).
/// Partner lookup goes through the world's string index, so the set of
/// factors touched by one flip is the token's same-string group, which stays constant
/// as the database grows.
pub struct SkipTemplate {
    weights: [f64; 1],
}

impl SkipTemplate {
    fn pair_score(&self, a: &Value, b: &Value) -> f64 {
        if a == b {
            self.weights[0]
        } else {
            0.0
        }
    }
}

impl FactorTemplate for SkipTemplate {
    fn name(&self) -> &str {
        "skip"
    }

    fn arity(&self) -> usize {
        2
    }

    fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn features(&self, assignment: &[Value]) -> Result<Vec<f64>> {
        label_index(&assignment[0])?;
        label_index(&assignment[1])?;
        Ok(vec![if assignment[0] == assignment[1] { 1.0 } else { 0.0 }])
    }

    fn log_score(&self, assignment: &[Value]) -> Result<f64> {
        label_index(&assignment[0])?;
        label_index(&assignment[1])?;
        Ok(self.pair_score(&assignment[0], &assignment[1]))
    }

    fn instances(&self, world: &World) -> Result<Vec<NeighborSet>> {
        let index = require_index(world)?;
        let rel = world.relation(TOKEN)?;
        let string_idx = rel.schema.attr_index(STRING).expect("TOKEN has STRING");
        let doc_idx = rel.schema.attr_index(DOC_ID).expect("TOKEN has DOC_ID");
        let mut out = Vec::new();
        // Deterministic enumeration: drive off the tuple order, pairing each
        // token with its later partners.
        for (key, t) in &rel.tuples {
            let Value::Str(s) = &t.values[string_idx] else {
                continue;
            };
            let doc = t.values[doc_idx].as_int().unwrap_or(0);
            for partner in index.skip_partners(doc, s) {
                if *partner > *key {
                    out.push(smallvec![token_ref(*key), token_ref(*partner)]);
                }
            }
        }
        Ok(out)
    }

    fn touched(
        &self,
        world: &World,
        changed: &VariableRef,
        out: &mut Vec<NeighborSet>,
    ) -> Result<()> {
        if &*changed.attribute != LABEL || &*changed.relation != TOKEN {
            return Ok(());
        }
        let index = require_index(world)?;
        let t = world.tuple(TOKEN, changed.key)?;
        let rel = world.relation(TOKEN)?;
        let string_idx = rel.schema.attr_index(STRING).expect("TOKEN has STRING");
        let doc_idx = rel.schema.attr_index(DOC_ID).expect("TOKEN has DOC_ID");
        let Value::Str(s) = &t.values[string_idx] else {
            return Ok(());
        };
        let doc = t.values[doc_idx].as_int().unwrap_or(0);
        for partner in index.skip_partners(doc, s) {
            if *partner != changed.key {
                let (a, b) = if *partner < changed.key {
                    (*partner, changed.key)
                } else {
                    (changed.key, *partner)
                };
                out.push(smallvec![token_ref(a), token_ref(b)]);
            }
        }
        Ok(())
    }
}

/// Assemble the skip-chain spec from weights: emission + transition + bias
/// + skip templates, with TOKEN.LABEL hidden over the nine labels.
pub fn build_skip_chain_spec(weights: &SkipChainWeights) -> FactorGraphSpec {
    FactorGraphSpec::new()
        .with_hidden(TOKEN, LABEL, bio_domain())
        .with_template(Box::new(EmissionTemplate::new(weights.emission.clone())))
        .with_template(Box::new(TransitionTemplate::new(weights.transition)))
        .with_template(Box::new(BiasTemplate { bias: weights.bias }))
        .with_template(Box::new(SkipTemplate {
            weights: [weights.skip],
        }))
}

// --------------------------------------------------------------------------
// Proposer
// --------------------------------------------------------------------------

/// Label variables of the currently loaded documents plus the proposal
/// counter that triggers the next batch load.
#[derive(Debug, Clone)]
pub struct BatchState {
    pub vars: Vec<i64>,
    pub proposals_since_load: u64,
}

/// Load a fresh batch: up to `max_docs` documents chosen uniformly at
/// random without replacement; the batch holds their label variables.
pub fn refresh_batch(world: &World, rng: &mut ChainRng, max_docs: usize) -> Result<BatchState> {
    let index = require_index(world)?;
    if index.docs.is_empty() {
        return Err(Error::Contract("corpus has no documents to batch".into()));
    }
    let mut docs: Vec<i64> = index.docs.clone();
    let take = max_docs.min(docs.len());
    // Partial Fisher-Yates: the first `take` entries end up a uniform
    // without-replacement draw.
    for i in 0..take {
        let j = rng.gen_range(i..docs.len());
        docs.swap(i, j);
    }
    let mut vars = Vec::new();
    for doc in docs[..take].iter() {
        vars.extend(index.doc_tokens[doc].iter().copied());
    }
    Ok(BatchState {
        vars,
        proposals_since_load: 0,
    })
}

/// The uniform flip proposer: pick a label variable uniformly from the
/// loaded batch, then a new label uniformly from all nine (the current one
/// included, so the chain may propose staying put). Symmetric by
/// construction. Every `refresh_every` proposals a new batch of documents
/// is loaded, regardless of walk boundaries.
pub struct BatchFlipProposer {
    batch: Option<BatchState>,
    pub max_docs: usize,
    pub refresh_every: u64,
}

impl BatchFlipProposer {
    pub fn new() -> BatchFlipProposer {
        BatchFlipProposer {
            batch: None,
            max_docs: 5,
            refresh_every: 2000,
        }
    }

    pub fn batch(&self) -> Option<&BatchState> {
        self.batch.as_ref()
    }
}

impl Default for BatchFlipProposer {
    fn default() -> Self {
        BatchFlipProposer::new()
    }
}

impl Proposer for BatchFlipProposer {
    fn propose(&mut self, world: &World, rng: &mut ChainRng) -> Result<Proposal> {
        let needs_refresh = match &self.batch {
            None => true,
            Some(b) => b.proposals_since_load >= self.refresh_every || b.vars.is_empty(),
        };
        if needs_refresh {
            self.batch = Some(refresh_batch(world, rng, self.max_docs)?);
        }
        let batch = self.batch.as_mut().expect("batch loaded above");
        batch.proposals_since_load += 1;
        let key = batch.vars[rng.gen_range(0..batch.vars.len())];
        let label = BIO_LABELS[rng.gen_range(0..BIO_LABELS.len())];
        let delta = flip_delta(world, &token_ref(key), Value::str(label))?;
        Ok(Proposal::symmetric(delta, 0.0))
    }
}

// --------------------------------------------------------------------------
// Synthetic corpus
// --------------------------------------------------------------------------

/// Configuration for the synthetic corpus generator. Entity strings are
/// capitalized and deliberately repeated within documents so skip factors
/// fire; filler strings are lowercase. The planted TRUTH labels follow the
/// begin/inside scheme and validate cleanly.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub docs: u64,
    pub tokens_per_doc: u64,
    /// Total vocabulary size; roughly a third becomes entity strings.
    pub vocab: u64,
    /// Probability a position starts an entity mention.
    pub entity_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            docs: 25,
            tokens_per_doc: 40,
            vocab: 120,
            entity_rate: 0.25,
            seed: 0,
        }
    }
}

const ENTITY_TYPES: [&str; 4] = ["PER", "ORG", "LOC", "MISC"];

fn entity_pool(cfg: &SynthConfig) -> Vec<(String, usize)> {
    let n = cfg.vocab.div_ceil(3).max(1);
    (0..n)
        .map(|i| {
            let ty = (i % 4) as usize;
            (format!("{}{}", ["Ann", "Acme", "Oslo", "Zeta"][ty], i), ty)
        })
        .collect()
}

fn filler_pool(cfg: &SynthConfig) -> Vec<String> {
    let e = cfg.vocab.div_ceil(3).max(1);
    let n = cfg.vocab.saturating_sub(e);
    (0..n).map(|i| format!("w{i}")).collect()
}

/// Write a reproducible TSV corpus (TOK_ID, DOC_ID, STRING, TRUTH).
pub fn generate_corpus(cfg: &SynthConfig, path: &Path) -> Result<()> {
    let mut rng = crate::mcmc::chain_rng(cfg.seed, 0);
    let entities = entity_pool(cfg);
    let fillers = filler_pool(cfg);
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "TOK_ID\tDOC_ID\tSTRING\tTRUTH")?;
    let mut tok_id: i64 = 0;
    for doc in 0..cfg.docs {
        // A small per-document working set of distinct entities gets
        // reused, planting repeated strings. Distinctness keeps the
        // within-document repetition profile independent of the pool size,
        // so per-step sampling cost stays flat across corpus sizes.
        let take = 3.min(entities.len());
        let mut candidates: Vec<usize> = (0..entities.len()).collect();
        for i in 0..take {
            let j = rng.gen_range(i..candidates.len());
            candidates.swap(i, j);
        }
        let working: Vec<usize> = candidates[..take].to_vec();
        let mut emitted = 0u64;
        while emitted < cfg.tokens_per_doc {
            let remaining = cfg.tokens_per_doc - emitted;
            if !entities.is_empty() && rng.gen::<f64>() < cfg.entity_rate {
                let idx = working[rng.gen_range(0..working.len())];
                let (s, ty) = &entities[idx];
                let two_tokens = remaining >= 2 && rng.gen::<f64>() < 0.3;
                writeln!(
                    w,
                    "{tok_id}\t{doc}\t{s}\tB-{}",
                    ENTITY_TYPES[*ty]
                )?;
                tok_id += 1;
                emitted += 1;
                if two_tokens {
                    let cont = &entities[working[rng.gen_range(0..working.len())]].0;
                    writeln!(w, "{tok_id}\t{doc}\t{cont}\tI-{}", ENTITY_TYPES[*ty])?;
                    tok_id += 1;
                    emitted += 1;
                }
            } else {
                let s = if fillers.is_empty() {
                    &entities[working[rng.gen_range(0..working.len())]].0
                } else {
                    &fillers[rng.gen_range(0..fillers.len())]
                };
                let truth = if fillers.is_empty() { "B-PER" } else { "O" };
                // With an all-entity vocabulary the filler branch still
                // plants entity strings; label them as mentions.
                writeln!(w, "{tok_id}\t{doc}\t{s}\t{truth}")?;
                tok_id += 1;
                emitted += 1;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Weights matched to the generator's vocabulary: emission nudges entity
/// strings toward their planted type, filler toward O; begin-to-inside
/// transitions of the same type are encouraged; a mild O bias; skip
/// agreement strong enough to matter. Hand-set, not trained.
pub fn matching_weights(cfg: &SynthConfig) -> SkipChainWeights {
    let mut weights = SkipChainWeights {
        skip: 0.8,
        ..Default::default()
    };
    for (s, ty) in entity_pool(cfg) {
        let mut row = [0.0; 9];
        row[ty * 2] = 1.6; // B-<type>
        row[ty * 2 + 1] = 0.4; // I-<type>
        row[8] = -0.4;
        weights.emission.insert(s, row);
    }
    for f in filler_pool(cfg) {
        let mut row = [0.0; 9];
        row[8] = 1.2;
        weights.emission.insert(f, row);
    }
    for ty in 0..4 {
        weights.transition[ty * 2][ty * 2 + 1] = 1.0; // B-T -> I-T
        weights.transition[ty * 2 + 1][ty * 2 + 1] = 0.3; // I-T -> I-T
    }
    for l in 0..8 {
        weights.transition[8][l] = 0.1; // O -> mention start
    }
    weights.bias[8] = 0.6;
    weights
}

/// Serialize weights in the model-file grammar (see [`crate::model`]).
pub fn write_model_file(weights: &SkipChainWeights, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "# skip-chain model")?;
    writeln!(w, "hidden TOKEN.LABEL {}", BIO_LABELS.join(" "))?;
    writeln!(w, "template emission token_emission")?;
    writeln!(w, "template transition label_transition")?;
    writeln!(w, "template bias label_bias")?;
    writeln!(w, "template skip same_string_agreement")?;
    for (s, row) in &weights.emission {
        for (li, v) in row.iter().enumerate() {
            if *v != 0.0 {
                writeln!(w, "weight emission {s} {} {v}", BIO_LABELS[li])?;
            }
        }
    }
    for (a, row) in weights.transition.iter().enumerate() {
        for (b, v) in row.iter().enumerate() {
            if *v != 0.0 {
                writeln!(w, "weight transition {} {} {v}", BIO_LABELS[a], BIO_LABELS[b])?;
            }
        }
    }
    for (li, v) in weights.bias.iter().enumerate() {
        if *v != 0.0 {
            writeln!(w, "weight bias {} {v}", BIO_LABELS[li])?;
        }
    }
    if weights.skip != 0.0 {
        writeln!(w, "weight skip {}", weights.skip)?;
    }
    w.flush()?;
    Ok(())
}
