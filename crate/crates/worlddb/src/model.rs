//! The model file: a declarative text format naming templates, feature
//! functions, weights, hidden-field declarations, and domains.
//!
//! Line-oriented grammar (full description in the README):
//!
//! ```text
//! # comment
//! hidden <relation>.<attribute> <v1> <v2> ...
//! template <name> <feature-fn> [args...]
//! weight <template-name> <key...> <value>
//! ```
//!
//! Feature functions are selected by name from a built-in registry:
//! `token_emission`, `label_transition`, `label_bias`,
//! `same_string_agreement` (the sequence-labeling families) and `table`
//! (an explicit log-score table over named fields, for small hand-built
//! models). Weights referenced nowhere default to zero; a `weight` line for
//! an unknown template is reported as a warning, not an error.

use std::collections::BTreeMap;
use std::path::Path;

use crate::factor::{FactorGraphSpec, TableTemplate};
use crate::ner::{self, SkipChainWeights};
use crate::store::{Domain, Value, VariableRef, BIO_LABELS};
use crate::{Error, Result};

/// A parsed model plus any non-fatal warnings encountered on the way.
pub struct LoadedModel {
    pub spec: FactorGraphSpec,
    pub warnings: Vec<String>,
}

#[derive(Debug)]
struct TemplateDecl {
    name: String,
    feature_fn: String,
    args: Vec<String>,
    line: usize,
}

#[derive(Debug)]
struct WeightLine {
    template: String,
    keys: Vec<String>,
    value: f64,
    line: usize,
}

fn label_position(s: &str) -> Option<usize> {
    BIO_LABELS.iter().position(|l| *l == s)
}

/// Parse a model file into a factor graph spec.
pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let text = std::fs::read_to_string(path)?;
    let err = |line: usize, message: String| Error::Model {
        path: path.display().to_string(),
        line,
        message,
    };

    let mut hidden: Vec<(String, String, Domain)> = Vec::new();
    let mut templates: Vec<TemplateDecl> = Vec::new();
    let mut weights: Vec<WeightLine> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next().unwrap() {
            "hidden" => {
                let field = parts
                    .next()
                    .ok_or_else(|| err(line_no, "hidden needs <relation>.<attribute>".into()))?;
                let (rel, attr) = field.split_once('.').ok_or_else(|| {
                    err(line_no, format!("bad hidden field {field:?}; want REL.ATTR"))
                })?;
                let values: Vec<Value> = parts.map(Value::str).collect();
                let domain =
                    Domain::new(values).map_err(|e| err(line_no, e.to_string()))?;
                hidden.push((rel.to_string(), attr.to_string(), domain));
            }
            "template" => {
                let name = parts
                    .next()
                    .ok_or_else(|| err(line_no, "template needs a name".into()))?;
                let feature_fn = parts
                    .next()
                    .ok_or_else(|| err(line_no, "template needs a feature function".into()))?;
                templates.push(TemplateDecl {
                    name: name.to_string(),
                    feature_fn: feature_fn.to_string(),
                    args: parts.map(str::to_string).collect(),
                    line: line_no,
                });
            }
            "weight" => {
                let template = parts
                    .next()
                    .ok_or_else(|| err(line_no, "weight needs a template name".into()))?;
                let rest: Vec<String> = parts.map(str::to_string).collect();
                if rest.is_empty() {
                    return Err(err(line_no, "weight needs a value".into()));
                }
                let value: f64 = rest
                    .last()
                    .unwrap()
                    .parse()
                    .map_err(|_| err(line_no, format!("bad weight value {:?}", rest.last().unwrap())))?;
                weights.push(WeightLine {
                    template: template.to_string(),
                    keys: rest[..rest.len() - 1].to_vec(),
                    value,
                    line: line_no,
                });
            }
            other => {
                return Err(err(line_no, format!("unknown directive {other:?}")));
            }
        }
    }

    let mut warnings = Vec::new();
    let mut spec = FactorGraphSpec::new();
    for (rel, attr, domain) in &hidden {
        spec.add_hidden(rel, attr, domain.clone());
    }

    // Weights grouped per template; lines naming no declared template warn.
    let mut by_template: BTreeMap<&str, Vec<&WeightLine>> = BTreeMap::new();
    for w in &weights {
        if templates.iter().any(|t| t.name == w.template) {
            by_template.entry(&w.template).or_default().push(w);
        } else {
            warnings.push(format!(
                "line {}: weight for undeclared template {:?} ignored (defaults to 0)",
                w.line, w.template
            ));
        }
    }

    // The sequence-labeling families share one weight bundle.
    let mut skip_chain = SkipChainWeights::default();
    let mut skip_chain_parts: Vec<&str> = Vec::new();

    for t in &templates {
        let lines = by_template.get(t.name.as_str()).cloned().unwrap_or_default();
        match t.feature_fn.as_str() {
            "token_emission" => {
                for w in lines {
                    let [s, label] = w.keys.as_slice() else {
                        return Err(err(w.line, "emission weight wants <string> <label> <value>".into()));
                    };
                    let li = label_position(label)
                        .ok_or_else(|| err(w.line, format!("unknown label {label:?}")))?;
                    skip_chain.emission.entry(s.clone()).or_insert([0.0; 9])[li] = w.value;
                }
                skip_chain_parts.push("emission");
            }
            "label_transition" => {
                for w in lines {
                    let [a, b] = w.keys.as_slice() else {
                        return Err(err(w.line, "transition weight wants <label> <label> <value>".into()));
                    };
                    let ai = label_position(a)
                        .ok_or_else(|| err(w.line, format!("unknown label {a:?}")))?;
                    let bi = label_position(b)
                        .ok_or_else(|| err(w.line, format!("unknown label {b:?}")))?;
                    skip_chain.transition[ai][bi] = w.value;
                }
                skip_chain_parts.push("transition");
            }
            "label_bias" => {
                for w in lines {
                    let [label] = w.keys.as_slice() else {
                        return Err(err(w.line, "bias weight wants <label> <value>".into()));
                    };
                    let li = label_position(label)
                        .ok_or_else(|| err(w.line, format!("unknown label {label:?}")))?;
                    skip_chain.bias[li] = w.value;
                }
                skip_chain_parts.push("bias");
            }
            "same_string_agreement" => {
                for w in lines {
                    if !w.keys.is_empty() {
                        return Err(err(w.line, "skip weight wants a single <value>".into()));
                    }
                    skip_chain.skip = w.value;
                }
                skip_chain_parts.push("skip");
            }
            "table" => {
                // args: REL:KEY:ATTR per slot; weight keys: one value per
                // slot followed by the log score.
                if t.args.is_empty() {
                    return Err(err(t.line, "table template needs field args REL:KEY:ATTR".into()));
                }
                let mut vars = Vec::new();
                for a in &t.args {
                    let mut it = a.split(':');
                    let (Some(rel), Some(key), Some(attr), None) =
                        (it.next(), it.next(), it.next(), it.next())
                    else {
                        return Err(err(t.line, format!("bad table field {a:?}; want REL:KEY:ATTR")));
                    };
                    let key: i64 = key
                        .parse()
                        .map_err(|_| err(t.line, format!("bad key in table field {a:?}")))?;
                    vars.push(VariableRef::new(rel, key, attr));
                }
                let domains: Vec<Domain> = vars
                    .iter()
                    .map(|v| {
                        hidden
                            .iter()
                            .find(|(r, a, _)| r == &*v.relation && a == &*v.attribute)
                            .map(|(_, _, d)| d.clone())
                            .ok_or_else(|| {
                                err(t.line, format!("table field {v} is not declared hidden"))
                            })
                    })
                    .collect::<Result<_>>()?;
                let size: usize = domains.iter().map(|d| d.len()).product();
                let mut table = vec![0.0; size];
                for w in &lines {
                    if w.keys.len() != vars.len() {
                        return Err(err(
                            w.line,
                            format!("table weight wants {} values then the score", vars.len()),
                        ));
                    }
                    let mut idx = 0usize;
                    for (k, d) in w.keys.iter().zip(&domains) {
                        let pos = d
                            .index_of(&Value::str(k))
                            .ok_or_else(|| err(w.line, format!("value {k:?} not in domain")))?;
                        idx = idx * d.len() + pos;
                    }
                    table[idx] = w.value;
                }
                spec.add_template(Box::new(
                    TableTemplate::new(t.name.clone(), vars, domains, table)
                        .map_err(|e| err(t.line, e.to_string()))?,
                ));
            }
            other => {
                return Err(err(
                    t.line,
                    format!(
                        "unknown feature function {other:?} (available: token_emission, \
                         label_transition, label_bias, same_string_agreement, table)"
                    ),
                ));
            }
        }
    }

    if !skip_chain_parts.is_empty() {
        // Splice the sequence templates in ahead of any table templates
        // declared alongside them.
        let mut donor = ner::build_skip_chain_spec(&skip_chain);
        let mut merged = FactorGraphSpec::new();
        for h in spec.hidden_decls() {
            merged.add_hidden(&h.relation, &h.attribute, h.domain.clone());
        }
        for t in donor.take_templates() {
            merged.add_template(t);
        }
        for t in spec.take_templates() {
            merged.add_template(t);
        }
        spec = merged;
    }

    if spec.hidden_decls().is_empty() {
        warnings.push("model declares no hidden fields".into());
    }
    Ok(LoadedModel { spec, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{ingest_tokens, IngestOptions, LABEL, TOKEN};

    fn write_temp(name: &str, text: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("worlddb-model-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(name);
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn loads_skip_chain_model() {
        let path = write_temp(
            "skip.model",
            "# test model\n\
             hidden TOKEN.LABEL B-PER I-PER B-ORG I-ORG B-LOC I-LOC B-MISC I-MISC O\n\
             template emission token_emission\n\
             template transition label_transition\n\
             template bias label_bias\n\
             template skip same_string_agreement\n\
             weight emission IBM B-ORG 2.0\n\
             weight transition B-PER I-PER 1.5\n\
             weight bias O 0.5\n\
             weight skip 0.9\n",
        );
        let loaded = load_model(&path).unwrap();
        assert!(loaded.warnings.is_empty());
        assert_eq!(loaded.spec.templates().len(), 4);
        assert_eq!(loaded.spec.hidden_decls().len(), 1);

        // Weight lookup through the emission template.
        let corpus = write_temp("skip-corpus.tsv", "1\t1\tIBM\tB-ORG\n");
        let w = ingest_tokens(&corpus, IngestOptions::default()).unwrap();
        let mut probe = w.clone_world();
        probe
            .update_field(
                &VariableRef::new(TOKEN, 1, LABEL),
                Value::str("B-ORG"),
            )
            .unwrap();
        let score = loaded.spec.world_log_score(&probe).unwrap();
        // emission 2.0 + bias 0.0 (B-ORG) = 2.0; no transitions or skips.
        assert!((score - 2.0).abs() < 1e-12);
    }

    #[test]
    fn missing_weights_default_to_zero_with_warning() {
        let path = write_temp(
            "warn.model",
            "hidden TOKEN.LABEL B-PER I-PER B-ORG I-ORG B-LOC I-LOC B-MISC I-MISC O\n\
             template emission token_emission\n\
             weight emissson IBM B-ORG 2.0\n",
        );
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.warnings.len(), 1);
        assert!(loaded.warnings[0].contains("emissson"));
    }

    #[test]
    fn table_template_via_model_file() {
        let path = write_temp(
            "table.model",
            "hidden V.VAL a b\n\
             template agree table V:0:VAL V:1:VAL\n\
             weight agree a a 0.6931471805599453\n\
             weight agree b b 0.6931471805599453\n",
        );
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.spec.templates().len(), 1);
        let w = crate::factor::fixtures::pair_world();
        let dist =
            crate::factor::exact::exact_distribution(&loaded.spec, &w, 100).unwrap();
        assert!((dist.probability_of(&[Value::str("a"), Value::str("a")]) - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn unknown_feature_fn_is_an_error() {
        let path = write_temp(
            "bad.model",
            "hidden TOKEN.LABEL B-PER O\ntemplate x no_such_fn\n",
        );
        match load_model(&path) {
            Err(Error::Model { line, .. }) => assert_eq!(line, 2),
            Err(other) => panic!("expected model error, got {other:?}"),
            Ok(_) => panic!("expected model error, got a loaded model"),
        }
    }
}
