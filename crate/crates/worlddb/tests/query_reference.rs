//! The engine's evaluator against an independent nested-loop reference,
//! plus the named query examples.

mod common;

use common::*;
use rand::{Rng, SeedableRng};
use worlddb::query::{self, execute, Predicate, Query};
use worlddb::store::{Value, LABEL, TOKEN};

#[test]
fn selection_projection_counts_duplicates() {
    // Six tokens, two B-PER sharing a string: the projection reports that
    // string with count 2.
    let mut w = token_world(&[
        (1, 1, "Ann"),
        (2, 1, "works"),
        (3, 1, "Ann"),
        (4, 2, "Bo"),
        (5, 2, "Ann"),
        (6, 2, "rests"),
    ]);
    for key in [1, 3] {
        w.update_field(&label_ref(key), Value::str("B-PER")).unwrap();
    }
    let q = query::parse("SELECT STRING FROM TOKEN WHERE LABEL='B-PER'").unwrap();
    let a = execute(&q, &w).unwrap();
    assert_eq!(a.count(&[Value::str("Ann")]), 2);
    assert_eq!(a.len(), 1);
}

#[test]
fn count_on_initial_world_is_zero() {
    let w = token_world(&[(1, 1, "a"), (2, 1, "b")]);
    let q = query::parse("SELECT COUNT(*) FROM TOKEN WHERE LABEL='B-PER'").unwrap();
    let a = execute(&q, &w).unwrap();
    assert_eq!(a.count(&[Value::Int(0)]), 1);
    assert_eq!(a.total(), 1);
}

#[test]
fn self_join_matches_reference_on_hand_fixture() {
    // Eight tokens over two documents with an ambiguous "Boston".
    let mut w = token_world(&[
        (1, 1, "Boston"),
        (2, 1, "Ann"),
        (3, 1, "visits"),
        (4, 1, "Boston"),
        (5, 2, "Boston"),
        (6, 2, "Bo"),
        (7, 2, "arrives"),
        (8, 2, "Ann"),
    ]);
    for (key, label) in [
        (1, "B-ORG"),
        (2, "B-PER"),
        (4, "B-LOC"),
        (5, "B-ORG"),
        (6, "B-PER"),
        (8, "B-PER"),
    ] {
        w.update_field(&label_ref(key), Value::str(label)).unwrap();
    }
    let q = query::parse(
        "SELECT T2.STRING FROM TOKEN T1, TOKEN T2 \
         WHERE T1.STRING='Boston' AND T1.LABEL='B-ORG' \
         AND T1.DOC_ID=T2.DOC_ID AND T2.LABEL='B-PER'",
    )
    .unwrap();
    let engine = answer_to_map(&execute(&q, &w).unwrap());
    let reference = reference_execute(&q, &w);
    assert_eq!(engine, reference);
    // Document 1 has one qualifying T1 and one B-PER; document 2 has one
    // qualifying T1 and two B-PER tokens.
    assert_eq!(reference[&vec![Value::str("Ann")]], 2);
    assert_eq!(reference[&vec![Value::str("Bo")]], 1);
}

#[test]
fn validation_reports_unknown_and_ambiguous_columns() {
    let w = token_world(&[(1, 1, "a")]);
    let q = Query::scan(TOKEN).project(&["NO_SUCH"]);
    match execute(&q, &w) {
        Err(worlddb::Error::Validation(errors)) => {
            assert!(errors[0].message.contains("NO_SUCH"));
        }
        other => panic!("expected validation failure, got {other:?}"),
    }
    // Ambiguity across a self-product without aliases is refused up front.
    let q = Query::scan(TOKEN).product(Query::scan(TOKEN));
    assert!(matches!(
        execute(&q, &w),
        Err(worlddb::Error::Validation(_))
    ));
    // A valid correlated count query planifies.
    let q = Query::CountEq {
        relation: TOKEN.into(),
        group_attr: query::ColRef::new("DOC_ID"),
        left: Box::new(Predicate::eq_str(LABEL, "B-PER")),
        right: Box::new(Predicate::eq_str(LABEL, "B-ORG")),
        distinct: false,
    };
    assert!(query::validate(&q, &w).is_ok());
}

#[test]
fn count_eq_multiplicity_and_distinct_modes() {
    let mut w = token_world(&[(1, 1, "a"), (2, 1, "b"), (3, 1, "c"), (4, 2, "d")]);
    // Document 1: one B-PER and one B-ORG (balanced); document 2: all "O"
    // (trivially balanced 0 = 0).
    w.update_field(&label_ref(1), Value::str("B-PER")).unwrap();
    w.update_field(&label_ref(2), Value::str("B-ORG")).unwrap();
    let balanced = |distinct: bool| Query::CountEq {
        relation: TOKEN.into(),
        group_attr: query::ColRef::new("DOC_ID"),
        left: Box::new(Predicate::eq_str(LABEL, "B-PER")),
        right: Box::new(Predicate::eq_str(LABEL, "B-ORG")),
        distinct,
    };
    let bag = execute(&balanced(false), &w).unwrap();
    // One row per token of each qualifying document.
    assert_eq!(bag.count(&[Value::Int(1)]), 3);
    assert_eq!(bag.count(&[Value::Int(2)]), 1);
    let set = execute(&balanced(true), &w).unwrap();
    assert_eq!(set.count(&[Value::Int(1)]), 1);
    assert_eq!(set.count(&[Value::Int(2)]), 1);

    // Both modes agree with the reference evaluator.
    assert_eq!(answer_to_map(&bag), reference_execute(&balanced(false), &w));
    assert_eq!(answer_to_map(&set), reference_execute(&balanced(true), &w));
}

#[test]
fn fuzz_execute_against_reference() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xC0FFEE);
    for case in 0..600 {
        let n = rng.gen_range(1..=100);
        let doc_size = rng.gen_range(3..12);
        let w = random_token_world(&mut rng, n, doc_size);
        let q = random_query(&mut rng);
        let engine = answer_to_map(&execute(&q, &w).unwrap());
        let reference = reference_execute(&q, &w);
        assert_eq!(engine, reference, "case {case} query {q:?}");
    }
}
