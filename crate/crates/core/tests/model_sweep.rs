use std::time::Instant;

use seqcap_core::model::{sweep, Mutation};

#[test]
fn all_short_sequences_are_safe() {
    let start = Instant::now();
    let report = sweep(3, 3, 12, None).unwrap();
    eprintln!(
        "{} configurations, {} states, {} labels, {} edges in {:?}",
        report.configurations,
        report.states_explored,
        report.labels_evaluated,
        report.edges_checked,
        start.elapsed()
    );
    assert_eq!(report.violations.total(), 0, "{:?}", report.failures.first());
    assert!(report.failures.is_empty());
}

#[test]
fn dropping_the_state_check_is_found() {
    let report = sweep(3, 3, 12, Some(Mutation::NoStateCheck)).unwrap();
    assert!(!report.failures.is_empty());
    assert!(report.violations.replay > 0);
    assert!(report.failures.iter().all(|v| v.counterexample.is_some()));
}
