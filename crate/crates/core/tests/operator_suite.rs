use mocca_core::verify::{operator_suite, SuiteConfig};

#[test]
fn every_operator_matches_finite_differences_over_100_trials() {
    let report = operator_suite(&SuiteConfig::default()).unwrap();
    for c in &report {
        assert!(
            c.passed(),
            "{}: {} of {} checks failed, worst {:.3e}, first {:?}",
            c.operator,
            c.failures,
            c.checks,
            c.worst_deviation,
            c.first_failure
        );
    }
}
