use d2d_paoi::analytics::InterferenceModel;
use d2d_paoi::harness::{validate, validate_with, ExperimentConfig};

#[test]
fn default_checks_pass_and_report_errors() {
    let report = validate(&ExperimentConfig::default()).unwrap();
    for c in &report.checks {
        println!(
            "{} {} error={:e} tol={:e}",
            if c.passed { "ok  " } else { "FAIL" },
            c.name,
            c.error,
            c.tolerance
        );
    }
    assert!(report.passed);
    assert!(report.checks.iter().all(|c| c.error.is_finite()));
    assert_eq!(report.digests.len(), 7);
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert!(json["checks"][0]["error"].is_number());
}

#[test]
fn flipped_interference_sign_fails_subset_oracle() {
    let report = validate_with(&ExperimentConfig::default(), &|i, p, dm, ch| {
        let m = InterferenceModel::new(dm, ch);
        let mut phi = p[i] * m.noise(i);
        for j in (0..p.len()).filter(|&j| j != i) {
            phi *= 1.0 + p[j] * m.coupling(j, i);
        }
        phi
    })
    .unwrap();
    assert!(!report.passed);
    let oracle = report
        .checks
        .iter()
        .find(|c| c.name == "subset_oracle")
        .unwrap();
    assert!(!oracle.passed && oracle.error > 1e-3);
}
