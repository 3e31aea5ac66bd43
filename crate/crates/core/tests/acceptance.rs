use std::io::Write;

use semsplat::acceptance::{run_acceptance, TITLES};
use semsplat::Error;

/// Runs every criterion and prints one PASS/FAIL line each. The lines go to
/// the process stdout directly so they show up without `--nocapture`.
#[test]
fn acceptance_criteria() {
    let report = run_acceptance(&[], |r| {
        let mut out = std::io::stdout().lock();
        writeln!(out, "{}", r.line()).unwrap();
        out.flush().unwrap();
    })
    .unwrap();
    let ids: Vec<u8> = report.results.iter().map(|r| r.id).collect();
    assert_eq!(ids, (1..=8).collect::<Vec<_>>());
    let failed: Vec<String> = report
        .results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.line())
        .collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}

#[test]
fn unknown_criteria_are_config_errors() {
    assert!(matches!(
        run_acceptance(&[0], |_| {}),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        run_acceptance(&[3, 9], |_| {}),
        Err(Error::Config(_))
    ));
    assert_eq!(TITLES.len(), 8);
}
