//! Acceptance gate: every criterion at its pinned tolerance, one line each.

mod common;

use common::criteria::{self, Outcome};

fn report(results: &[(usize, &str, Outcome)]) -> bool {
    let mut all = true;
    for (id, name, outcome) in results {
        match outcome {
            Ok(detail) => println!("criterion {id} PASS {name}: {detail}"),
            Err(detail) => {
                all = false;
                println!("criterion {id} FAIL {name}: {detail}");
            }
        }
    }
    all
}

#[test]
fn acceptance_criteria() {
    let work = tempfile::tempdir().unwrap();
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "loss oracles", criteria::loss_oracles()),
        (2, "gradient suite", criteria::gradient_suite()),
        (3, "negative counts", criteria::counting()),
        (4, "schedule", criteria::schedule()),
    ];
    match criteria::desk_gains(&work.path().join("desk")) {
        Ok((full, ablated)) => {
            results.push((5, "desk-scale gain", criteria::desk_scale(&full)));
            results.push((6, "ablation direction", criteria::ablation_direction(&full, &ablated)));
        }
        Err(e) => {
            results.push((5, "desk-scale gain", Err(e.clone())));
            results.push((6, "ablation direction", Err(e)));
        }
    }
    results.push((7, "determinism and resume", criteria::determinism_and_resume(&work.path().join("resume"))));
    results.push((8, "metric sanity", criteria::metric_sanity()));
    results.push((9, "oracle equivalence", criteria::oracle_equivalence()));
    assert!(report(&results), "acceptance criteria failed; see the lines above");
}
