use sketchcomm_acceptance::{self as acc, Line, Outcome};

fn strict(outcome: Outcome) {
    println!("{}", Line("criterion", &outcome));
    assert!(outcome.passed(), "{outcome:?}");
}

#[test]
#[ignore = "requires CLIP ViT-B/32 weights and the STL-10 test split"]
fn probe_zero_shot_strict() {
    strict(acc::probe_zero_shot());
}

#[test]
#[ignore = "requires CLIP ViT-B/32 weights, STL-10 and SKETCHCOMM_ACCEPTANCE_FULL=1 (hours on CPU)"]
fn desk_training_strict() {
    let dir = tempfile::tempdir().unwrap();
    strict(acc::desk_training(dir.path()));
}

#[test]
#[ignore = "requires the STL-10 binaries (sketchcomm fetch-data)"]
fn data_integrity_strict() {
    strict(acc::data_integrity());
}
