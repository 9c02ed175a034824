//! Byte-for-byte regression pin of a short seeded training run. Any change
//! to the random-number stream, initialization order, task rasterization,
//! update rule, or CSV rendering shows up here as a diff.
//!
//! To regenerate after an intentional change:
//! `DDSM_UPDATE_GOLDEN=1 cargo test -p ddsm-cli --test golden`

use std::process::Command;

const GOLDEN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/loss_curve.csv");

#[test]
fn short_training_run_matches_pinned_loss_curve() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let status = Command::new(env!("CARGO_BIN_EXE_ddsm"))
        .args([
            "train", "--seed", "7", "--steps", "40", "--h", "16", "--w", "16",
            "--samples", "4", "--out", out_dir.to_str().unwrap(),
        ])
        .status()
        .expect("binary launches");
    assert!(status.success());
    let produced = std::fs::read_to_string(out_dir.join("loss.csv")).unwrap();

    if std::env::var_os("DDSM_UPDATE_GOLDEN").is_some() {
        std::fs::write(GOLDEN, &produced).unwrap();
        return;
    }
    let pinned = std::fs::read_to_string(GOLDEN).unwrap();
    assert!(
        produced == pinned,
        "loss curve drifted from the pinned run; if the change is intentional, \
         regenerate with DDSM_UPDATE_GOLDEN=1"
    );
}
