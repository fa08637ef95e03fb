mod common;

use common::*;
use hierkit_core::annotation::{Level, RasterGrid};
use hierkit_core::container::{self, ManifestImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn golden_dir() -> std::path::PathBuf {
    fixtures().join("golden")
}

/// Rewrites the golden tensor inputs. Run with `--ignored` after an
/// intentional format change, then re-bless the outputs.
#[test]
#[ignore]
fn regenerate_golden_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let a = hierkit_testkit::random_annotation(&mut rng, "page");
    let (oracle, _) = hierkit_testkit::oracle_tensors(&mut rng, &a, Level::Line, RasterGrid::downsampled(&a, 4), 2);
    let images = vec![
        ManifestImage { image_id: "blobs_b".into(), tensors: hierkit_testkit::blob_tensors(&mut rng, 7, 20, 14, 0.05), image_size: None },
        ManifestImage { image_id: "blobs_a".into(), tensors: hierkit_testkit::blob_tensors(&mut rng, 5, 16, 12, 0.05), image_size: Some((64, 48)) },
        ManifestImage { image_id: "page".into(), tensors: oracle, image_size: Some((a.image_width, a.image_height)) },
    ];
    container::write_manifest(&golden_dir(), &images).unwrap();
}

fn check_golden(name: &str, extra: &[&str]) {
    let manifest = golden_dir().join("manifest.json");
    let expected_path = golden_dir().join(name);
    let mut args = vec!["decode", path_str(&manifest)];
    args.extend_from_slice(extra);
    let out = run(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    if std::env::var_os("HIERKIT_BLESS").is_some() {
        std::fs::write(&expected_path, &out.stdout).unwrap();
    }
    let expected = std::fs::read(&expected_path).unwrap();
    assert!(out.stdout == expected, "decode output drifted from {name}");
}

#[test]
fn decode_matches_golden_predictions() {
    check_golden("predictions.json", &[]);
}

#[test]
fn upsampled_decode_matches_golden_predictions() {
    check_golden("predictions_upsampled.json", &["--upsample", "--min-pixels", "4"]);
}

#[test]
fn golden_output_is_stable_across_thread_counts() {
    let manifest = golden_dir().join("manifest.json");
    let expected = std::fs::read(golden_dir().join("predictions.json")).unwrap();
    for threads in ["1", "2", "8"] {
        let out = run(&["--threads", threads, "decode", path_str(&manifest)]);
        assert!(out.stdout == expected, "--threads {threads}");
        let out = hierkit().env("HIERKIT_THREADS", threads).args(["decode", path_str(&manifest)]).output().unwrap();
        assert!(out.stdout == expected, "HIERKIT_THREADS={threads}");
    }
}
