#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hierkit_core::annotation::{GroundTruthSet, HierAnnotation, Level, RasterGrid};
use hierkit_core::container::{self, ManifestImage};
use hierkit_core::decoder::PredictionFile;
use rand::Rng;

pub fn hierkit() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hierkit"));
    cmd.env_remove("HIERKIT_THREADS").env_remove("RUST_LOG");
    cmd
}

pub fn run(args: &[&str]) -> Output {
    hierkit().args(args).output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn write_gt(dir: &Path, gt: &GroundTruthSet) -> PathBuf {
    let p = dir.join("gt.json");
    std::fs::write(&p, gt.to_json()).unwrap();
    p
}

pub fn write_predictions(dir: &Path, preds: &PredictionFile) -> PathBuf {
    let p = dir.join("pred.json");
    std::fs::write(&p, preds.to_json()).unwrap();
    p
}

pub fn all_legible(mut a: HierAnnotation) -> HierAnnotation {
    for p in &mut a.paragraphs {
        p.legible = true;
        for l in &mut p.lines {
            l.legible = true;
            for (k, w) in l.words.iter_mut().enumerate() {
                w.legible = true;
                if w.text.is_empty() {
                    w.text = format!("w{k}");
                }
            }
        }
    }
    a
}

/// Quarter-resolution soft tensors with two spare queries per image, for
/// loss and gradient checks against `gt` at line level.
pub fn soft_manifest<R: Rng>(rng: &mut R, dir: &Path, gt: &GroundTruthSet) -> PathBuf {
    let images: Vec<ManifestImage> = gt
        .annotations
        .iter()
        .map(|a| {
            let grid = RasterGrid::downsampled(a, 4);
            let k = hierkit_core::matching::targets_from_annotation(a, Level::Line, RasterGrid::for_output(a, grid.width, grid.height))
                .unwrap()
                .len();
            ManifestImage {
                image_id: a.image_id.clone(),
                tensors: hierkit_testkit::blob_tensors(rng, k + 2, grid.width, grid.height, 0.05),
                image_size: Some((a.image_width, a.image_height)),
            }
        })
        .collect();
    container::write_manifest(dir, &images).unwrap()
}
