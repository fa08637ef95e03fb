mod common;

use common::*;
use hierkit_core::annotation::{GroundTruthSet, Level, RasterGrid};
use hierkit_core::container::{self, ManifestImage};
use hierkit_core::decoder::{Entity, EntitySet, ImagePredictions, PredictionFile};
use hierkit_core::geometry::BitMask;
use hierkit_core::metrics::{self, EvalOptions};
use image::{Rgba, RgbaImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tempfile::TempDir;

const VALID: &str = r#"{"annotations":[{"image_id":"a","image_width":20,"image_height":10,"paragraphs":[
  {"vertices":[[0,0],[20,0],[20,10],[0,10]],"legible":true,"lines":[
    {"vertices":[[0,0],[20,0],[20,5],[0,5]],"text":"ab cd","legible":true,"vertical":false,"handwritten":false,"words":[
      {"vertices":[[0,0],[8,0],[8,5],[0,5]],"text":"ab","legible":true,"vertical":false},
      {"vertices":[[10,0],[18,0],[18,5],[10,5]],"text":"cd","legible":true,"vertical":false}]}]}]}]}"#;

fn json(out: &std::process::Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", stdout(out)))
}

#[test]
fn validate_exit_codes() {
    let dir = TempDir::new().unwrap();
    let good = dir.path().join("good.json");
    std::fs::write(&good, VALID).unwrap();
    let out = run(&["validate", path_str(&good)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout(&out).trim(), "0 errors");

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, VALID.replace(r#"[[0,0],[8,0],[8,5],[0,5]]"#, "[]")).unwrap();
    let out = run(&["validate", path_str(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("annotations[0].paragraphs[0].lines[0].words[0].vertices"), "{}", stdout(&out));

    let out = run(&["validate", path_str(&dir.path().join("missing.json"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["evaluate"]).status.code(), Some(2));
    assert_eq!(run(&["bogus"]).status.code(), Some(2));
}

#[test]
fn stats_writes_report_and_summary() {
    let dir = TempDir::new().unwrap();
    let gt = dir.path().join("gt.json");
    std::fs::write(&gt, VALID).unwrap();
    let report = dir.path().join("stats.json");
    let out = run(&["stats", path_str(&gt), "-o", path_str(&report)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("words/image=2.0"), "{}", stdout(&out));
    let v: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!((v["images"].as_u64(), v["words"].as_u64(), v["lines"].as_u64()), (Some(1), Some(2), Some(1)));
}

#[test]
fn decode_threshold_saturation_and_corrupt_input() {
    let manifest = fixtures().join("golden/manifest.json");
    let out = run(&["decode", path_str(&manifest), "--tc", "1.0"]);
    assert!(out.status.success());
    let v = json(&out);
    // only queries with textness exactly 1 survive
    for p in v["predictions"].as_array().unwrap() {
        let entities = p["entities"].as_array().unwrap();
        assert_eq!(entities.is_empty(), p["image_id"] != "page", "{}", p["image_id"]);
        assert!(entities.iter().all(|e| e["score"] == 1.0));
    }

    let dir = TempDir::new().unwrap();
    for entry in std::fs::read_dir(fixtures().join("golden")).unwrap() {
        let p = entry.unwrap().path();
        std::fs::copy(&p, dir.path().join(p.file_name().unwrap())).unwrap();
    }
    let masks = dir.path().join("0001_masks.udt");
    let mut bytes = std::fs::read(&masks).unwrap();
    bytes[0] = b'Z';
    std::fs::write(&masks, bytes).unwrap();
    let out = run(&["decode", path_str(&dir.path().join("manifest.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("0001_masks.udt") && stderr(&out).contains("magic"), "{}", stderr(&out));

    let out = run(&["decode", path_str(&manifest), "--tm", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_ground_truth_as_predictions() {
    let dir = TempDir::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let gt = hierkit_testkit::random_dataset(&mut rng, 4);
    let gt_path = write_gt(dir.path(), &gt);
    for level in Level::ALL {
        let preds = metrics::predictions_from_ground_truth(&gt, level, &EvalOptions::default()).unwrap();
        let pred_path = write_predictions(dir.path(), &preds);
        let out = run(&["evaluate", "--gt", path_str(&gt_path), "--predictions", path_str(&pred_path), "--level", level.as_str()]);
        assert!(out.status.success(), "{}", stderr(&out));
        let v = json(&out);
        assert_eq!(v["pq"], 1.0, "{level}");
        assert_eq!(v["level"], level.as_str());
    }
}

#[test]
fn evaluate_one_tp_one_fp() {
    let dir = TempDir::new().unwrap();
    let gt_path = dir.path().join("gt.json");
    std::fs::write(&gt_path, VALID).unwrap();
    // word "ab" covers x in 0..8, y in 0..5 (40 px); the prediction covers 32 of them
    let tp = BitMask::from_fn(20, 10, |x, y| x < 8 && y < 4);
    let fp = BitMask::from_fn(20, 10, |_, y| y >= 8);
    let miss_free = BitMask::from_fn(20, 10, |x, y| (10..18).contains(&x) && y < 5);
    let entity = |id, mask| Entity { id, mask, score: 1.0, cluster: Some(0) };
    let preds = PredictionFile {
        predictions: vec![ImagePredictions {
            image_id: "a".into(),
            entities: EntitySet { entities: vec![entity(0, tp), entity(1, fp), entity(2, miss_free)] },
        }],
    };
    let pred_path = write_predictions(dir.path(), &preds);
    let out = run(&["evaluate", "--gt", path_str(&gt_path), "--predictions", path_str(&pred_path), "--level", "word"]);
    let v = json(&out);
    assert_eq!((v["tp"].as_u64(), v["fp"].as_u64(), v["fn"].as_u64()), (Some(2), Some(1), Some(0)));
    let pq = v["pq"].as_f64().unwrap();
    assert!((pq - 1.8 / 2.5).abs() < 1e-12, "{pq}");
    assert!((pq - v["f1"].as_f64().unwrap() * v["tightness"].as_f64().unwrap()).abs() < 1e-9);

    // drop the exact match: 1 TP at IoU 0.8, 1 FP, 1 FN
    let mut preds = preds;
    preds.predictions[0].entities.entities.truncate(2);
    std::fs::write(&pred_path, preds.to_json()).unwrap();
    let v = json(&run(&["evaluate", "--gt", path_str(&gt_path), "--predictions", path_str(&pred_path), "--level", "word"]));
    assert!((v["pq"].as_f64().unwrap() - 0.8 / 2.0).abs() < 1e-12);
}

#[test]
fn evaluate_lists_unknown_images() {
    let dir = TempDir::new().unwrap();
    let gt_path = dir.path().join("gt.json");
    std::fs::write(&gt_path, VALID).unwrap();
    let preds = PredictionFile {
        predictions: vec![ImagePredictions { image_id: "ghost".into(), entities: EntitySet::default() }],
    };
    let pred_path = write_predictions(dir.path(), &preds);
    let out = run(&["evaluate", "--gt", path_str(&gt_path), "--predictions", path_str(&pred_path)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("ghost"));
}

#[test]
fn loss_on_perfect_predictions() {
    let dir = TempDir::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = all_legible(hierkit_testkit::random_annotation(&mut rng, "p"));
    let grid = RasterGrid::downsampled(&a, 4);
    let (tensors, _) = hierkit_testkit::oracle_tensors(&mut rng, &a, Level::Line, grid, 2);
    let n = tensors.n();
    let k = n - 3;
    let manifest = container::write_manifest(dir.path(), &[ManifestImage { image_id: "p".into(), tensors, image_size: None }]).unwrap();
    let gt_path = write_gt(dir.path(), &GroundTruthSet { annotations: vec![a] });
    let out = run(&["loss", "--manifest", path_str(&manifest), "--gt", path_str(&gt_path)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v = json(&out);
    let img = &v["images"][0];
    // every positive slot earns -alpha * (1 - eps) * 1; negatives cost -(1 - alpha) ln(1 - eps)
    let eps = 1e-7f64;
    let expected = (k as f64 * 0.5 * (-(1.0 - eps) - (1.0 - eps).ln()) + (n - k) as f64 * 0.5 * -(1.0 - eps).ln()) / n as f64;
    assert!((img["l_det"].as_f64().unwrap() - expected).abs() < 1e-12, "{img}");
    assert!(img["l_lay"].as_f64().unwrap() < 1e-6);
    assert_eq!(img["total"], v["mean"]["total"]);
}

#[test]
fn loss_modes_differ_and_small_n_fails() {
    let dir = TempDir::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let gt = GroundTruthSet { annotations: vec![all_legible(hierkit_testkit::random_annotation(&mut rng, "q"))] };
    let gt_path = write_gt(dir.path(), &gt);
    let manifest = soft_manifest(&mut rng, dir.path(), &gt);
    let lay = |mode: &str| {
        let out = run(&["loss", "--manifest", path_str(&manifest), "--gt", path_str(&gt_path), "--balancing", mode]);
        assert!(out.status.success(), "{}", stderr(&out));
        json(&out)["images"][0]["l_lay"].as_f64().unwrap()
    };
    let (vanilla, alpha) = (lay("vanilla"), lay("alpha"));
    assert!(vanilla.is_finite() && alpha.is_finite() && vanilla != alpha);

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let a = &gt.annotations[0];
    let grid = RasterGrid::downsampled(a, 4);
    let small = ManifestImage { image_id: "q".into(), tensors: hierkit_testkit::blob_tensors(&mut rng, 1, grid.width, grid.height, 0.05), image_size: None };
    let small_dir = dir.path().join("small");
    let manifest = container::write_manifest(&small_dir, &[small]).unwrap();
    let out = run(&["loss", "--manifest", path_str(&manifest), "--gt", path_str(&gt_path)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("exceed"), "{}", stderr(&out));
}

#[test]
fn grad_check_passes_on_random_fixture() {
    let dir = TempDir::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let gt = hierkit_testkit::random_dataset(&mut rng, 2);
    let gt_path = write_gt(dir.path(), &gt);
    let manifest = soft_manifest(&mut rng, dir.path(), &gt);
    for mode in ["vanilla", "alpha", "focal"] {
        let report = dir.path().join(format!("{mode}.json"));
        let out = run(&["grad-check", "--manifest", path_str(&manifest), "--gt", path_str(&gt_path), "--balancing", mode, "-o", path_str(&report)]);
        assert!(out.status.success(), "{}{}", stdout(&out), stderr(&out));
        assert!(stdout(&out).trim_end().ends_with("PASS (max rel err < 1e-3)"), "{}", stdout(&out));
        let v: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
        assert_eq!(v.as_array().unwrap().len(), 2);
    }
}

fn write_png(path: &std::path::Path, w: u32, h: u32) {
    RgbaImage::from_fn(w, h, |x, y| Rgba([(x * 20) as u8, (y * 20) as u8, 90, 255])).save(path).unwrap();
}

fn render_with(dir: &std::path::Path, entities: Vec<Entity>) -> (Vec<u8>, RgbaImage) {
    let img = dir.join("scene.png");
    write_png(&img, 8, 6);
    let preds = PredictionFile { predictions: vec![ImagePredictions { image_id: "scene".into(), entities: EntitySet { entities } }] };
    let pred_path = write_predictions(dir, &preds);
    let out_path = dir.join("out.png");
    let out = run(&["render", "--image", path_str(&img), "--predictions", path_str(&pred_path), "-o", path_str(&out_path)]);
    assert!(out.status.success(), "{}", stderr(&out));
    (std::fs::read(&out_path).unwrap(), image::open(&out_path).unwrap().to_rgba8())
}

fn block(x0: usize) -> BitMask {
    BitMask::from_fn(8, 6, |x, y| x >= x0 && x < x0 + 2 && y < 2)
}

#[test]
fn render_colors_by_cluster() {
    let dir = TempDir::new().unwrap();
    let e = |id, x0, cluster| Entity { id, mask: block(x0), score: 1.0, cluster: Some(cluster) };
    // equal-valued source pixels under both masks make the blend comparable
    let same_base = |img: &RgbaImage, x: u32| *img.get_pixel(x, 0);
    let original = RgbaImage::from_fn(8, 6, |x, y| Rgba([(x * 20) as u8, (y * 20) as u8, 90, 255]));

    let (_, one) = render_with(dir.path(), vec![e(0, 0, 0), e(1, 4, 0)]);
    let (_, two) = render_with(dir.path(), vec![e(0, 0, 0), e(1, 4, 1)]);
    // recover the overlay color: c = 2 * out - src at opacity 0.5
    let color = |img: &RgbaImage, x: u32| {
        let (o, s) = (same_base(img, x).0, original.get_pixel(x, 0).0);
        [0, 1, 2].map(|k| 2 * i32::from(o[k]) - i32::from(s[k]))
    };
    let close = |a: [i32; 3], b: [i32; 3]| a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1);
    assert!(close(color(&one, 0), color(&one, 4)));
    assert!(!close(color(&two, 0), color(&two, 4)));
    assert_eq!(one.get_pixel(7, 5), original.get_pixel(7, 5));
}

#[test]
fn render_empty_set_copies_image() {
    let dir = TempDir::new().unwrap();
    let (bytes, _) = render_with(dir.path(), Vec::new());
    assert_eq!(bytes, std::fs::read(dir.path().join("scene.png")).unwrap());
}

#[test]
fn render_rejects_unknown_image() {
    let dir = TempDir::new().unwrap();
    let img = dir.path().join("other.png");
    write_png(&img, 4, 4);
    let pred_path = write_predictions(dir.path(), &PredictionFile::default());
    let out = run(&["render", "--image", path_str(&img), "--predictions", path_str(&pred_path), "-o", path_str(&dir.path().join("o.png"))]);
    assert_eq!(out.status.code(), Some(1));
}
