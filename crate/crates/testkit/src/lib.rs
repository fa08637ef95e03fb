//! Synthetic annotations and model outputs for tests.

use rand::seq::SliceRandom;
use rand::Rng;

use hierkit_core::annotation::{derive_entities, GroundTruthSet, HierAnnotation, Level, Line, Paragraph, RasterGrid, Word};
use hierkit_core::decoder::{self, DetectionTensors, LayoutOutput};
use hierkit_core::geometry::{BitMask, Point, Polygon, SoftMask};
use hierkit_core::matching::{self, Assignment, PredictionSlot, TargetSlot};

fn bounding_rect(polys: &[&Polygon]) -> Polygon {
    let pts = polys.iter().flat_map(|p| p.vertices());
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in pts {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    Polygon::rect(x0, y0, x1, y1).unwrap()
}

/// Quadrilateral inside the cell `[x0, x1] x [y0, y1]` with corners pulled
/// inward by up to 0.4 px.
fn jittered_quad<R: Rng>(rng: &mut R, x0: f64, y0: f64, x1: f64, y1: f64) -> Polygon {
    let mut j = || rng.gen_range(0.0..0.4);
    Polygon::new(vec![
        Point::new(x0 + j(), y0 + j()),
        Point::new(x1 - j(), y0 + j()),
        Point::new(x1 - j(), y1 - j()),
        Point::new(x0 + j(), y1 - j()),
    ])
    .unwrap()
}

/// Random page: paragraphs in horizontal bands, lines as strips within a
/// band, words as quads within a line. Entities never overlap at any level.
/// Roughly one word in ten is illegible.
pub fn random_annotation<R: Rng>(rng: &mut R, image_id: &str) -> HierAnnotation {
    let width = rng.gen_range(48..=160usize);
    let height = rng.gen_range(48..=160usize);
    let n_paras = rng.gen_range(1..=3usize);
    let band = height as f64 / n_paras as f64;
    let mut paragraphs = Vec::with_capacity(n_paras);
    for p in 0..n_paras {
        let n_lines = rng.gen_range(1..=3usize);
        let strip = (band - 2.0) / n_lines as f64;
        let mut lines = Vec::with_capacity(n_lines);
        for l in 0..n_lines {
            let y0 = p as f64 * band + 1.0 + l as f64 * strip;
            let y1 = y0 + strip - 2.0;
            let n_words = rng.gen_range(1..=4usize);
            let cell = (width as f64 - 4.0) / n_words as f64;
            let words: Vec<Word> = (0..n_words)
                .map(|k| {
                    let x0 = 2.0 + k as f64 * cell;
                    let legible = rng.gen_bool(0.9);
                    Word {
                        polygon: jittered_quad(rng, x0, y0, x0 + cell - 2.0, y1),
                        text: if legible { format!("w{p}{l}{k}") } else { String::new() },
                        legible,
                        vertical: false,
                    }
                })
                .collect();
            let polygon = bounding_rect(&words.iter().map(|w| &w.polygon).collect::<Vec<_>>());
            let text = words.iter().map(|w| w.text.as_str()).collect::<Vec<_>>().join(" ");
            lines.push(Line {
                polygon,
                text,
                legible: words.iter().any(|w| w.legible),
                words,
                vertical: false,
                handwritten: false,
            });
        }
        paragraphs.push(Paragraph {
            polygon: bounding_rect(&lines.iter().map(|l| &l.polygon).collect::<Vec<_>>()),
            legible: lines.iter().any(|l| l.legible),
            lines,
        });
    }
    HierAnnotation {
        image_id: image_id.to_string(),
        image_width: width,
        image_height: height,
        paragraphs,
    }
}

/// `count` random pages with ids `img_000`, `img_001`, ...
pub fn random_dataset<R: Rng>(rng: &mut R, count: usize) -> GroundTruthSet {
    GroundTruthSet {
        annotations: (0..count).map(|i| random_annotation(rng, &format!("img_{i:03}"))).collect(),
    }
}

/// Ideal model output for an annotation: entities at `level` on randomly
/// chosen queries with one-hot masks and unit textness, paragraph-indicator
/// affinity, one background query owning the remaining pixels and `spare`
/// unused queries. Returns the tensors and the query assigned to each
/// non-empty entity, in entity order.
pub fn oracle_tensors<R: Rng>(
    rng: &mut R,
    a: &HierAnnotation,
    level: Level,
    grid: RasterGrid,
    spare: usize,
) -> (DetectionTensors, Vec<usize>) {
    let entities: Vec<_> = derive_entities(a, level, grid)
        .unwrap()
        .into_iter()
        .filter(|e| !e.mask.is_empty())
        .collect();
    let n = entities.len() + 1 + spare;
    let mut queries: Vec<usize> = (0..n).collect();
    queries.shuffle(rng);
    let background = queries[entities.len()];
    let plane = grid.width * grid.height;
    let mut masks = vec![0.0; n * plane];
    let mut textness = vec![0.0; n];
    let mut cluster_of = vec![usize::MAX; n];
    for p in 0..plane {
        masks[background * plane + p] = 1.0;
    }
    for (e, &q) in entities.iter().zip(&queries) {
        textness[q] = 1.0;
        cluster_of[q] = e.cluster;
        for p in e.mask.iter_ones() {
            masks[background * plane + p] = 0.0;
            masks[q * plane + p] = 1.0;
        }
    }
    let mut affinity = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let linked = i == j || (cluster_of[i] != usize::MAX && cluster_of[i] == cluster_of[j]);
            affinity[i * n + j] = if linked { 1.0 } else { 0.0 };
        }
    }
    let t = DetectionTensors::new(n, grid.width, grid.height, masks, textness, LayoutOutput::Affinity(affinity)).unwrap();
    (t, queries[..entities.len()].to_vec())
}

/// Soft model output with blob-shaped masks: each query owns a softmax basin
/// around a random center. Textness lies in `[margin, 1 - margin]` and the
/// layout branch is given as unit-norm embeddings.
pub fn blob_tensors<R: Rng>(rng: &mut R, n: usize, width: usize, height: usize, margin: f64) -> DetectionTensors {
    let sharpness = 0.08;
    let mut f = Vec::with_capacity(n * 4);
    for _ in 0..n {
        let cx = rng.gen_range(0.0..width as f64);
        let cy = rng.gen_range(0.0..height as f64);
        f.extend_from_slice(&[2.0 * sharpness * cx, 2.0 * sharpness * cy, -sharpness, -sharpness * (cx * cx + cy * cy)]);
    }
    let plane = width * height;
    let mut g = vec![0.0; 4 * plane];
    for p in 0..plane {
        let (x, y) = ((p % width) as f64 + 0.5, (p / width) as f64 + 0.5);
        g[p] = x;
        g[plane + p] = y;
        g[2 * plane + p] = x * x + y * y;
        g[3 * plane + p] = 1.0;
    }
    let masks = decoder::mask_head(&f, n, 4, &g, width, height).unwrap();
    let textness = (0..n).map(|_| rng.gen_range(margin..1.0 - margin)).collect();
    let channels = 4;
    let mut features: Vec<f64> = (0..n * channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
    decoder::normalize_rows(&mut features, channels);
    let layout = LayoutOutput::Embeddings {
        features,
        channels,
        tau: 0.5,
    };
    DetectionTensors::new(n, width, height, masks, textness, layout).unwrap()
}

/// Random simple or self-intersecting polygon with 3 to 8 vertices inside
/// (and slightly beyond) a `width x height` grid, optionally on half-pixel
/// coordinates to exercise boundary cases.
pub fn random_polygon<R: Rng>(rng: &mut R, width: usize, height: usize) -> Polygon {
    let k = rng.gen_range(3..=8);
    let snap = rng.gen_bool(0.3);
    let coord = |rng: &mut R, extent: usize| {
        let v: f64 = rng.gen_range(0.0..=extent as f64 + 1.0);
        if snap {
            (v * 2.0).round() / 2.0
        } else {
            v
        }
    };
    let pts = (0..k)
        .map(|_| {
            let x = coord(rng, width);
            let y = coord(rng, height);
            Point::new(x, y)
        })
        .collect();
    Polygon::new(pts).unwrap()
}

/// Matched training slots with a predicted affinity matrix.
#[derive(Debug, Clone)]
pub struct LossInstance {
    pub preds: Vec<PredictionSlot>,
    pub targets: Vec<TargetSlot>,
    pub sigma: Assignment,
    pub affinity: Vec<f64>,
}

/// `n` soft predictions on a `width x height` grid against up to `n` random
/// text targets in up to three clusters, matched optimally. Textness and
/// affinity lie in `[margin, 1 - margin]`.
pub fn loss_instance<R: Rng>(rng: &mut R, n: usize, width: usize, height: usize, margin: f64) -> LossInstance {
    let preds: Vec<PredictionSlot> = (0..n)
        .map(|_| {
            let values = (0..width * height).map(|_| rng.gen_range(0.0..=1.0)).collect();
            PredictionSlot::new(SoftMask::new(width, height, values).unwrap(), rng.gen_range(margin..1.0 - margin)).unwrap()
        })
        .collect();
    let real = rng.gen_range(0..=n);
    let targets = (0..real)
        .map(|_| {
            let density = rng.gen_range(0.1..0.9);
            let mask = BitMask::from_fn(width, height, |_, _| rng.gen_bool(density));
            TargetSlot::text(mask, rng.gen_range(0..3))
        })
        .collect();
    let targets = matching::pad_targets(targets, n, width, height).unwrap();
    let sigma = matching::match_slots(&preds, &targets).unwrap();
    let affinity = (0..n * n).map(|_| rng.gen_range(margin..1.0 - margin)).collect();
    LossInstance {
        preds,
        targets,
        sigma,
        affinity,
    }
}
