//! Hierarchical ground truth: paragraphs contain lines, lines contain words.
//!
//! Parsing goes through a raw serde layer that mirrors the JSON schema and is
//! then validated into the domain types. Every violation is collected with the
//! JSON path of the offending value so a whole file can be reported at once.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, BitMask, GeometryError, Point, Polygon};

/// How far outside the image a vertex may sit before it is an error.
/// Vertices within this margin are clamped onto the image border.
pub const CLAMP_TOLERANCE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("malformed JSON: {0}")]
    Json(serde_json::Error),
    #[error("schema violation at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("{} invariant violation(s), first: {}", .0.len(), .0[0])]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl AnnotationError {
    /// All located problems carried by this error, one per line of output.
    pub fn diagnostics(&self) -> Vec<String> {
        match self {
            AnnotationError::Invalid(v) => v.iter().map(ToString::to_string).collect(),
            other => vec![other.to_string()],
        }
    }
}

/// Evaluation granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Word,
    Line,
    Paragraph,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Word, Level::Line, Level::Paragraph];

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Word => "word",
            Level::Line => "line",
            Level::Paragraph => "paragraph",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "word" => Ok(Level::Word),
            "line" => Ok(Level::Line),
            "paragraph" => Ok(Level::Paragraph),
            other => Err(format!("unknown level `{other}` (expected word, line or paragraph)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Word {
    pub polygon: Polygon,
    pub text: String,
    pub legible: bool,
    pub vertical: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub polygon: Polygon,
    pub text: String,
    pub words: Vec<Word>,
    pub legible: bool,
    pub vertical: bool,
    pub handwritten: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Paragraph {
    pub polygon: Polygon,
    pub lines: Vec<Line>,
    pub legible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierAnnotation {
    pub image_id: String,
    pub image_width: usize,
    pub image_height: usize,
    pub paragraphs: Vec<Paragraph>,
}

impl HierAnnotation {
    pub fn lines(&self) -> impl Iterator<Item = (usize, &Line)> {
        self.paragraphs
            .iter()
            .enumerate()
            .flat_map(|(p, para)| para.lines.iter().map(move |l| (p, l)))
    }

    pub fn words(&self) -> impl Iterator<Item = (usize, &Word)> {
        self.lines()
            .flat_map(|(p, line)| line.words.iter().map(move |w| (p, w)))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruthSet {
    pub annotations: Vec<HierAnnotation>,
}

impl GroundTruthSet {
    pub fn get(&self, image_id: &str) -> Option<&HierAnnotation> {
        self.annotations.iter().find(|a| a.image_id == image_id)
    }

    /// Canonical JSON in the ingestion schema.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&RawSet::from(self)).expect("ground truth serializes")
    }
}

// Raw schema layer.

#[derive(Debug, Serialize, Deserialize)]
struct RawSet {
    annotations: Vec<RawAnnotation>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawAnnotation {
    image_id: String,
    image_width: u64,
    image_height: u64,
    #[serde(default)]
    paragraphs: Vec<RawParagraph>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawParagraph {
    vertices: Vec<Vec<f64>>,
    legible: bool,
    #[serde(default)]
    lines: Vec<RawLine>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawLine {
    vertices: Vec<Vec<f64>>,
    text: String,
    legible: bool,
    vertical: bool,
    handwritten: bool,
    #[serde(default)]
    words: Vec<RawWord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawWord {
    vertices: Vec<Vec<f64>>,
    text: String,
    legible: bool,
    vertical: bool,
}

fn raw_vertices(p: &Polygon) -> Vec<Vec<f64>> {
    p.vertices().iter().map(|v| vec![v.x, v.y]).collect()
}

impl From<&GroundTruthSet> for RawSet {
    fn from(g: &GroundTruthSet) -> Self {
        RawSet {
            annotations: g
                .annotations
                .iter()
                .map(|a| RawAnnotation {
                    image_id: a.image_id.clone(),
                    image_width: a.image_width as u64,
                    image_height: a.image_height as u64,
                    paragraphs: a
                        .paragraphs
                        .iter()
                        .map(|p| RawParagraph {
                            vertices: raw_vertices(&p.polygon),
                            legible: p.legible,
                            lines: p
                                .lines
                                .iter()
                                .map(|l| RawLine {
                                    vertices: raw_vertices(&l.polygon),
                                    text: l.text.clone(),
                                    legible: l.legible,
                                    vertical: l.vertical,
                                    handwritten: l.handwritten,
                                    words: l
                                        .words
                                        .iter()
                                        .map(|w| RawWord {
                                            vertices: raw_vertices(&w.polygon),
                                            text: w.text.clone(),
                                            legible: w.legible,
                                            vertical: w.vertical,
                                        })
                                        .collect(),
                                })
                                .collect(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

struct Validator {
    violations: Vec<Violation>,
}

impl Validator {
    fn report(&mut self, path: &str, message: impl Into<String>) {
        self.violations.push(Violation {
            path: path.to_string(),
            message: message.into(),
        });
    }

    fn polygon(&mut self, path: &str, raw: &[Vec<f64>], width: f64, height: f64) -> Option<Polygon> {
        let path = format!("{path}.vertices");
        if raw.len() < 3 {
            self.report(&path, format!("polygon needs at least 3 vertices, got {}", raw.len()));
            return None;
        }
        let mut ok = true;
        let mut points = Vec::with_capacity(raw.len());
        for (i, v) in raw.iter().enumerate() {
            let vpath = format!("{path}[{i}]");
            if v.len() != 2 {
                self.report(&vpath, format!("vertex must be [x, y], got {} values", v.len()));
                ok = false;
                continue;
            }
            let (x, y) = (v[0], v[1]);
            let inside = |c: f64, limit: f64| {
                c.is_finite() && c >= -CLAMP_TOLERANCE && c <= limit + CLAMP_TOLERANCE
            };
            if !inside(x, width) || !inside(y, height) {
                self.report(
                    &vpath,
                    format!("vertex ({x}, {y}) lies outside the {width}x{height} image"),
                );
                ok = false;
                continue;
            }
            points.push(Point::new(x.clamp(0.0, width), y.clamp(0.0, height)));
        }
        if !ok {
            return None;
        }
        match Polygon::new(points) {
            Ok(p) => Some(p),
            Err(e) => {
                self.report(&path, e.to_string());
                None
            }
        }
    }

    fn annotation(&mut self, path: &str, raw: &RawAnnotation) -> Option<HierAnnotation> {
        if raw.image_width == 0 || raw.image_height == 0 {
            self.report(
                path,
                format!(
                    "image dimensions must be positive, got {}x{}",
                    raw.image_width, raw.image_height
                ),
            );
            return None;
        }
        let (w, h) = (raw.image_width as f64, raw.image_height as f64);
        let before = self.violations.len();
        let mut paragraphs = Vec::with_capacity(raw.paragraphs.len());
        for (pi, rp) in raw.paragraphs.iter().enumerate() {
            let ppath = format!("{path}.paragraphs[{pi}]");
            let polygon = self.polygon(&ppath, &rp.vertices, w, h);
            if rp.lines.is_empty() && rp.legible {
                self.report(&ppath, "legible paragraph has no lines");
            }
            let mut lines = Vec::with_capacity(rp.lines.len());
            for (li, rl) in rp.lines.iter().enumerate() {
                let lpath = format!("{ppath}.lines[{li}]");
                let polygon = self.polygon(&lpath, &rl.vertices, w, h);
                if rl.words.is_empty() && rl.legible {
                    self.report(&lpath, "legible line has no words");
                }
                let mut words = Vec::with_capacity(rl.words.len());
                for (wi, rw) in rl.words.iter().enumerate() {
                    let wpath = format!("{lpath}.words[{wi}]");
                    let polygon = self.polygon(&wpath, &rw.vertices, w, h);
                    if rw.legible && rw.text.is_empty() {
                        self.report(&format!("{wpath}.text"), "legible word has empty transcription");
                    }
                    if let Some(polygon) = polygon {
                        words.push(Word {
                            polygon,
                            text: rw.text.clone(),
                            legible: rw.legible,
                            vertical: rw.vertical,
                        });
                    }
                }
                if let Some(polygon) = polygon {
                    lines.push(Line {
                        polygon,
                        text: rl.text.clone(),
                        words,
                        legible: rl.legible,
                        vertical: rl.vertical,
                        handwritten: rl.handwritten,
                    });
                }
            }
            if let Some(polygon) = polygon {
                paragraphs.push(Paragraph {
                    polygon,
                    lines,
                    legible: rp.legible,
                });
            }
        }
        (self.violations.len() == before).then(|| HierAnnotation {
            image_id: raw.image_id.clone(),
            image_width: raw.image_width as usize,
            image_height: raw.image_height as usize,
            paragraphs,
        })
    }
}

/// Parses and validates a ground-truth document.
pub fn parse_ground_truth(bytes: &[u8]) -> Result<GroundTruthSet, AnnotationError> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let raw: RawSet = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if inner.is_data() {
            AnnotationError::Schema {
                path,
                message: inner.to_string(),
            }
        } else {
            AnnotationError::Json(inner)
        }
    })?;

    let mut v = Validator {
        violations: Vec::new(),
    };
    let mut seen = HashSet::new();
    let mut annotations = Vec::with_capacity(raw.annotations.len());
    for (i, ra) in raw.annotations.iter().enumerate() {
        let path = format!("annotations[{i}]");
        if !seen.insert(ra.image_id.as_str()) {
            v.report(
                &format!("{path}.image_id"),
                format!("duplicate image_id `{}`", ra.image_id),
            );
        }
        if let Some(a) = v.annotation(&path, ra) {
            annotations.push(a);
        }
    }
    if v.violations.is_empty() {
        Ok(GroundTruthSet { annotations })
    } else {
        Err(AnnotationError::Invalid(v.violations))
    }
}

/// Target grid for rasterizing an annotation, possibly at reduced scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterGrid {
    pub width: usize,
    pub height: usize,
    pub scale_x: f64,
    pub scale_y: f64,
}

impl RasterGrid {
    pub fn full(a: &HierAnnotation) -> Self {
        Self {
            width: a.image_width,
            height: a.image_height,
            scale_x: 1.0,
            scale_y: 1.0,
        }
    }

    /// Grid of the given size with polygons scaled from image coordinates.
    pub fn fitted(a: &HierAnnotation, width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            scale_x: width as f64 / a.image_width as f64,
            scale_y: height as f64 / a.image_height as f64,
        }
    }

    /// Grid for model outputs of size `width x height`: the integer
    /// downsampling whose rounded-up size matches, else a fitted scale.
    pub fn for_output(a: &HierAnnotation, width: usize, height: usize) -> Self {
        (1..=a.image_width.max(a.image_height))
            .find(|&f| a.image_width.div_ceil(f) == width && a.image_height.div_ceil(f) == height)
            .map(|f| Self::downsampled(a, f))
            .unwrap_or_else(|| Self::fitted(a, width, height))
    }

    /// Integer downsampling (e.g. 4 for quarter resolution), rounding up.
    pub fn downsampled(a: &HierAnnotation, factor: usize) -> Self {
        Self {
            width: a.image_width.div_ceil(factor),
            height: a.image_height.div_ceil(factor),
            scale_x: 1.0 / factor as f64,
            scale_y: 1.0 / factor as f64,
        }
    }

    fn rasterize(&self, p: &Polygon) -> Result<BitMask, GeometryError> {
        if self.scale_x == 1.0 && self.scale_y == 1.0 {
            geometry::rasterize(p, self.width, self.height)
        } else {
            geometry::rasterize(&p.scaled(self.scale_x, self.scale_y), self.width, self.height)
        }
    }
}

/// One entity at a given level, before legibility filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedEntity {
    /// Position of the entity in traversal order at its level.
    pub index: usize,
    pub mask: BitMask,
    /// Index of the enclosing paragraph.
    pub cluster: usize,
    pub legible: bool,
}

/// Rasterizes every entity at `level`. Lines are unions of their words and
/// paragraphs unions of their lines; a line without words falls back to its
/// own polygon.
pub fn derive_entities(
    a: &HierAnnotation,
    level: Level,
    grid: RasterGrid,
) -> Result<Vec<DerivedEntity>, GeometryError> {
    let mut out = Vec::new();
    match level {
        Level::Word => {
            for (index, (cluster, word)) in a.words().enumerate() {
                out.push(DerivedEntity {
                    index,
                    mask: grid.rasterize(&word.polygon)?,
                    cluster,
                    legible: word.legible,
                });
            }
        }
        Level::Line => {
            for (index, (cluster, line)) in a.lines().enumerate() {
                out.push(DerivedEntity {
                    index,
                    mask: line_mask(line, grid)?,
                    cluster,
                    legible: line.legible,
                });
            }
        }
        Level::Paragraph => {
            for (index, para) in a.paragraphs.iter().enumerate() {
                let mut mask = BitMask::new(grid.width, grid.height);
                for line in &para.lines {
                    mask.union_with(&line_mask(line, grid)?)?;
                }
                out.push(DerivedEntity {
                    index,
                    mask,
                    cluster: index,
                    legible: para.legible,
                });
            }
        }
    }
    Ok(out)
}

fn line_mask(line: &Line, grid: RasterGrid) -> Result<BitMask, GeometryError> {
    if line.words.is_empty() {
        return grid.rasterize(&line.polygon);
    }
    let mut mask = BitMask::new(grid.width, grid.height);
    for word in &line.words {
        mask.union_with(&grid.rasterize(&word.polygon)?)?;
    }
    Ok(mask)
}

/// Evaluation targets: legible entities with at least one pixel.
pub fn derive_masks(
    a: &HierAnnotation,
    level: Level,
    grid: RasterGrid,
) -> Result<Vec<DerivedEntity>, GeometryError> {
    Ok(derive_entities(a, level, grid)?
        .into_iter()
        .filter(|e| {
            if e.legible && e.mask.is_empty() {
                log::warn!(
                    "{}: {} {} rasterizes to zero pixels, dropped",
                    a.image_id,
                    level,
                    e.index
                );
            }
            e.legible && !e.mask.is_empty()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_edges: Vec<u64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Bins `[k*w, (k+1)*w)` covering every value; empty input gives no bins.
    pub fn of_counts(values: &[u64], bin_width: u64) -> Self {
        let Some(&max) = values.iter().max() else {
            return Self {
                bin_edges: Vec::new(),
                counts: Vec::new(),
            };
        };
        let bins = (max / bin_width + 1) as usize;
        let mut counts = vec![0u64; bins];
        for &v in values {
            counts[(v / bin_width) as usize] += 1;
        }
        Self {
            bin_edges: (0..=bins as u64).map(|k| k * bin_width).collect(),
            counts,
        }
    }
}

pub const HEATMAP_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub images: usize,
    pub paragraphs: usize,
    pub lines: usize,
    pub words: usize,
    pub legible_words: usize,
    pub mean_words_per_image: f64,
    pub mean_legible_words_per_image: f64,
    pub words_per_image: Histogram,
    pub words_per_line: Histogram,
    pub words_per_paragraph: Histogram,
    /// Row-major `HEATMAP_SIZE x HEATMAP_SIZE` grid of word-centroid
    /// frequencies in normalized image coordinates, summing to 1.
    pub centroid_heatmap: Vec<Vec<f64>>,
}

impl StatsReport {
    /// One-line summary in the style of dataset comparison tables.
    pub fn summary(&self) -> String {
        format!(
            "images={} words/image={:.1} total_words={} (legible: {:.1}/{}) lines={} paragraphs={}",
            self.images,
            self.mean_words_per_image,
            human_count(self.words),
            self.mean_legible_words_per_image,
            human_count(self.legible_words),
            self.lines,
            self.paragraphs,
        )
    }
}

fn human_count(n: usize) -> String {
    if n >= 1_000_000 {
        format!("{:.1}M", n as f64 / 1e6)
    } else if n >= 1_000 {
        format!("{:.1}K", n as f64 / 1e3)
    } else {
        n.to_string()
    }
}

pub fn dataset_stats(g: &GroundTruthSet) -> StatsReport {
    let mut per_image = Vec::with_capacity(g.annotations.len());
    let mut per_line = Vec::new();
    let mut per_paragraph = Vec::new();
    let mut heat = vec![vec![0.0; HEATMAP_SIZE]; HEATMAP_SIZE];
    let (mut paragraphs, mut lines, mut words, mut legible) = (0, 0, 0, 0);

    for a in &g.annotations {
        let mut image_words = 0u64;
        for para in &a.paragraphs {
            paragraphs += 1;
            let mut para_words = 0u64;
            for line in &para.lines {
                lines += 1;
                per_line.push(line.words.len() as u64);
                para_words += line.words.len() as u64;
                for word in &line.words {
                    legible += word.legible as usize;
                    let c = word.polygon.centroid();
                    let bin = |v: f64, extent: usize| {
                        ((v / extent as f64 * HEATMAP_SIZE as f64) as usize).min(HEATMAP_SIZE - 1)
                    };
                    heat[bin(c.y, a.image_height)][bin(c.x, a.image_width)] += 1.0;
                }
            }
            per_paragraph.push(para_words);
            image_words += para_words;
        }
        words += image_words as usize;
        per_image.push(image_words);
    }

    if words > 0 {
        for v in heat.iter_mut().flatten() {
            *v /= words as f64;
        }
    }
    let images = g.annotations.len();
    let mean = |n: usize| if images == 0 { 0.0 } else { n as f64 / images as f64 };
    StatsReport {
        images,
        paragraphs,
        lines,
        words,
        legible_words: legible,
        mean_words_per_image: mean(words),
        mean_legible_words_per_image: mean(legible),
        words_per_image: Histogram::of_counts(&per_image, 10),
        words_per_line: Histogram::of_counts(&per_line, 1),
        words_per_paragraph: Histogram::of_counts(&per_paragraph, 1),
        centroid_heatmap: heat,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn word(x0: f64, y0: f64, x1: f64, y1: f64) -> String {
        format!(
            r#"{{"vertices":[[{x0},{y0}],[{x1},{y0}],[{x1},{y1}],[{x0},{y1}]],"text":"w","legible":true,"vertical":false}}"#
        )
    }

    fn line(words: &[String]) -> String {
        format!(
            r#"{{"vertices":[[0,0],[63,0],[63,63],[0,63]],"text":"l","legible":true,"vertical":false,"handwritten":false,"words":[{}]}}"#,
            words.join(",")
        )
    }

    fn doc(paragraphs: &[&[String]]) -> String {
        let paras: Vec<String> = paragraphs
            .iter()
            .map(|lines| {
                format!(
                    r#"{{"vertices":[[0,0],[63,0],[63,63],[0,63]],"legible":true,"lines":[{}]}}"#,
                    lines.join(",")
                )
            })
            .collect();
        format!(
            r#"{{"annotations":[{{"image_id":"img","image_width":64,"image_height":64,"paragraphs":[{}]}}]}}"#,
            paras.join(",")
        )
    }

    #[test]
    fn minimal_file_parses() {
        let json = doc(&[&[line(&[word(1.0, 1.0, 5.0, 5.0)])]]);
        let g = parse_ground_truth(json.as_bytes()).unwrap();
        assert_eq!(g.annotations.len(), 1);
        assert_eq!(g.annotations[0].words().count(), 1);
    }

    #[test]
    fn two_vertex_word_names_its_path() {
        let bad = r#"{"vertices":[[1,1],[5,5]],"text":"w","legible":true,"vertical":false}"#.to_string();
        let json = doc(&[&[line(&[word(1.0, 1.0, 5.0, 5.0), bad])]]);
        let err = parse_ground_truth(json.as_bytes()).unwrap_err();
        let AnnotationError::Invalid(v) = err else {
            panic!("expected invariant violation, got {err:?}");
        };
        assert_eq!(v.len(), 1);
        assert_eq!(
            v[0].path,
            "annotations[0].paragraphs[0].lines[0].words[1].vertices"
        );
    }

    #[test]
    fn errors_are_classified() {
        assert!(matches!(
            parse_ground_truth(b"{\"annotations\": ["),
            Err(AnnotationError::Json(_))
        ));
        let err = parse_ground_truth(br#"{"annotations":[{"image_id":"a","image_width":"x","image_height":1}]}"#)
            .unwrap_err();
        match err {
            AnnotationError::Schema { path, .. } => assert_eq!(path, "annotations[0].image_width"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn every_violation_is_collected() {
        let untranscribed = r#"{"vertices":[[1,1],[5,1],[5,5]],"text":"","legible":true,"vertical":false}"#.to_string();
        let outside = word(1.0, 1.0, 90.0, 5.0);
        let json = doc(&[&[line(&[untranscribed, outside])], &[line(&[])]]);
        let err = parse_ground_truth(json.as_bytes()).unwrap_err();
        let paths: Vec<String> = match err {
            AnnotationError::Invalid(v) => v.into_iter().map(|v| v.path).collect(),
            other => panic!("unexpected {other:?}"),
        };
        assert_eq!(
            paths,
            [
                "annotations[0].paragraphs[0].lines[0].words[0].text",
                "annotations[0].paragraphs[0].lines[0].words[1].vertices[1]",
                "annotations[0].paragraphs[0].lines[0].words[1].vertices[2]",
                "annotations[0].paragraphs[1].lines[0]",
            ]
        );
    }

    #[test]
    fn vertices_within_tolerance_are_clamped() {
        let json = doc(&[&[line(&[word(0.0, 0.0, 64.5, 5.0)])]]);
        let g = parse_ground_truth(json.as_bytes()).unwrap();
        let (_, w) = g.annotations[0].words().next().unwrap();
        assert_eq!(w.polygon.vertices()[1].x, 64.0);
    }

    #[test]
    fn duplicate_image_ids_rejected() {
        let one = r#"{"image_id":"a","image_width":4,"image_height":4,"paragraphs":[]}"#;
        let json = format!(r#"{{"annotations":[{one},{one}]}}"#);
        let err = parse_ground_truth(json.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("duplicate image_id"));
    }

    #[test]
    fn disjoint_words_sum_into_paragraph() {
        let l1 = line(&[word(0.0, 0.0, 4.0, 4.0), word(8.0, 0.0, 12.0, 4.0)]);
        let l2 = line(&[word(0.0, 8.0, 4.0, 12.0), word(8.0, 8.0, 10.0, 12.0)]);
        let g = parse_ground_truth(doc(&[&[l1, l2]]).as_bytes()).unwrap();
        let a = &g.annotations[0];
        let grid = RasterGrid::full(a);
        let words = derive_masks(a, Level::Word, grid).unwrap();
        let total: u64 = words.iter().map(|e| e.mask.count_ones()).sum();
        assert_eq!(total, 16 + 16 + 16 + 8);
        let paras = derive_masks(a, Level::Paragraph, grid).unwrap();
        assert_eq!(paras.len(), 1);
        assert_eq!(paras[0].mask.count_ones(), total);
    }

    #[test]
    fn overlapping_words_count_once_in_line() {
        let l = line(&[word(0.0, 0.0, 6.0, 4.0), word(4.0, 0.0, 10.0, 4.0)]);
        let g = parse_ground_truth(doc(&[&[l]]).as_bytes()).unwrap();
        let a = &g.annotations[0];
        let grid = RasterGrid::full(a);
        let words = derive_masks(a, Level::Word, grid).unwrap();
        let overlap = words[0].mask.intersection_count(&words[1].mask).unwrap();
        assert_eq!(overlap, 8);
        let lines = derive_masks(a, Level::Line, grid).unwrap();
        assert_eq!(lines[0].mask.count_ones(), 24 + 24 - overlap);
    }

    #[test]
    fn empty_image_has_no_entities() {
        let g = parse_ground_truth(doc(&[]).as_bytes()).unwrap();
        for level in Level::ALL {
            let grid = RasterGrid::full(&g.annotations[0]);
            assert!(derive_masks(&g.annotations[0], level, grid).unwrap().is_empty());
        }
    }

    #[test]
    fn illegible_and_subpixel_words_are_not_targets() {
        let tiny = word(2.1, 2.1, 2.3, 2.3);
        let illegible = r#"{"vertices":[[10,10],[20,10],[20,20],[10,20]],"text":"","legible":false,"vertical":false}"#.to_string();
        let l = line(&[word(0.0, 0.0, 4.0, 4.0), tiny, illegible]);
        let g = parse_ground_truth(doc(&[&[l]]).as_bytes()).unwrap();
        let a = &g.annotations[0];
        let targets = derive_masks(a, Level::Word, RasterGrid::full(a)).unwrap();
        assert_eq!(targets.iter().map(|e| e.index).collect::<Vec<_>>(), vec![0]);
        let all = derive_entities(a, Level::Word, RasterGrid::full(a)).unwrap();
        assert_eq!(all.len(), 3);
    }

    #[test]
    fn stats_on_small_sets() {
        let l = line(&[word(0.0, 0.0, 4.0, 4.0), word(8.0, 0.0, 12.0, 4.0), word(40.0, 40.0, 50.0, 50.0)]);
        let g = parse_ground_truth(doc(&[&[l]]).as_bytes()).unwrap();
        let s = dataset_stats(&g);
        assert_eq!((s.images, s.words, s.legible_words), (1, 3, 3));
        assert_eq!(s.mean_words_per_image, 3.0);
        assert_eq!(s.words_per_line.counts, vec![0, 0, 0, 1]);
        let total: f64 = s.centroid_heatmap.iter().flatten().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(s.centroid_heatmap[2][2], 1.0 / 3.0);

        let empty = dataset_stats(&GroundTruthSet::default());
        assert_eq!((empty.images, empty.words), (0, 0));
        assert_eq!(empty.mean_words_per_image, 0.0);
        assert!(empty.words_per_image.counts.is_empty());
    }

    #[test]
    fn canonical_reserialization_is_stable() {
        let l = line(&[word(0.0, 0.0, 4.5, 4.0)]);
        let bytes = doc(&[&[l]]);
        let a = parse_ground_truth(bytes.as_bytes()).unwrap();
        let b = parse_ground_truth(bytes.as_bytes()).unwrap();
        assert_eq!(a, b);
        let again = parse_ground_truth(a.to_json().as_bytes()).unwrap();
        assert_eq!(again, a);
        assert_eq!(again.to_json(), a.to_json());
    }
}
