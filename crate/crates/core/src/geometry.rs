//! Polygons, binary and soft masks, rasterization, mask algebra and the
//! run-length codec shared by the rest of the crate.
//!
//! Masks are row-major. A [`BitMask`] packs each row into 64-bit words so that
//! intersections and unions run word-at-a-time; bits past the row width are
//! always zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("vertex {index} has invalid coordinates ({x}, {y})")]
    InvalidVertex { index: usize, x: f64, y: f64 },
    #[error("grid must be at least 1x1, got {width}x{height}")]
    EmptyGrid { width: usize, height: usize },
    #[error("mask dimensions differ: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("mask value {value} at index {index} is outside [0, 1]")]
    ValueOutOfRange { index: usize, value: f64 },
    #[error("buffer of length {len} cannot hold a {width}x{height} mask")]
    BufferLength {
        len: usize,
        width: usize,
        height: usize,
    },
    #[error("rle counts sum to {sum}, expected {expected}")]
    RleLength { sum: u64, expected: u64 },
    #[error("rle run {index} has zero length")]
    RleZeroRun { index: usize },
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Closed polygon ring; the last vertex connects back to the first.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    vertices: Vec<Point>,
}

impl Polygon {
    pub fn new(vertices: Vec<Point>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(GeometryError::TooFewVertices(vertices.len()));
        }
        for (index, v) in vertices.iter().enumerate() {
            if !(v.x.is_finite() && v.y.is_finite()) || v.x < 0.0 || v.y < 0.0 {
                return Err(GeometryError::InvalidVertex {
                    index,
                    x: v.x,
                    y: v.y,
                });
            }
        }
        Ok(Self { vertices })
    }

    pub fn from_pairs(pairs: &[[f64; 2]]) -> Result<Self> {
        Self::new(pairs.iter().map(|p| Point::new(p[0], p[1])).collect())
    }

    /// Axis-aligned rectangle spanning `[x0, x1] x [y0, y1]`.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new(vec![
            Point::new(x0, y0),
            Point::new(x1, y0),
            Point::new(x1, y1),
            Point::new(x0, y1),
        ])
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn to_pairs(&self) -> Vec<[f64; 2]> {
        self.vertices.iter().map(|p| [p.x, p.y]).collect()
    }

    /// Scales every coordinate independently along each axis.
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self {
            vertices: self
                .vertices
                .iter()
                .map(|p| Point::new(p.x * sx, p.y * sy))
                .collect(),
        }
    }

    /// Area centroid (shoelace). Falls back to the vertex mean when the ring
    /// encloses no area.
    pub fn centroid(&self) -> Point {
        let n = self.vertices.len();
        let (mut area2, mut cx, mut cy) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let cross = a.x * b.y - b.x * a.y;
            area2 += cross;
            cx += (a.x + b.x) * cross;
            cy += (a.y + b.y) * cross;
        }
        if area2.abs() < 1e-12 {
            let sx: f64 = self.vertices.iter().map(|p| p.x).sum();
            let sy: f64 = self.vertices.iter().map(|p| p.y).sum();
            return Point::new(sx / n as f64, sy / n as f64);
        }
        Point::new(cx / (3.0 * area2), cy / (3.0 * area2))
    }
}

/// Row-major binary mask.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BitMask {
    width: usize,
    height: usize,
    stride: usize,
    words: Vec<u64>,
}

impl std::fmt::Debug for BitMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BitMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("ones", &self.count_ones())
            .finish()
    }
}

impl BitMask {
    pub fn new(width: usize, height: usize) -> Self {
        let stride = width.div_ceil(64);
        Self {
            width,
            height,
            stride,
            words: vec![0; stride * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut mask = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    mask.set(x, y, true);
                }
            }
        }
        mask
    }

    pub fn from_bools(width: usize, height: usize, bits: &[bool]) -> Result<Self> {
        if bits.len() != width * height {
            return Err(GeometryError::BufferLength {
                len: bits.len(),
                width,
                height,
            });
        }
        Ok(Self::from_fn(width, height, |x, y| bits[y * width + x]))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        debug_assert!(x < self.width && y < self.height);
        self.words[y * self.stride + x / 64] >> (x % 64) & 1 == 1
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        debug_assert!(x < self.width && y < self.height);
        let word = &mut self.words[y * self.stride + x / 64];
        if value {
            *word |= 1 << (x % 64);
        } else {
            *word &= !(1 << (x % 64));
        }
    }

    /// Sets pixels `x0..x1` of row `y`.
    pub fn fill_span(&mut self, y: usize, x0: usize, x1: usize) {
        let x1 = x1.min(self.width);
        if x0 >= x1 {
            return;
        }
        let row = &mut self.words[y * self.stride..(y + 1) * self.stride];
        let (first, last) = (x0 / 64, (x1 - 1) / 64);
        for (w, word) in row.iter_mut().enumerate().take(last + 1).skip(first) {
            let lo = if w == first { x0 % 64 } else { 0 };
            let hi = if w == last { (x1 - 1) % 64 + 1 } else { 64 };
            let bits = if hi - lo == 64 {
                u64::MAX
            } else {
                ((1u64 << (hi - lo)) - 1) << lo
            };
            *word |= bits;
        }
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    /// Row-major flat indices of set pixels, ascending.
    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.height).flat_map(move |y| {
            let row = &self.words[y * self.stride..(y + 1) * self.stride];
            row.iter().enumerate().flat_map(move |(w, &word)| {
                let mut bits = word;
                std::iter::from_fn(move || {
                    if bits == 0 {
                        return None;
                    }
                    let b = bits.trailing_zeros() as usize;
                    bits &= bits - 1;
                    Some(y * self.width + w * 64 + b)
                })
            })
        })
    }

    pub fn to_bools(&self) -> Vec<bool> {
        let mut out = vec![false; self.len()];
        for i in self.iter_ones() {
            out[i] = true;
        }
        out
    }

    /// Inclusive-exclusive bounding box `(x0, y0, x1, y1)` of set pixels.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut rows = (0..self.height).filter(|&y| self.row(y).iter().any(|&w| w != 0));
        let y0 = rows.next()?;
        let y1 = rows.next_back().unwrap_or(y0) + 1;
        let mut x0 = usize::MAX;
        let mut x1 = 0;
        for y in y0..y1 {
            for (w, &word) in self.row(y).iter().enumerate() {
                if word != 0 {
                    x0 = x0.min(w * 64 + word.trailing_zeros() as usize);
                    x1 = x1.max(w * 64 + 64 - word.leading_zeros() as usize);
                }
            }
        }
        Some((x0, y0, x1, y1))
    }

    fn row(&self, y: usize) -> &[u64] {
        &self.words[y * self.stride..(y + 1) * self.stride]
    }

    fn check_dims(&self, other: &BitMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(GeometryError::DimensionMismatch {
                left: self.dims(),
                right: other.dims(),
            });
        }
        Ok(())
    }

    pub fn intersection_count(&self, other: &BitMask) -> Result<u64> {
        self.check_dims(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as u64)
            .sum())
    }

    pub fn union_with(&mut self, other: &BitMask) -> Result<()> {
        self.check_dims(other)?;
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
        Ok(())
    }

    pub fn intersects(&self, other: &BitMask) -> Result<bool> {
        self.check_dims(other)?;
        Ok(self.words.iter().zip(&other.words).any(|(a, b)| a & b != 0))
    }

    /// Nearest-neighbour upsampling by an integer factor, cropped to
    /// `width x height` when given.
    pub fn upsample(&self, factor: usize, crop: Option<(usize, usize)>) -> Self {
        let (w, h) = crop.unwrap_or((self.width * factor, self.height * factor));
        self.resize_nearest_with(w, h, |x| x / factor, |y| y / factor)
    }

    /// Nearest-neighbour resize to arbitrary dimensions (pixel-center mapping).
    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        let (sw, sh) = (self.width as f64 / width as f64, self.height as f64 / height as f64);
        self.resize_nearest_with(
            width,
            height,
            |x| ((x as f64 + 0.5) * sw) as usize,
            |y| ((y as f64 + 0.5) * sh) as usize,
        )
    }

    fn resize_nearest_with(
        &self,
        width: usize,
        height: usize,
        map_x: impl Fn(usize) -> usize,
        map_y: impl Fn(usize) -> usize,
    ) -> Self {
        let mut out = Self::new(width, height);
        for y in 0..height {
            let sy = map_y(y);
            if sy >= self.height {
                continue;
            }
            for x in 0..width {
                let sx = map_x(x);
                if sx < self.width && self.get(sx, sy) {
                    out.set(x, y, true);
                }
            }
        }
        out
    }
}

/// Row-major mask with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl SoftMask {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(GeometryError::BufferLength {
                len: values.len(),
                width,
                height,
            });
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(GeometryError::ValueOutOfRange { index, value });
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

impl From<&BitMask> for SoftMask {
    fn from(m: &BitMask) -> Self {
        let mut values = vec![0.0; m.len()];
        for i in m.iter_ones() {
            values[i] = 1.0;
        }
        Self {
            width: m.width,
            height: m.height,
            values,
        }
    }
}

/// Read access shared by binary and soft masks, enough to evaluate Dice.
pub trait MaskValues {
    fn dims(&self) -> (usize, usize);
    fn value_at(&self, index: usize) -> f64;
    fn total(&self) -> f64;
    /// Binary masks expose themselves so that overlap sums touch only set pixels.
    fn as_bits(&self) -> Option<&BitMask> {
        None
    }
}

impl MaskValues for BitMask {
    fn dims(&self) -> (usize, usize) {
        BitMask::dims(self)
    }
    fn value_at(&self, index: usize) -> f64 {
        if self.get(index % self.width, index / self.width) {
            1.0
        } else {
            0.0
        }
    }
    fn total(&self) -> f64 {
        self.count_ones() as f64
    }
    fn as_bits(&self) -> Option<&BitMask> {
        Some(self)
    }
}

impl MaskValues for SoftMask {
    fn dims(&self) -> (usize, usize) {
        SoftMask::dims(self)
    }
    fn value_at(&self, index: usize) -> f64 {
        self.values[index]
    }
    fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Rasterizes `polygon` onto a `width x height` grid. A pixel is set when its
/// center lies inside the polygon under the even-odd rule.
pub fn rasterize(polygon: &Polygon, width: usize, height: usize) -> Result<BitMask> {
    if width == 0 || height == 0 {
        return Err(GeometryError::EmptyGrid { width, height });
    }
    let verts = polygon.vertices();
    let mut mask = BitMask::new(width, height);
    let (ymin, ymax) = verts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.y), hi.max(p.y))
        });
    let mut crossings = Vec::with_capacity(verts.len());
    for y in 0..height {
        let cy = y as f64 + 0.5;
        if cy < ymin || cy > ymax {
            continue;
        }
        crossings.clear();
        for (i, a) in verts.iter().enumerate() {
            let b = verts[(i + 1) % verts.len()];
            if (a.y > cy) != (b.y > cy) {
                crossings.push(a.x + (cy - a.y) * (b.x - a.x) / (b.y - a.y));
            }
        }
        crossings.sort_by(f64::total_cmp);
        // A center at cx is inside iff an odd number of crossings lie strictly
        // to its right. Between consecutive crossings that count is constant.
        let total = crossings.len();
        for k in 0..total {
            if (total - k) % 2 == 0 {
                continue;
            }
            // centers with crossings[k-1] <= cx < crossings[k]
            let lo = if k == 0 {
                0
            } else {
                first_center_at_or_after(crossings[k - 1], width)
            };
            let hi = first_center_at_or_after(crossings[k], width);
            mask.fill_span(y, lo, hi);
        }
    }
    Ok(mask)
}

/// Smallest column `x` in `0..=width` with `x + 0.5 >= bound`.
fn first_center_at_or_after(bound: f64, width: usize) -> usize {
    let guess = (bound - 0.5).ceil();
    let mut x = if guess <= 0.0 {
        0
    } else if guess >= width as f64 {
        width
    } else {
        guess as usize
    };
    while x > 0 && (x - 1) as f64 + 0.5 >= bound {
        x -= 1;
    }
    while x < width && (x as f64 + 0.5) < bound {
        x += 1;
    }
    x
}

/// Intersection over union; two empty masks score 0.
pub fn iou(a: &BitMask, b: &BitMask) -> Result<f64> {
    let inter = a.intersection_count(b)?;
    let uni = a.count_ones() + b.count_ones() - inter;
    Ok(if uni == 0 {
        0.0
    } else {
        inter as f64 / uni as f64
    })
}

/// Soft Dice `2 sum(a*b) / (sum(a) + sum(b))`; 0 when both sums vanish.
pub fn dice<A, B>(a: &A, b: &B) -> Result<f64>
where
    A: MaskValues + ?Sized,
    B: MaskValues + ?Sized,
{
    if a.dims() != b.dims() {
        return Err(GeometryError::DimensionMismatch {
            left: a.dims(),
            right: b.dims(),
        });
    }
    let denom = a.total() + b.total();
    if denom == 0.0 {
        return Ok(0.0);
    }
    let overlap = match (a.as_bits(), b.as_bits()) {
        (Some(x), Some(y)) => x.intersection_count(y)? as f64,
        (_, Some(y)) => y.iter_ones().map(|i| a.value_at(i)).sum(),
        (Some(x), _) => x.iter_ones().map(|i| b.value_at(i)).sum(),
        (None, None) => {
            let (w, h) = a.dims();
            (0..w * h).map(|i| a.value_at(i) * b.value_at(i)).sum()
        }
    };
    Ok(2.0 * overlap / denom)
}

/// Bitwise OR of `masks`; an empty list yields an empty `width x height` mask.
pub fn union(masks: &[&BitMask], width: usize, height: usize) -> Result<BitMask> {
    let mut out = BitMask::new(width, height);
    for m in masks {
        out.union_with(m)?;
    }
    Ok(out)
}

/// Run-length encoded mask in row-major order. Runs alternate starting with
/// background; only the first run may be empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<u64>,
}

impl RleMask {
    pub fn validate(&self) -> Result<()> {
        let sum: u64 = self.counts.iter().sum();
        let expected = (self.width * self.height) as u64;
        if sum != expected {
            return Err(GeometryError::RleLength { sum, expected });
        }
        if let Some(index) = self
            .counts
            .iter()
            .enumerate()
            .skip(1)
            .find_map(|(i, &c)| (c == 0).then_some(i))
        {
            return Err(GeometryError::RleZeroRun { index });
        }
        Ok(())
    }

    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).sum()
    }
}

pub fn rle_encode(mask: &BitMask) -> RleMask {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    let mut last = 0usize;
    for i in mask.iter_ones() {
        if !current || i != last + 1 {
            if current {
                counts.push(run);
                // background gap
                counts.push((i - last - 1) as u64);
            } else {
                counts.push(i as u64);
            }
            run = 0;
            current = true;
        }
        run += 1;
        last = i;
    }
    if current {
        counts.push(run);
        let tail = (mask.len() - last - 1) as u64;
        if tail > 0 {
            counts.push(tail);
        }
    } else {
        counts.push(mask.len() as u64);
    }
    RleMask {
        width: mask.width(),
        height: mask.height(),
        counts,
    }
}

pub fn rle_decode(rle: &RleMask) -> Result<BitMask> {
    rle.validate()?;
    let mut mask = BitMask::new(rle.width, rle.height);
    let mut pos = 0usize;
    for (i, &count) in rle.counts.iter().enumerate() {
        let count = count as usize;
        if i % 2 == 1 {
            let mut remaining = count;
            let mut p = pos;
            while remaining > 0 {
                let (y, x) = (p / rle.width, p % rle.width);
                let span = remaining.min(rle.width - x);
                mask.fill_span(y, x, x + span);
                p += span;
                remaining -= span;
            }
        }
        pos += count;
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BitMask {
        BitMask::from_fn(w, h, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    #[test]
    fn square_rasterizes_to_block() {
        let square = Polygon::rect(0.0, 0.0, 4.0, 4.0).unwrap();
        let mask = rasterize(&square, 8, 8).unwrap();
        assert_eq!(mask.count_ones(), 16);
        assert_eq!(mask, block(8, 8, 0, 0, 4, 4));
    }

    #[test]
    fn outside_polygon_is_clipped_away() {
        let square = Polygon::rect(100.0, 100.0, 104.0, 104.0).unwrap();
        assert!(rasterize(&square, 8, 8).unwrap().is_empty());
    }

    #[test]
    fn partially_outside_polygon_is_clipped() {
        let square = Polygon::rect(6.0, 6.0, 20.0, 20.0).unwrap();
        let mask = rasterize(&square, 8, 8).unwrap();
        assert_eq!(mask, block(8, 8, 6, 6, 8, 8));
    }

    #[test]
    fn degenerate_polygons_are_rejected() {
        assert_eq!(
            Polygon::from_pairs(&[[0.0, 0.0], [1.0, 1.0]]),
            Err(GeometryError::TooFewVertices(2))
        );
        assert!(matches!(
            Polygon::from_pairs(&[[0.0, 0.0], [1.0, f64::NAN], [2.0, 0.0]]),
            Err(GeometryError::InvalidVertex { index: 1, .. })
        ));
        assert!(Polygon::from_pairs(&[[0.0, 0.0], [-1.0, 1.0], [2.0, 0.0]]).is_err());
        let tri = Polygon::from_pairs(&[[0.0, 0.0], [1.0, 1.0], [2.0, 0.0]]).unwrap();
        assert!(rasterize(&tri, 0, 4).is_err());
    }

    #[test]
    fn bowtie_uses_even_odd() {
        // Self-intersecting ring crossing at (4, 4).
        let bowtie = Polygon::from_pairs(&[[0.0, 0.0], [8.0, 8.0], [8.0, 0.0], [0.0, 8.0]]).unwrap();
        let mask = rasterize(&bowtie, 8, 8).unwrap();
        assert!(!mask.get(4, 1));
        assert!(mask.get(1, 4));
        assert!(mask.get(7, 4));
        assert!(!mask.get(4, 6));
    }

    #[test]
    fn iou_cases() {
        let a = block(4, 4, 0, 0, 2, 2);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &block(4, 4, 2, 2, 4, 4)).unwrap(), 0.0);
        let b = block(4, 4, 1, 0, 3, 2);
        assert!((iou(&a, &b).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        let empty = BitMask::new(4, 4);
        assert_eq!(iou(&empty, &empty).unwrap(), 0.0);
        assert!(iou(&a, &BitMask::new(3, 4)).is_err());
    }

    #[test]
    fn dice_cases() {
        let a = block(4, 4, 0, 0, 2, 2);
        let b = block(4, 4, 1, 0, 3, 2);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        let sa = SoftMask::new(2, 1, vec![0.5, 0.5]).unwrap();
        let sb = SoftMask::new(2, 1, vec![1.0, 0.0]).unwrap();
        assert_eq!(dice(&sa, &sb).unwrap(), 0.5);
        let bits = BitMask::from_bools(2, 1, &[true, false]).unwrap();
        assert_eq!(dice(&sa, &bits).unwrap(), 0.5);
        assert_eq!(dice(&bits, &sa).unwrap(), 0.5);
        let empty = BitMask::new(2, 1);
        assert_eq!(dice(&empty, &empty).unwrap(), 0.0);
        assert!(matches!(
            SoftMask::new(2, 1, vec![1.5, 0.0]),
            Err(GeometryError::ValueOutOfRange { index: 0, .. })
        ));
        assert!(dice(&sa, &BitMask::new(1, 2)).is_err());
    }

    #[test]
    fn union_cases() {
        let a = block(8, 8, 0, 0, 2, 2);
        let b = block(8, 8, 4, 4, 6, 6);
        assert_eq!(union(&[&a, &a], 8, 8).unwrap(), a);
        assert_eq!(union(&[&a, &b], 8, 8).unwrap().count_ones(), 8);
        assert!(union(&[], 8, 8).unwrap().is_empty());
        assert!(union(&[&a, &BitMask::new(4, 4)], 8, 8).is_err());
    }

    #[test]
    fn rle_small_cases() {
        assert_eq!(rle_encode(&BitMask::new(2, 2)).counts, vec![4]);
        let ones = BitMask::from_fn(2, 2, |_, _| true);
        assert_eq!(rle_encode(&ones).counts, vec![0, 4]);
        let mixed = BitMask::from_bools(3, 1, &[false, true, false]).unwrap();
        assert_eq!(rle_encode(&mixed).counts, vec![1, 1, 1]);
    }

    #[test]
    fn rle_decode_rejects_bad_counts() {
        let bad = RleMask {
            width: 2,
            height: 2,
            counts: vec![1, 2],
        };
        assert_eq!(
            rle_decode(&bad),
            Err(GeometryError::RleLength { sum: 3, expected: 4 })
        );
        let zero = RleMask {
            width: 2,
            height: 2,
            counts: vec![2, 0, 2],
        };
        assert_eq!(rle_decode(&zero), Err(GeometryError::RleZeroRun { index: 1 }));
    }

    #[test]
    fn fill_span_crosses_word_boundaries() {
        let mut m = BitMask::new(200, 1);
        m.fill_span(0, 60, 130);
        assert_eq!(m.count_ones(), 70);
        assert!(!m.get(59, 0) && m.get(60, 0) && m.get(129, 0) && !m.get(130, 0));
        assert_eq!(m.bbox(), Some((60, 0, 130, 1)));
    }

    #[test]
    fn upsample_and_crop() {
        let m = BitMask::from_bools(2, 1, &[false, true]).unwrap();
        let up = m.upsample(4, Some((7, 3)));
        assert_eq!(up.dims(), (7, 3));
        assert_eq!(up.count_ones(), 9);
        assert_eq!(m.resize_nearest(4, 2).count_ones(), 4);
    }

    #[test]
    fn centroid_of_square() {
        let c = Polygon::rect(2.0, 4.0, 6.0, 8.0).unwrap().centroid();
        assert!((c.x - 4.0).abs() < 1e-12 && (c.y - 6.0).abs() < 1e-12);
    }
}
