//! Logit maps to classed, simplified dwelling polygons in ground coordinates.
//!
//! Pipeline per class: 8-connected components, outer boundary tracing along
//! pixel edges, Douglas-Peucker simplification with epsilon back-off until
//! the ring stays simple and keeps its orientation.

use std::collections::VecDeque;

use thiserror::Error;

use crate::geodata::{ClassMask, GeoTransform, NUM_CLASSES};
use crate::geometry::{self, Point};
use crate::tensor::Tensor;

pub const DEFAULT_MIN_COMPONENT_SIZE: usize = 4;
pub const DEFAULT_EPSILON_M: f64 = 0.5;
/// Back-off halvings tried before falling back to epsilon 0.
const MAX_HALVINGS: usize = 40;

#[derive(Debug, Error, PartialEq)]
pub enum VectorizeError {
    #[error("logits must be [1,C,H,W] with 1 <= C <= 8, got {0:?}")]
    Shape(Vec<usize>),
    #[error("non-finite logit at channel {channel}, row {row}, col {col}")]
    NonFinite { channel: usize, row: usize, col: usize },
    #[error("empty component")]
    EmptyComponent,
}

pub type Result<T> = std::result::Result<T, VectorizeError>;

/// Per-pixel predicted class and max-softmax confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMap {
    pub width: usize,
    pub height: usize,
    pub classes: Vec<u8>,
    pub confidence: Vec<f32>,
    pub transform: GeoTransform,
}

impl SegmentationMap {
    pub fn class_mask(&self) -> ClassMask {
        ClassMask { width: self.width, height: self.height, data: self.classes.clone() }
    }

    /// Map with confidence 1 everywhere.
    pub fn from_mask(mask: &ClassMask, transform: GeoTransform) -> Self {
        SegmentationMap {
            width: mask.width,
            height: mask.height,
            classes: mask.data.clone(),
            confidence: vec![1.0; mask.data.len()],
            transform,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DwellingPolygon {
    /// Closed, simple, counter-clockwise ring in ground coordinates.
    pub ring: Vec<Point>,
    pub class_id: u8,
    pub confidence: f32,
    pub pixel_area: usize,
}

/// Per-pixel argmax (ties to the lowest class) and max softmax probability.
pub fn argmax_map(logits: &Tensor<f32>, transform: GeoTransform) -> Result<SegmentationMap> {
    let (n, c, h, w) = logits.dims4().map_err(|_| VectorizeError::Shape(logits.shape().to_vec()))?;
    if n != 1 || c == 0 || c > NUM_CLASSES {
        return Err(VectorizeError::Shape(logits.shape().to_vec()));
    }
    let plane = h * w;
    let x = logits.data();
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(VectorizeError::NonFinite { channel: i / plane, row: i % plane / w, col: i % w });
    }
    let mut classes = vec![0u8; plane];
    let mut confidence = vec![0f32; plane];
    for p in 0..plane {
        let mut best = 0;
        for k in 1..c {
            if x[k * plane + p] > x[best * plane + p] {
                best = k;
            }
        }
        let max = x[best * plane + p] as f64;
        let total: f64 = (0..c).map(|k| (x[k * plane + p] as f64 - max).exp()).sum();
        classes[p] = best as u8;
        confidence[p] = (1.0 / total) as f32;
    }
    Ok(SegmentationMap { width: w, height: h, classes, confidence, transform })
}

/// Pixels `(row, col)` of one connected component in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    pub class_id: u8,
    pub pixels: Vec<(usize, usize)>,
}

impl Component {
    pub fn top_left(&self) -> (usize, usize) {
        self.pixels[0]
    }
}

/// 8-connected components of `class_id`, ordered by their first pixel in
/// row-major scan; components smaller than `min_size` are dropped.
pub fn connected_components(map: &SegmentationMap, class_id: u8, min_size: usize) -> Vec<Component> {
    let (w, h) = (map.width, map.height);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if seen[start] || map.classes[start] != class_id {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / w, i % w);
            pixels.push((r, c));
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if (dr, dc) == (0, 0) || nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if !seen[j] && map.classes[j] == class_id {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        if pixels.len() >= min_size {
            pixels.sort_unstable();
            out.push(Component { class_id, pixels });
        }
    }
    out
}

/// Outer boundary of an 8-connected pixel set as a closed ring of pixel
/// corners `(col, row)`, interior on the left, so the shoelace area in the
/// `(col, row)` frame is positive.
///
/// Where the boundary touches itself at a corner shared by two diagonal
/// pixels, each visit of that corner is moved a quarter pixel into the
/// outside cell it wraps. The ring is then strictly simple while every
/// pixel centre keeps its inside/outside status.
pub fn trace_boundary(pixels: &[(usize, usize)]) -> Result<Vec<Point>> {
    let Some(&(r0, c0)) = pixels.iter().min() else {
        return Err(VectorizeError::EmptyComponent);
    };
    let (rmax, cmax) = pixels.iter().fold((0, 0), |(a, b), &(r, c)| (a.max(r), b.max(c)));
    // Membership grid with a one-cell border; cell (x, y) lives at (x+1, y+1).
    let (gw, gh) = (cmax + 3, rmax + 3);
    let mut grid = vec![false; gw * gh];
    for &(r, c) in pixels {
        grid[(r + 1) * gw + c + 1] = true;
    }
    let inside = |x: i64, y: i64| grid[(y + 1) as usize * gw + (x + 1) as usize];
    let start = (c0 as i64, r0 as i64);
    let (mut pos, mut dir) = (start, (1i64, 0i64));
    let mut ring = vec![Point::new(start.0 as f64, start.1 as f64)];
    loop {
        pos = (pos.0 + dir.0, pos.1 + dir.1);
        let left = (-dir.1, dir.0);
        // Cell with centre pos + (a*dir + b*left)/2.
        let cell = |a: i64, b: i64| {
            let cx = 2 * pos.0 + a * dir.0 + b * left.0;
            let cy = 2 * pos.1 + a * dir.1 + b * left.1;
            inside(cx.div_euclid(2), cy.div_euclid(2))
        };
        let (ahead_left, ahead_right) = (cell(1, 1), cell(1, -1));
        let new_dir = if ahead_right {
            (-left.0, -left.1)
        } else if ahead_left {
            dir
        } else {
            left
        };
        if pos == start && new_dir == (1, 0) {
            break;
        }
        if new_dir != dir {
            let mut v = Point::new(pos.0 as f64, pos.1 as f64);
            if ahead_right && !ahead_left {
                v.x += 0.25 * (new_dir.0 - dir.0) as f64;
                v.y += 0.25 * (new_dir.1 - dir.1) as f64;
            }
            ring.push(v);
        }
        dir = new_dir;
    }
    ring.push(ring[0]);
    Ok(ring)
}

fn dp_chain(points: &[Point], lo: usize, hi: usize, epsilon: f64, keep: &mut [bool]) {
    let mut stack = vec![(lo, hi)];
    while let Some((a, b)) = stack.pop() {
        if b <= a + 1 {
            continue;
        }
        let (mut best, mut dmax) = (a, -1.0);
        for i in a + 1..b {
            let d = geometry::point_segment_distance(points[i], points[a], points[b]);
            if d > dmax {
                best = i;
                dmax = d;
            }
        }
        if dmax > epsilon {
            keep[best] = true;
            stack.push((best, b));
            stack.push((a, best));
        }
    }
}

/// Douglas-Peucker on the chain `points[anchor_k..=anchor_k+1]` between
/// consecutive anchors of a closed ring's vertex list (cyclic).
fn dp_ring(open: &[Point], anchors: &[usize], epsilon: f64) -> Vec<bool> {
    let n = open.len();
    let mut keep = vec![false; n];
    for &a in anchors {
        keep[a] = true;
    }
    for (k, &a) in anchors.iter().enumerate() {
        let b = anchors.get(k + 1).copied().unwrap_or(anchors[0] + n);
        // Unroll the cyclic chain so indices increase.
        let chain: Vec<Point> = (a..=b).map(|i| open[i % n]).collect();
        let mut kept = vec![false; chain.len()];
        dp_chain(&chain, 0, chain.len() - 1, epsilon, &mut kept);
        for (j, &kp) in kept.iter().enumerate() {
            if kp {
                keep[(a + j) % n] = true;
            }
        }
    }
    keep
}

/// The first pair `(i, j)`, `i < j`, at maximum distance.
fn farthest_pair(points: &[Point]) -> (usize, usize) {
    let mut best = (0, 0, -1.0);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = points[i].distance(points[j]);
            if d > best.2 {
                best = (i, j, d);
            }
        }
    }
    (best.0, best.1)
}

/// Douglas-Peucker simplification keeping a point iff its distance to the
/// current chord segment exceeds `epsilon`.
///
/// An open polyline keeps both endpoints. A closed ring (first point equal
/// to last) is cut into chains at its closing vertex and at its two mutually
/// farthest vertices, each chain simplified independently, and the output
/// closed again. The result is always a subsequence of the input.
pub fn douglas_peucker(points: &[Point], epsilon: f64) -> Vec<Point> {
    if points.len() < 3 {
        return points.to_vec();
    }
    if geometry::is_closed(points) && points.len() >= 4 {
        let open = geometry::open(points);
        let (i, j) = farthest_pair(open);
        let mut anchors = vec![0, i, j];
        anchors.sort_unstable();
        anchors.dedup();
        let keep = dp_ring(open, &anchors, epsilon);
        let mut out: Vec<Point> = open.iter().zip(&keep).filter(|(_, &k)| k).map(|(p, _)| *p).collect();
        out.push(out[0]);
        return out;
    }
    let mut keep = vec![false; points.len()];
    keep[0] = true;
    keep[points.len() - 1] = true;
    dp_chain(points, 0, points.len() - 1, epsilon, &mut keep);
    points.iter().zip(&keep).filter(|(_, &k)| k).map(|(p, _)| *p).collect()
}

fn valid_simplification(ring: &[Point], sign: f64) -> bool {
    ring.len() >= 4 && geometry::is_closed(ring) && geometry::is_simple_ring(ring) && geometry::signed_area(ring).signum() == sign
}

/// Douglas-Peucker that halves `epsilon` until the result is closed, simple,
/// has at least 3 distinct vertices and the input's orientation. Epsilon 0
/// is the last resort; if even that fails the input is returned unchanged.
pub fn simplify_topology_safe(ring: &[Point], epsilon: f64) -> Vec<Point> {
    let sign = geometry::signed_area(ring).signum();
    let mut eps = epsilon;
    for _ in 0..MAX_HALVINGS {
        if eps <= 0.0 {
            break;
        }
        let out = douglas_peucker(ring, eps);
        if valid_simplification(&out, sign) {
            return out;
        }
        eps /= 2.0;
    }
    let out = douglas_peucker(ring, 0.0);
    if valid_simplification(&out, sign) {
        out
    } else {
        ring.to_vec()
    }
}

/// [`polygonize_with`] using the default minimum component size.
pub fn polygonize(map: &SegmentationMap, epsilon: f64) -> Vec<DwellingPolygon> {
    polygonize_with(map, epsilon, DEFAULT_MIN_COMPONENT_SIZE)
}

/// Dwelling polygons for classes 1..7, ordered by class then by the
/// component's first pixel in row-major order. Rings are simplified in
/// ground units and oriented counter-clockwise in ground coordinates.
pub fn polygonize_with(map: &SegmentationMap, epsilon: f64, min_size: usize) -> Vec<DwellingPolygon> {
    let mut out = Vec::new();
    for class_id in 1..NUM_CLASSES as u8 {
        for comp in connected_components(map, class_id, min_size.max(1)) {
            let ring = trace_boundary(&comp.pixels).expect("components are non-empty");
            let ground: Vec<Point> = ring.iter().map(|p| map.transform.pixel_to_ground(p.x, p.y)).collect();
            let mut simple = simplify_topology_safe(&ground, epsilon);
            if geometry::signed_area(&simple) < 0.0 {
                simple.reverse();
            }
            let conf: f64 =
                comp.pixels.iter().map(|&(r, c)| map.confidence[r * map.width + c] as f64).sum::<f64>() / comp.pixels.len() as f64;
            out.push(DwellingPolygon { ring: simple, class_id, confidence: conf as f32, pixel_area: comp.pixels.len() });
        }
    }
    out
}

/// Paints polygons back onto a grid with the label rasterization rule.
pub fn rasterize_polygons(polygons: &[DwellingPolygon], width: usize, height: usize, transform: &GeoTransform) -> ClassMask {
    let rings: Vec<(&[Point], u8)> = polygons.iter().map(|p| (p.ring.as_slice(), p.class_id)).collect();
    crate::geodata::paint_rings(&rings, width, height, transform)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_from(rows: &[&str]) -> SegmentationMap {
        let h = rows.len();
        let w = rows[0].len();
        let classes = rows.iter().flat_map(|r| r.bytes().map(|b| b - b'0')).collect::<Vec<u8>>();
        SegmentationMap::from_mask(&ClassMask { width: w, height: h, data: classes }, GeoTransform::north_up(0.0, 0.0, 1.0))
    }

    fn pts(v: &[(f64, f64)]) -> Vec<Point> {
        v.iter().map(|&(x, y)| Point::new(x, y)).collect()
    }

    #[test]
    fn argmax_ties_and_confidence() {
        let logits = Tensor::<f32>::full(&[1, 8, 2, 3], 0.3);
        let map = argmax_map(&logits, GeoTransform::north_up(0.0, 0.0, 1.0)).unwrap();
        assert!(map.classes.iter().all(|&c| c == 0));
        assert!(map.confidence.iter().all(|&c| (c - 0.125).abs() < 1e-7));
        let mut dom = Tensor::<f32>::zeros(&[1, 8, 2, 2]);
        dom.data_mut()[5 * 4..6 * 4].fill(10.0);
        assert!(argmax_map(&dom, GeoTransform::north_up(0.0, 0.0, 1.0)).unwrap().classes.iter().all(|&c| c == 5));
        dom.data_mut()[0] = f32::NAN;
        assert!(argmax_map(&dom, GeoTransform::north_up(0.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn diagonal_pixels_join() {
        let map = map_from(&["10", "01"]);
        assert_eq!(connected_components(&map, 1, 1).len(), 1);
        let single = map_from(&["000", "010", "000"]);
        let comps = connected_components(&single, 1, 1);
        assert_eq!(comps, vec![Component { class_id: 1, pixels: vec![(1, 1)] }]);
        assert!(connected_components(&single, 1, 4).is_empty());
    }

    #[test]
    fn single_pixel_and_block_rings() {
        let ring = trace_boundary(&[(3, 2)]).unwrap();
        assert_eq!(ring, pts(&[(2.0, 3.0), (3.0, 3.0), (3.0, 4.0), (2.0, 4.0), (2.0, 3.0)]));
        let block = trace_boundary(&[(0, 0), (0, 1), (1, 0), (1, 1)]).unwrap();
        assert_eq!(block, pts(&[(0.0, 0.0), (2.0, 0.0), (2.0, 2.0), (0.0, 2.0), (0.0, 0.0)]));
        assert!(geometry::signed_area(&block) > 0.0);
        assert_eq!(trace_boundary(&[]), Err(VectorizeError::EmptyComponent));
    }

    #[test]
    fn pinch_corner_is_split() {
        let ring = trace_boundary(&[(0, 0), (1, 1)]).unwrap();
        assert!(geometry::is_simple_ring(&ring));
        assert_eq!(ring.len(), 9);
        assert!(geometry::contains(&ring, Point::new(0.5, 0.5)));
        assert!(geometry::contains(&ring, Point::new(1.5, 1.5)));
        assert!(!geometry::contains(&ring, Point::new(1.5, 0.5)));
        assert!(!geometry::contains(&ring, Point::new(0.5, 1.5)));
    }

    #[test]
    fn douglas_peucker_examples() {
        assert_eq!(douglas_peucker(&pts(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]), 0.0), pts(&[(0.0, 0.0), (2.0, 0.0)]));
        let wiggle = pts(&[(0.0, 0.0), (1.0, 0.1), (2.0, 0.0), (3.0, 0.1), (4.0, 0.0)]);
        assert_eq!(douglas_peucker(&wiggle, 0.2), pts(&[(0.0, 0.0), (4.0, 0.0)]));
        assert_eq!(douglas_peucker(&wiggle, 0.05), wiggle);
    }

    #[test]
    fn square_survives_any_epsilon() {
        let sq = pts(&[(0.0, 0.0), (4.0, 0.0), (4.0, 4.0), (0.0, 4.0), (0.0, 0.0)]);
        for eps in [0.0, 0.5, 3.0, 100.0] {
            assert_eq!(simplify_topology_safe(&sq, eps), sq);
        }
    }

    #[test]
    fn u_shape_backs_off() {
        // A thin U: collapsing either arm to its chord would cross the other.
        let u = pts(&[(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (9.0, 10.0), (9.0, 1.0), (1.0, 1.0), (1.0, 10.0), (0.0, 10.0), (0.0, 0.0)]);
        for eps in [0.5, 2.0, 5.0, 20.0] {
            let out = simplify_topology_safe(&u, eps);
            assert!(geometry::is_simple_ring(&out), "eps {eps}: {out:?}");
            assert!(geometry::signed_area(&out) > 0.0);
            assert!(out.len() <= u.len());
        }
    }

    #[test]
    fn ten_by_ten_block() {
        let mut rows = vec!["000000000000".to_string(); 12];
        for r in rows.iter_mut().take(11).skip(1) {
            *r = "011111111110".to_string();
        }
        let rows: Vec<&str> = rows.iter().map(String::as_str).collect();
        let mut map = map_from(&rows);
        map.transform = GeoTransform::north_up(100.0, 200.0, 0.5);
        let polys = polygonize(&map, 0.0);
        assert_eq!(polys.len(), 1);
        assert_eq!(polys[0].pixel_area, 100);
        assert_eq!(polys[0].ring.len(), 5);
        assert!(geometry::signed_area(&polys[0].ring) > 0.0);
        assert!(polys[0].ring.contains(&Point::new(100.5, 199.5)));
        assert!(polys[0].ring.contains(&Point::new(105.5, 194.5)));
        assert!(polygonize(&map_from(&["0000", "0000"]), 0.5).is_empty());
    }

    #[test]
    fn round_trip_with_pinches() {
        let map = map_from(&["1000220", "0100220", "0011000", "0000333", "3330333"]);
        let polys = polygonize_with(&map, 0.0, 1);
        let back = rasterize_polygons(&polys, map.width, map.height, &map.transform);
        assert_eq!(back.data, map.classes);
    }
}
