//! Planar ring and segment predicates shared by rasterization, vectorization
//! and risk features.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Ring stored with its closing point repeated (`first == last`).
pub fn is_closed(ring: &[Point]) -> bool {
    ring.len() >= 2 && ring[0] == ring[ring.len() - 1]
}

/// Shoelace area; positive for counter-clockwise rings in a y-up frame.
pub fn signed_area(ring: &[Point]) -> f64 {
    if ring.len() < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..ring.len() {
        let a = ring[i];
        let b = ring[(i + 1) % ring.len()];
        twice += a.x * b.y - b.x * a.y;
    }
    twice / 2.0
}

/// Area centroid of a ring; the vertex mean for degenerate rings.
pub fn centroid(ring: &[Point]) -> Point {
    let pts = open(ring);
    let area = signed_area(pts);
    if area.abs() < 1e-12 {
        let n = pts.len().max(1) as f64;
        return Point::new(pts.iter().map(|p| p.x).sum::<f64>() / n, pts.iter().map(|p| p.y).sum::<f64>() / n);
    }
    let (mut cx, mut cy) = (0.0, 0.0);
    for i in 0..pts.len() {
        let a = pts[i];
        let b = pts[(i + 1) % pts.len()];
        let cross = a.x * b.y - b.x * a.y;
        cx += (a.x + b.x) * cross;
        cy += (a.y + b.y) * cross;
    }
    Point::new(cx / (6.0 * area), cy / (6.0 * area))
}

/// The ring without its repeated closing point.
pub fn open(ring: &[Point]) -> &[Point] {
    if is_closed(ring) && ring.len() > 1 {
        &ring[..ring.len() - 1]
    } else {
        ring
    }
}

/// Even-odd containment with the half-open crossing rule.
pub fn contains(ring: &[Point], p: Point) -> bool {
    let pts = open(ring);
    let mut inside = false;
    let mut j = pts.len().wrapping_sub(1);
    for i in 0..pts.len() {
        let (a, b) = (pts[i], pts[j]);
        if (a.y > p.y) != (b.y > p.y) {
            let x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Closed-segment intersection test (touching counts).
pub fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

/// Brute-force simplicity check of a closed ring: no two non-adjacent edges
/// touch, adjacent edges meet only at their shared vertex, no repeated vertices.
pub fn is_simple_ring(ring: &[Point]) -> bool {
    let pts = open(ring);
    let n = pts.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        for j in i + 1..n {
            if pts[i] == pts[j] {
                return false;
            }
        }
    }
    let edge = |i: usize| (pts[i], pts[(i + 1) % n]);
    for i in 0..n {
        let (a, b) = edge(i);
        for j in i + 1..n {
            let (c, d) = edge(j);
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                // Shared vertex is fine; overlap (folding back) is not.
                let (shared, other_a, other_c) = if j == i + 1 { (b, a, d) } else { (a, b, c) };
                if orient(other_a, shared, other_c) == 0.0 {
                    let back = (other_a.x - shared.x) * (other_c.x - shared.x) + (other_a.y - shared.y) * (other_c.y - shared.y);
                    if back > 0.0 {
                        return false;
                    }
                }
                continue;
            }
            if segments_intersect(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

/// Distance from `p` to the closed segment `ab`.
pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return p.distance(a);
    }
    let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
    p.distance(Point::new(a.x + t * dx, a.y + t * dy))
}

pub fn segment_distance(a: Point, b: Point, c: Point, d: Point) -> f64 {
    if segments_intersect(a, b, c, d) {
        return 0.0;
    }
    point_segment_distance(a, c, d)
        .min(point_segment_distance(b, c, d))
        .min(point_segment_distance(c, a, b))
        .min(point_segment_distance(d, a, b))
}

/// Consecutive point pairs of a polyline or closed ring.
pub fn edges(points: &[Point]) -> impl Iterator<Item = (Point, Point)> + '_ {
    points.windows(2).map(|w| (w[0], w[1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x0: f64, y0: f64, s: f64) -> Vec<Point> {
        vec![Point::new(x0, y0), Point::new(x0 + s, y0), Point::new(x0 + s, y0 + s), Point::new(x0, y0 + s), Point::new(x0, y0)]
    }

    #[test]
    fn area_and_orientation() {
        let sq = square(0.0, 0.0, 2.0);
        assert_eq!(signed_area(&sq), 4.0);
        let rev: Vec<_> = sq.iter().rev().copied().collect();
        assert_eq!(signed_area(&rev), -4.0);
        let c = centroid(&sq);
        assert!((c.x - 1.0).abs() < 1e-12 && (c.y - 1.0).abs() < 1e-12);
    }

    #[test]
    fn even_odd_containment() {
        let sq = square(0.0, 0.0, 2.0);
        assert!(contains(&sq, Point::new(1.0, 1.0)));
        assert!(!contains(&sq, Point::new(3.0, 1.0)));
        assert!(!contains(&sq, Point::new(-0.5, 1.0)));
    }

    #[test]
    fn bowtie_is_not_simple() {
        let bow = vec![Point::new(0.0, 0.0), Point::new(2.0, 2.0), Point::new(2.0, 0.0), Point::new(0.0, 2.0), Point::new(0.0, 0.0)];
        assert!(!is_simple_ring(&bow));
        assert!(is_simple_ring(&square(0.0, 0.0, 1.0)));
    }

    #[test]
    fn folded_back_edge_is_not_simple() {
        let spike = vec![Point::new(0.0, 0.0), Point::new(2.0, 0.0), Point::new(1.0, 0.0), Point::new(1.0, 1.0), Point::new(0.0, 0.0)];
        assert!(!is_simple_ring(&spike));
    }

    #[test]
    fn segment_distances() {
        let d = segment_distance(Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(3.0, -1.0), Point::new(3.0, 1.0));
        assert!((d - 2.0).abs() < 1e-12);
        assert_eq!(segment_distance(Point::new(0.0, 0.0), Point::new(2.0, 2.0), Point::new(0.0, 2.0), Point::new(2.0, 0.0)), 0.0);
    }
}
