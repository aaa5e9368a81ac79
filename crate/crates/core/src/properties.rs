//! Property tests over tiling, simplification, metrics and scoring.

use proptest::prelude::*;

use crate::geodata::{ClassLegend, ClassMask, GeoRaster, GeoTransform};
use crate::geometry::{self, Point};
use crate::metrics;
use crate::risk::{self, ScoringConfig};
use crate::tiler;
use crate::vectorize::{self, SegmentationMap};

fn points(max: usize) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec((-100.0..100.0f64, -100.0..100.0f64).prop_map(|(x, y)| Point::new(x, y)), 0..max)
}

/// Is `sub` a subsequence of `full`?
fn is_subsequence(sub: &[Point], full: &[Point]) -> bool {
    let mut it = full.iter();
    sub.iter().all(|p| it.any(|q| q == p))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_counts_partition_the_tiles(n in 0usize..5000, a in 0.05..1.0f64, b in 0.05..1.0f64, c in 0.05..1.0f64) {
        let sum = a + b + c;
        let (tr, va, te) = tiler::split_counts(n, (a / sum, b / sum, c / sum)).unwrap();
        prop_assert_eq!(tr + va + te, n);
    }

    #[test]
    fn seeded_permutation_is_deterministic_and_complete(n in 1usize..60, seed in any::<u64>()) {
        let order = |s| tiler::seeded_permutation(n, s);
        prop_assert_eq!(order(seed), order(seed));
        let mut sorted = order(seed);
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn tiles_reassemble_exactly(w in 1usize..130, h in 1usize..130, seed in any::<u64>(), size_idx in 0usize..2) {
        let size = [32, 64][size_idx];
        let data: Vec<u8> = (0..w * h * 3).map(|i| (i as u64).wrapping_mul(seed | 1).wrapping_shr(7) as u8).collect();
        let raster = GeoRaster::new(w, h, 3, data, GeoTransform::north_up(0.0, 0.0, 1.0)).unwrap();
        let mask = ClassMask { width: w, height: h, data: (0..w * h).map(|i| ((i as u64 ^ seed) % 8) as u8).collect() };
        let tiles = tiler::tile_raster(&raster, &mask, size, "a").unwrap();
        prop_assert_eq!(tiles.len(), w.div_ceil(size) * h.div_ceil(size));
        let (r, m) = tiler::reassemble(&tiles, w, h).unwrap();
        prop_assert!(r == raster && m == mask);
    }

    #[test]
    fn douglas_peucker_is_a_subsequence_keeping_endpoints(pts in points(50), eps in 0.0..40.0f64) {
        let out = vectorize::douglas_peucker(&pts, eps);
        prop_assert!(is_subsequence(&out, &pts));
        if let (Some(first), Some(last)) = (pts.first(), pts.last()) {
            prop_assert_eq!(out.first(), Some(first));
            prop_assert_eq!(out.last(), Some(last));
        }
        // Zero tolerance drops only points lying exactly on their chord.
        prop_assert!(vectorize::douglas_peucker(&pts, 0.0).len() >= out.len());
    }

    #[test]
    fn topology_safe_simplification_keeps_orientation(
        cells in prop::collection::vec((0usize..12, 0usize..12), 1..40),
        eps in 0.0..5.0f64,
    ) {
        let mut mask = ClassMask::zeros(12, 12);
        for (r, c) in cells {
            mask.set(r, c, 3);
        }
        let map = SegmentationMap::from_mask(&mask, GeoTransform::north_up(100.0, 200.0, 0.5));
        for poly in vectorize::polygonize_with(&map, 0.0, 1) {
            let out = vectorize::simplify_topology_safe(&poly.ring, eps);
            prop_assert!(geometry::is_closed(&out) && geometry::is_simple_ring(&out));
            prop_assert!(geometry::signed_area(&out) > 0.0);
            prop_assert!(is_subsequence(&out, &poly.ring));
        }
    }

    #[test]
    fn weighted_metrics_are_fractions(
        pairs in prop::collection::vec((0u8..8, 0u8..8, any::<bool>()), 1..300),
    ) {
        let pred: Vec<u8> = pairs.iter().map(|p| p.0).collect();
        let truth: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        let mut valid: Vec<bool> = pairs.iter().map(|p| p.2).collect();
        valid[0] = true;
        let cm = metrics::confusion(&pred, &truth, &valid).unwrap();
        let (acc, iou) = (metrics::weighted_accuracy(&cm), metrics::weighted_iou(&cm));
        prop_assert!((0.0..=1.0).contains(&acc) && (0.0..=1.0).contains(&iou));
        prop_assert!(iou <= acc + 1e-12);
        let same = metrics::confusion(&truth, &truth, &valid).unwrap();
        prop_assert_eq!(metrics::weighted_iou(&same), 1.0);
    }

    #[test]
    fn risk_scores_stay_in_range(class in 1u8..8, depth in 0.0..10.0f64, water in 0.0..1000.0f64) {
        let s = risk::risk_score(class, &ClassLegend::default(), depth, water, &ScoringConfig::default()).unwrap();
        prop_assert!((1..=5).contains(&s));
    }
}
