use featborrow::ingest::{ar_stats, nearest_rank, parse_annotations};
use featborrow::rf::{chain_geometry, LayerGeom};
use proptest::prelude::*;

fn layers() -> impl Strategy<Value = Vec<LayerGeom>> {
    prop::collection::vec((1usize..8, 1usize..4), 1..12).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (k, s))| LayerGeom::new(&format!("l{i}"), k, s, 0))
            .collect()
    })
}

fn coco(boxes: &[(f64, f64)]) -> String {
    let anns: Vec<String> = boxes
        .iter()
        .enumerate()
        .map(|(i, (w, h))| {
            format!(r#"{{"id": {i}, "image_id": 1, "category_id": 1, "bbox": [0, 0, {w}, {h}]}}"#)
        })
        .collect();
    format!(r#"{{"annotations": [{}]}}"#, anns.join(","))
}

proptest! {
    #[test]
    fn chains_compose(a in layers(), b in layers()) {
        let ga = chain_geometry(&a, None).unwrap();
        let gb = chain_geometry(&b, None).unwrap();
        let joined: Vec<_> = a.iter().chain(&b).cloned().collect();
        let g = chain_geometry(&joined, None).unwrap();
        prop_assert_eq!(g.stride, ga.stride * gb.stride);
        prop_assert_eq!(g.rf, ga.rf + (gb.rf - 1) * ga.stride);
    }

    #[test]
    fn unit_kernels_keep_rf(a in layers(), s in 1usize..4) {
        let mut with = a.clone();
        with.push(LayerGeom::new("pointwise", 1, s, 0));
        let g0 = chain_geometry(&a, None).unwrap();
        let g1 = chain_geometry(&with, None).unwrap();
        prop_assert_eq!(g0.rf, g1.rf);
        prop_assert_eq!(g1.stride, g0.stride * s);
    }

    #[test]
    fn percentiles_are_monotone_and_order_free(
        boxes in prop::collection::vec((1.0f64..100.0, 1.0f64..100.0), 1..60),
        rot in any::<prop::sample::Index>(),
    ) {
        let ps = [10.0, 25.0, 50.0, 75.0, 90.0, 99.0, 100.0];
        let a = ar_stats(&parse_annotations(&coco(&boxes)).unwrap(), &ps).unwrap();
        let values: Vec<f64> = a.percentiles.iter().map(|&(_, v)| v).collect();
        prop_assert!(values.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(values.iter().all(|&v| v >= 1.0));
        let mut rotated = boxes.clone();
        rotated.rotate_left(rot.index(boxes.len()));
        let b = ar_stats(&parse_annotations(&coco(&rotated)).unwrap(), &ps).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn outlier_percentiles_follow_sort_oracle() {
    let mut boxes: Vec<(f64, f64)> = (0..99)
        .map(|i| (10.0 + (i % 7) as f64, 10.0 + (i % 5) as f64))
        .collect();
    boxes.insert(37, (80.0, 10.0));
    let set = parse_annotations(&coco(&boxes)).unwrap();
    let mut sorted: Vec<f64> = boxes.iter().map(|(w, h)| (w / h).max(h / w)).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let stats = ar_stats(&set, &[50.0, 99.0, 100.0]).unwrap();
    assert_eq!(stats.percentiles[0].1, sorted[49]);
    assert_eq!(stats.percentiles[1].1, sorted[98]);
    assert_eq!(stats.percentiles[2].1, 8.0);
    assert!(sorted[98] < 8.0);
    assert_eq!(nearest_rank(&sorted, 99.0), sorted[98]);
}
