mod common;

use common::{oracle, pyramid_shapes, seeded, sharp};
use featborrow::fmb::{embed_and_stack_keys, embed_query, matching_matrix, similarity_matrix};
use featborrow::frb::{borrow, encapsulate_and_stack};
use featborrow::{
    forward_pyramid, ConvWeights1x1, FeatureMap, FeaturePyramid, MatchingMatrix, Matrix,
};
use proptest::prelude::*;

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Row-stochastic `m x d` matrix from arbitrary logits.
fn stochastic(m: usize, d: usize, logits: &[f64]) -> MatchingMatrix {
    let raw = Matrix::from_vec(m, d, logits.to_vec()).unwrap();
    MatchingMatrix::new(featborrow::tensor::row_softmax(&raw)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matching_rows_are_stochastic(shapes in pyramid_shapes(), seed in any::<u64>()) {
        let (p, params) = sharp(&shapes, seed);
        for lp in &params.layers {
            let s = matching_matrix(&p, &lp.fmb).unwrap();
            prop_assert_eq!(s.m(), p.layer(lp.fmb.target_layer).cells());
            prop_assert_eq!(s.d(), p.deeper_cells(lp.fmb.target_layer));
            for i in 0..s.m() {
                let row = s.values().row(i);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            }
            let raw = similarity_matrix(&embed_query(&p, &lp.fmb).unwrap(), &embed_and_stack_keys(&p, &lp.fmb).unwrap()).unwrap();
            prop_assert!(raw.data().iter().all(|v| v.abs() <= 1.0 + 1e-9));
        }
    }

    #[test]
    fn matching_ignores_descriptor_scale(shapes in pyramid_shapes(), seed in any::<u64>(), alpha in 0.01f64..100.0) {
        let (p, params) = sharp(&shapes, seed);
        let scaled = FeaturePyramid::new(
            p.layers().iter().map(|l| {
                let d = l.data().iter().map(|v| v * alpha).collect();
                FeatureMap::from_vec(l.h(), l.w(), l.c(), d).unwrap()
            }).collect(),
        ).unwrap();
        let lp = &params.layers[0];
        let a = matching_matrix(&p, &lp.fmb).unwrap();
        let b = matching_matrix(&scaled, &lp.fmb).unwrap();
        prop_assert!(a.values().max_abs_diff(b.values()) <= 1e-9);
    }

    #[test]
    fn permuting_deeper_cells_permutes_columns(shapes in pyramid_shapes(), seed in any::<u64>(), rot in 1usize..64) {
        let (p, params) = sharp(&shapes, seed);
        let n = shapes.len() - 2;
        let deeper = p.layer(n + 1);
        let cells = deeper.cells();
        let perm: Vec<usize> = (0..cells).map(|k| (k + rot) % cells).collect();
        let mut moved = FeatureMap::zeros(deeper.h(), deeper.w(), deeper.c());
        for (k, &src) in perm.iter().enumerate() {
            let c = deeper.c();
            moved.data_mut()[k * c..(k + 1) * c].copy_from_slice(&deeper.data()[src * c..(src + 1) * c]);
        }
        let mut layers = p.layers().to_vec();
        layers[n + 1] = moved;
        let q = FeaturePyramid::new(layers).unwrap();
        let lp = &params.layers[n];
        let a = matching_matrix(&p, &lp.fmb).unwrap();
        let b = matching_matrix(&q, &lp.fmb).unwrap();
        for i in 0..a.m() {
            for (k, &src) in perm.iter().enumerate() {
                prop_assert!((b.values().get(i, k) - a.values().get(i, src)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn borrowed_rows_stay_in_value_hull(
        (m, d, c, logits, vals) in (1usize..10, 1usize..10, 1usize..6).prop_flat_map(|(m, d, c)| (
            Just(m), Just(d), Just(c),
            prop::collection::vec(-8.0f64..8.0, m * d),
            prop::collection::vec(-5.0f64..5.0, d * c),
        ))
    ) {
        let s = stochastic(m, d, &logits);
        let v = Matrix::from_vec(d, c, vals).unwrap();
        let z = borrow(&s, &v, m, 1).unwrap().z;
        for ch in 0..c {
            let col: Vec<f64> = (0..d).map(|r| v.get(r, ch)).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..m {
                let zv = z.get(i, 0, ch);
                prop_assert!(zv >= lo - 1e-12 && zv <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn borrowing_is_permutation_invariant(
        (m, d, c, logits, vals, rot) in (1usize..10, 1usize..10, 1usize..6).prop_flat_map(|(m, d, c)| (
            Just(m), Just(d), Just(c),
            prop::collection::vec(-8.0f64..8.0, m * d),
            prop::collection::vec(-5.0f64..5.0, d * c),
            0..d,
        ))
    ) {
        let s = stochastic(m, d, &logits);
        let v = Matrix::from_vec(d, c, vals).unwrap();
        let perm: Vec<usize> = (0..d).map(|k| (d - 1 - k + rot) % d).collect();
        let mut s2 = Matrix::zeros(m, d);
        let mut v2 = Matrix::zeros(d, c);
        for (k, &src) in perm.iter().enumerate() {
            for i in 0..m { s2.set(i, k, s.values().get(i, src)); }
            for ch in 0..c { v2.set(k, ch, v.get(src, ch)); }
        }
        let a = borrow(&s, &v, m, 1).unwrap().z;
        let b = borrow(&MatchingMatrix::new(s2).unwrap(), &v2, m, 1).unwrap().z;
        prop_assert!(a.max_abs_diff(&b) <= 1e-9);
    }

    #[test]
    fn forward_matches_monolithic_oracle(shapes in pyramid_shapes(), seed in any::<u64>()) {
        let (p, params) = sharp(&shapes, seed);
        let y = forward_pyramid(&p, &params).unwrap();
        let (want, _) = oracle::forward(&p, &params);
        for (got, want) in y.layers.iter().zip(&want) {
            prop_assert!(max_diff(got.data(), want) <= 1e-9);
        }
    }

    #[test]
    fn forward_preserves_shapes_and_top_layer(shapes in pyramid_shapes(), seed in any::<u64>()) {
        let (p, params) = seeded(&shapes, seed);
        let y = forward_pyramid(&p, &params).unwrap();
        prop_assert_eq!(y.shapes(), shapes.clone());
        let top = shapes.len() - 1;
        prop_assert_eq!(&y.layers[top], p.layer(top));
    }

    #[test]
    fn zero_combination_is_identity(shapes in pyramid_shapes(), seed in any::<u64>()) {
        let (p, mut params) = seeded(&shapes, seed);
        for lp in &mut params.layers {
            lp.ffb.combine = ConvWeights1x1::zeros(lp.ffb.combine.c_in(), lp.ffb.combine.c_out(), true);
        }
        let y = forward_pyramid(&p, &params).unwrap();
        for (a, b) in y.layers.iter().zip(p.layers()) {
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn combine_perturbation_stays_at_and_above_its_layer(shapes in pyramid_shapes(), seed in any::<u64>(), pick in any::<prop::sample::Index>()) {
        let (p, params) = seeded(&shapes, seed);
        let n = pick.index(params.layers.len());
        let mut bumped = params.clone();
        bumped.layers[n].ffb.combine.w.data_mut()[0] += 0.5;
        let a = forward_pyramid(&p, &params).unwrap();
        let b = forward_pyramid(&p, &bumped).unwrap();
        for m in n + 1..shapes.len() {
            prop_assert_eq!(&a.layers[m], &b.layers[m]);
        }
        prop_assert!(a.layers[n] != b.layers[n]);
    }
}

#[test]
fn matrix_form_borrowing_equals_summation_loop() {
    for seed in 0..50u64 {
        let shapes = vec![(6, 6, 3), (3, 3, 5), (2, 2, 4)];
        let (p, params) = sharp(&shapes, seed);
        let lp = &params.layers[0];
        let s = matching_matrix(&p, &lp.fmb).unwrap();
        let v = encapsulate_and_stack(&p, &lp.frb).unwrap();
        let z = borrow(&s, &v, 6, 6).unwrap().z;
        for i in 0..s.m() {
            for ch in 0..v.cols() {
                let mut acc = 0.0;
                for k in 0..s.d() {
                    acc += s.values().get(i, k) * v.get(k, ch);
                }
                assert!((z.data()[i * v.cols() + ch] - acc).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn identical_descriptor_scores_one() {
    let q = [0.3, -1.2, 0.7];
    let mut shallow = vec![0.0; 2 * 2 * 3];
    shallow[..3].copy_from_slice(&q);
    let deep = FeatureMap::from_vec(1, 1, 3, q.to_vec()).unwrap();
    let p =
        FeaturePyramid::new(vec![FeatureMap::from_vec(2, 2, 3, shallow).unwrap(), deep]).unwrap();
    let fmb = featborrow::fmb::FmbParams {
        target_layer: 0,
        query: ConvWeights1x1::identity(3, 3),
        keys: vec![ConvWeights1x1::identity(3, 3)],
    };
    let raw = similarity_matrix(
        &embed_query(&p, &fmb).unwrap(),
        &embed_and_stack_keys(&p, &fmb).unwrap(),
    )
    .unwrap();
    assert!((raw.get(0, 0) - 1.0).abs() <= 1e-9);
}

#[test]
fn matching_agrees_with_oracle() {
    let shapes = vec![(8, 8, 4), (4, 4, 6), (2, 2, 8)];
    let (p, params) = sharp(&shapes, 3);
    let (_, want) = oracle::forward(&p, &params);
    for (lp, rows) in params.layers.iter().zip(&want) {
        let s = matching_matrix(&p, &lp.fmb).unwrap();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        assert!(max_diff(s.values().data(), &flat) <= 1e-12);
    }
}
