#![allow(dead_code)]

pub mod oracle;

use featborrow::{BorrowNetParams, FeaturePyramid, InitMode, InitOptions};
use proptest::prelude::*;

pub type Shapes = Vec<(usize, usize, usize)>;

/// Pyramid shapes of depth 2..=4 with dims <= 8 where every step shrinks
/// the resolution by at most a factor of two.
pub fn pyramid_shapes() -> impl Strategy<Value = Shapes> {
    (
        2usize..=8,
        2usize..=8,
        prop::collection::vec((any::<bool>(), any::<bool>(), 1usize..=8), 2..=4),
    )
        .prop_map(|(h0, w0, steps)| {
            let (mut h, mut w) = (h0, w0);
            let mut shapes = vec![(h, w, steps[0].2)];
            for &(halve_h, halve_w, c) in &steps[1..] {
                let mut nh = if halve_h { h.div_ceil(2) } else { h };
                let mut nw = if halve_w { w.div_ceil(2) } else { w };
                if (nh, nw) == (h, w) {
                    if h > 1 {
                        nh = h.div_ceil(2).min(h - 1);
                    } else if w > 1 {
                        nw = w.div_ceil(2).min(w - 1);
                    } else {
                        break;
                    }
                }
                h = nh;
                w = nw;
                shapes.push((h, w, c));
            }
            shapes
        })
        .prop_filter("needs two layers", |s| s.len() >= 2)
}

pub fn seeded(shapes: &Shapes, seed: u64) -> (FeaturePyramid, BorrowNetParams) {
    let p = FeaturePyramid::seeded(shapes, seed).unwrap();
    let params = BorrowNetParams::init(
        shapes,
        InitOptions::new(InitMode::SeededUniform, seed ^ 0x5eed),
    );
    (p, params)
}

/// Like [`seeded`] but with weights large enough that matching is far from
/// uniform.
pub fn sharp(shapes: &Shapes, seed: u64) -> (FeaturePyramid, BorrowNetParams) {
    let (p, mut params) = seeded(shapes, seed);
    for (_, t) in params.tensors_mut() {
        t.iter_mut().for_each(|v| *v *= 20.0);
    }
    (p, params)
}
