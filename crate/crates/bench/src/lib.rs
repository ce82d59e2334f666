//! Shared fixtures for the criterion benchmarks.

use featborrow::{BorrowNetParams, EnhancedPyramid, FeaturePyramid, InitMode, InitOptions};

/// SSD300-like detection grids with narrow channels.
pub const SSD_LIKE: [(usize, usize, usize); 4] = [(38, 38, 8), (19, 19, 8), (10, 10, 8), (5, 5, 8)];

pub const SMALL: [(usize, usize, usize); 3] = [(8, 8, 4), (4, 4, 6), (2, 2, 8)];

pub fn fixture(
    shapes: &[(usize, usize, usize)],
    seed: u64,
) -> (FeaturePyramid, BorrowNetParams, EnhancedPyramid) {
    let p = FeaturePyramid::seeded(shapes, seed).expect("valid bench shapes");
    let params = BorrowNetParams::init(shapes, InitOptions::new(InitMode::SeededUniform, seed + 1));
    let target = FeaturePyramid::seeded(shapes, seed + 2)
        .expect("valid bench shapes")
        .into();
    (p, params, target)
}
