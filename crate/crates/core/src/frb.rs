//! Feature representing: the "borrowed" map of a shallow layer.
//!
//! Deeper descriptors are encapsulated to a common width `c` by per-layer
//! 1x1 convolutions and stacked in the same order as the matching keys.
//! Each shallow cell then receives the matching-weighted combination of
//! those value vectors, `Z = Ŝ · V`.

use crate::error::{Error, Result};
use crate::fmb::{check_deeper_weights, embed_and_stack, FeaturePyramid, MatchingMatrix};
use crate::init::Initializer;
use crate::tensor::{matmul, matrix_to_map, ConvWeights1x1, FeatureMap, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct FrbParams {
    pub target_layer: usize,
    pub c_common: usize,
    /// One `c_{n'} -> c_common` encapsulation per deeper layer.
    pub values: Vec<ConvWeights1x1>,
}

impl FrbParams {
    /// `c_common` defaults to the target layer's channel count.
    pub fn init(
        shapes: &[(usize, usize, usize)],
        n: usize,
        c_common: Option<usize>,
        with_bias: bool,
        init: &mut Initializer,
    ) -> Self {
        let c_common = c_common.unwrap_or(shapes[n].2);
        FrbParams {
            target_layer: n,
            c_common,
            values: shapes[n + 1..]
                .iter()
                .map(|&(_, _, c)| init.conv(c, c_common, with_bias))
                .collect(),
        }
    }

    pub fn validate(&self, p: &FeaturePyramid) -> Result<()> {
        p.check_has_deeper(self.target_layer)?;
        check_deeper_weights(
            "frb values",
            p,
            self.target_layer,
            &self.values,
            self.c_common,
        )
    }
}

/// The borrowed map `Z(n)`, shaped `h_n x w_n x c_common`.
#[derive(Debug, Clone, PartialEq)]
pub struct BorrowedMap {
    pub z: FeatureMap,
}

/// Encapsulated deeper descriptors stacked like the matching keys, `d_n x c`.
pub fn encapsulate_and_stack(p: &FeaturePyramid, params: &FrbParams) -> Result<Matrix> {
    params.validate(p)?;
    embed_and_stack(p, params.target_layer, &params.values)
}

pub fn borrow(s: &MatchingMatrix, values: &Matrix, h: usize, w: usize) -> Result<BorrowedMap> {
    if s.d() != values.rows() {
        return Err(Error::shape(
            "borrow",
            format!(
                "matching matrix is {}x{}, values are {}x{}",
                s.m(),
                s.d(),
                values.rows(),
                values.cols()
            ),
        ));
    }
    if s.m() != h * w {
        return Err(Error::shape(
            "borrow",
            format!("{} matching rows for a {h}x{w} layer", s.m()),
        ));
    }
    let z = matmul(s.values(), values)?;
    Ok(BorrowedMap {
        z: matrix_to_map(z, h, w)?,
    })
}
