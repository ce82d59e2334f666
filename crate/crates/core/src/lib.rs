//! Cross-layer feature borrowing for multi-scale detection pyramids.
//!
//! Shallow detection layers match their descriptors against every deeper
//! descriptor ([`fmb`]), build a matching-weighted "borrowed" map from
//! encapsulated deeper features ([`frb`]) and fuse original, borrowed and
//! deconvolved context features through a residual 1x1 projection
//! ([`ffb`]). [`autograd`] differentiates the whole pass by hand and checks
//! it against central differences.
//!
//! The crate also carries the anchor-design side of a single-shot detector:
//! the maximum-aspect-ratio rule, equal-proportion scales and IoU coverage
//! audits ([`anchors`]), receptive-field arithmetic ([`rf`]) and COCO
//! annotation statistics ([`ingest`]).

// `!(x > 0.0)` style checks are deliberate: they reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anchors;
pub mod autograd;
pub mod error;
pub mod ffb;
pub mod fmb;
pub mod frb;
pub mod ingest;
pub mod init;
pub mod rf;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use ffb::{
    forward_pyramid, BorrowNetParams, EnhancedPyramid, ForwardStatus, InitOptions, ParamId,
    ParamKind,
};
pub use fmb::{FeaturePyramid, MatchingMatrix};
pub use init::InitMode;
pub use tensor::{ConvWeights1x1, DeconvWeights, FeatureMap, Matrix};
