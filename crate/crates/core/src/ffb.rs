//! Feature fusion and the top-down pass over a whole pyramid.
//!
//! `Y(N) = X(N)`; for shallower layers
//! `Y(n) = X(n) + C_n [X(n), Z(n), D_n(Y(n+1))]`, where `Z(n)` is the
//! borrowed map, `D_n` the stride-2 transposed convolution and `C_n` a 1x1
//! projection back to `c_n` channels. Matching and borrowing read the
//! original maps `X`; only the context path reads the enhanced `Y(n+1)`.

use std::fmt;

use crate::error::{Error, Result};
use crate::fmb::{matching_trace, FeaturePyramid, FmbParams, MatchingMatrix};
use crate::frb::{borrow, encapsulate_and_stack, BorrowedMap, FrbParams};
use crate::init::{InitMode, Initializer};
use crate::tensor::{
    concat_channels, conv1x1, transposed_conv, ConvWeights1x1, DeconvWeights, FeatureMap, Matrix,
};

#[derive(Debug, Clone, PartialEq)]
pub struct FfbParams {
    pub target_layer: usize,
    pub c_ctx: usize,
    /// `c_{n+1} -> c_ctx` deconvolution.
    pub deconv: DeconvWeights,
    /// `(c_n + c_common + c_ctx) -> c_n` combination layer.
    pub combine: ConvWeights1x1,
}

impl FfbParams {
    pub fn init(
        shapes: &[(usize, usize, usize)],
        n: usize,
        c_common: usize,
        c_ctx: Option<usize>,
        combine_bias: bool,
        init: &mut Initializer,
    ) -> Self {
        let c_n = shapes[n].2;
        let c_ctx = c_ctx.unwrap_or(c_n);
        FfbParams {
            target_layer: n,
            c_ctx,
            deconv: init.deconv(shapes[n + 1].2, c_ctx),
            combine: init.conv(c_n + c_common + c_ctx, c_n, combine_bias),
        }
    }

    fn validate(&self, p: &FeaturePyramid, c_common: usize) -> Result<()> {
        let n = self.target_layer;
        p.check_has_deeper(n)?;
        let (c_n, c_deep) = (p.layer(n).c(), p.layer(n + 1).c());
        if self.deconv.c_in() != c_deep || self.deconv.c_out() != self.c_ctx {
            return Err(Error::shape(
                "ffb",
                format!(
                    "deconvolution is {}->{}, layer {n} needs {c_deep}->{}",
                    self.deconv.c_in(),
                    self.deconv.c_out(),
                    self.c_ctx
                ),
            ));
        }
        let c_cat = c_n + c_common + self.c_ctx;
        if self.combine.c_in() != c_cat || self.combine.c_out() != c_n {
            return Err(Error::shape(
                "ffb",
                format!(
                    "combination is {}->{}, layer {n} needs {c_cat}->{c_n}",
                    self.combine.c_in(),
                    self.combine.c_out()
                ),
            ));
        }
        Ok(())
    }
}

/// The three blocks attached to one non-top layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub fmb: FmbParams,
    pub frb: FrbParams,
    pub ffb: FfbParams,
}

/// Parameters for layers `0..N-1`; the deepest layer has none.
#[derive(Debug, Clone, PartialEq)]
pub struct BorrowNetParams {
    pub layers: Vec<LayerParams>,
}

/// Knobs for [`BorrowNetParams::init`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitOptions {
    pub mode: InitMode,
    pub seed: u64,
    /// Encapsulation width; defaults to each target layer's `c_n`.
    pub c_common: Option<usize>,
    /// Context width; defaults to each target layer's `c_n`.
    pub c_ctx: Option<usize>,
    pub value_bias: bool,
    pub combine_bias: bool,
}

impl InitOptions {
    pub fn new(mode: InitMode, seed: u64) -> Self {
        InitOptions {
            mode,
            seed,
            c_common: None,
            c_ctx: None,
            value_bias: false,
            combine_bias: true,
        }
    }
}

/// What a parameter tensor is, for naming gradient groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKind {
    QueryWeight,
    QueryBias,
    KeyWeight,
    KeyBias,
    ValueWeight,
    ValueBias,
    DeconvKernel,
    CombineWeight,
    CombineBias,
}

impl ParamKind {
    pub fn label(self) -> &'static str {
        match self {
            ParamKind::QueryWeight => "query.w",
            ParamKind::QueryBias => "query.b",
            ParamKind::KeyWeight => "key.w",
            ParamKind::KeyBias => "key.b",
            ParamKind::ValueWeight => "value.w",
            ParamKind::ValueBias => "value.b",
            ParamKind::DeconvKernel => "deconv.k",
            ParamKind::CombineWeight => "combine.w",
            ParamKind::CombineBias => "combine.b",
        }
    }
}

/// Address of one parameter tensor inside [`BorrowNetParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId {
    pub layer: usize,
    pub kind: ParamKind,
    /// Which deeper layer, for per-deeper-layer weights.
    pub source: Option<usize>,
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.source {
            Some(s) => write!(f, "layer{}.{}[from {}]", self.layer, self.kind.label(), s),
            None => write!(f, "layer{}.{}", self.layer, self.kind.label()),
        }
    }
}

fn push_conv<'a>(
    out: &mut Vec<(ParamId, &'a [f64])>,
    layer: usize,
    source: Option<usize>,
    (wk, bk): (ParamKind, ParamKind),
    conv: &'a ConvWeights1x1,
) {
    out.push((
        ParamId {
            layer,
            kind: wk,
            source,
        },
        conv.w.data(),
    ));
    if let Some(b) = &conv.bias {
        out.push((
            ParamId {
                layer,
                kind: bk,
                source,
            },
            b.as_slice(),
        ));
    }
}

fn push_conv_mut<'a>(
    out: &mut Vec<(ParamId, &'a mut [f64])>,
    layer: usize,
    source: Option<usize>,
    (wk, bk): (ParamKind, ParamKind),
    conv: &'a mut ConvWeights1x1,
) {
    out.push((
        ParamId {
            layer,
            kind: wk,
            source,
        },
        conv.w.data_mut(),
    ));
    if let Some(b) = &mut conv.bias {
        out.push((
            ParamId {
                layer,
                kind: bk,
                source,
            },
            b.as_mut_slice(),
        ));
    }
}

const QUERY: (ParamKind, ParamKind) = (ParamKind::QueryWeight, ParamKind::QueryBias);
const KEY: (ParamKind, ParamKind) = (ParamKind::KeyWeight, ParamKind::KeyBias);
const VALUE: (ParamKind, ParamKind) = (ParamKind::ValueWeight, ParamKind::ValueBias);
const COMBINE: (ParamKind, ParamKind) = (ParamKind::CombineWeight, ParamKind::CombineBias);

impl BorrowNetParams {
    pub fn init(shapes: &[(usize, usize, usize)], opts: InitOptions) -> Self {
        let mut init = Initializer::new(opts.mode, opts.seed);
        let layers = (0..shapes.len().saturating_sub(1))
            .map(|n| {
                let fmb = FmbParams::init(shapes, n, &mut init);
                let frb = FrbParams::init(shapes, n, opts.c_common, opts.value_bias, &mut init);
                let ffb = FfbParams::init(
                    shapes,
                    n,
                    frb.c_common,
                    opts.c_ctx,
                    opts.combine_bias,
                    &mut init,
                );
                LayerParams { fmb, frb, ffb }
            })
            .collect();
        BorrowNetParams { layers }
    }

    pub fn validate(&self, p: &FeaturePyramid) -> Result<()> {
        let expected = p.depth().saturating_sub(1);
        if self.layers.len() != expected {
            return Err(Error::shape(
                "BorrowNetParams",
                format!(
                    "{} layer parameter sets for a {}-layer pyramid (need {expected})",
                    self.layers.len(),
                    p.depth()
                ),
            ));
        }
        for (n, lp) in self.layers.iter().enumerate() {
            if lp.fmb.target_layer != n || lp.frb.target_layer != n || lp.ffb.target_layer != n {
                return Err(Error::shape(
                    "BorrowNetParams",
                    format!("parameter set {n} targets a different layer"),
                ));
            }
            lp.fmb.validate(p)?;
            lp.frb.validate(p)?;
            lp.ffb.validate(p, lp.frb.c_common)?;
        }
        Ok(())
    }

    /// Every parameter tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(ParamId, &[f64])> {
        let mut out = Vec::new();
        for (n, lp) in self.layers.iter().enumerate() {
            push_conv(&mut out, n, None, QUERY, &lp.fmb.query);
            for (k, w) in lp.fmb.keys.iter().enumerate() {
                push_conv(&mut out, n, Some(n + 1 + k), KEY, w);
            }
            for (k, w) in lp.frb.values.iter().enumerate() {
                push_conv(&mut out, n, Some(n + 1 + k), VALUE, w);
            }
            let id = ParamId {
                layer: n,
                kind: ParamKind::DeconvKernel,
                source: None,
            };
            out.push((id, lp.ffb.deconv.kernel()));
            push_conv(&mut out, n, None, COMBINE, &lp.ffb.combine);
        }
        out
    }

    /// Same order as [`BorrowNetParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(ParamId, &mut [f64])> {
        let mut out = Vec::new();
        for (n, lp) in self.layers.iter_mut().enumerate() {
            push_conv_mut(&mut out, n, None, QUERY, &mut lp.fmb.query);
            for (k, w) in lp.fmb.keys.iter_mut().enumerate() {
                push_conv_mut(&mut out, n, Some(n + 1 + k), KEY, w);
            }
            for (k, w) in lp.frb.values.iter_mut().enumerate() {
                push_conv_mut(&mut out, n, Some(n + 1 + k), VALUE, w);
            }
            let id = ParamId {
                layer: n,
                kind: ParamKind::DeconvKernel,
                source: None,
            };
            out.push((id, lp.ffb.deconv.kernel_mut()));
            push_conv_mut(&mut out, n, None, COMBINE, &mut lp.ffb.combine);
        }
        out
    }

    /// Same structure with every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardStatus {
    Ok,
    /// Single-layer pyramid: nothing to borrow from, output equals input.
    NoDeeperLayers,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhancedPyramid {
    pub layers: Vec<FeatureMap>,
    pub status: ForwardStatus,
}

impl EnhancedPyramid {
    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        self.layers.iter().map(FeatureMap::shape).collect()
    }
}

impl From<FeaturePyramid> for EnhancedPyramid {
    fn from(p: FeaturePyramid) -> Self {
        EnhancedPyramid {
            layers: p.into_layers(),
            status: ForwardStatus::Ok,
        }
    }
}

/// Decodes the enhanced deeper map to the target layer's resolution.
pub fn context_deconv(
    y_deeper: &FeatureMap,
    params: &FfbParams,
    target_h: usize,
    target_w: usize,
) -> Result<FeatureMap> {
    let (h, w) = (y_deeper.h(), y_deeper.w());
    if target_h > 2 * h || target_w > 2 * w {
        return Err(Error::UnsupportedGeometry {
            detail: format!(
                "{h}x{w} -> {target_h}x{target_w} exceeds the 2x upsampling of one deconvolution"
            ),
        });
    }
    transposed_conv(y_deeper, &params.deconv, target_h, target_w)
}

/// `Y = X + C [X, Z, ctx]`.
pub fn fuse_layer(
    x: &FeatureMap,
    z: &BorrowedMap,
    ctx: &FeatureMap,
    params: &FfbParams,
) -> Result<FeatureMap> {
    if params.combine.c_out() != x.c() {
        return Err(Error::shape(
            "fuse_layer",
            format!(
                "combination outputs {} channels, residual needs {}",
                params.combine.c_out(),
                x.c()
            ),
        ));
    }
    let cat = concat_channels(&[x, &z.z, ctx])?;
    let mut y = conv1x1(&cat, &params.combine)?;
    for (out, &orig) in y.data_mut().iter_mut().zip(x.data()) {
        *out += orig;
    }
    Ok(y)
}

/// Everything computed for one non-top layer during the forward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerTrace {
    pub query: Matrix,
    pub keys: Matrix,
    pub matching: MatchingMatrix,
    pub values: Matrix,
    pub borrowed: BorrowedMap,
    pub context: FeatureMap,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardTrace {
    pub output: EnhancedPyramid,
    /// Indexed by layer, `0..N-1`.
    pub layers: Vec<LayerTrace>,
}

pub(crate) fn forward_trace(p: &FeaturePyramid, params: &BorrowNetParams) -> Result<ForwardTrace> {
    params.validate(p)?;
    let depth = p.depth();
    if depth == 1 {
        return Ok(ForwardTrace {
            output: EnhancedPyramid {
                layers: p.layers().to_vec(),
                status: ForwardStatus::NoDeeperLayers,
            },
            layers: Vec::new(),
        });
    }
    let mut ys: Vec<Option<FeatureMap>> = vec![None; depth];
    ys[depth - 1] = Some(p.layer(depth - 1).clone());
    let mut traces: Vec<Option<LayerTrace>> = vec![None; depth - 1];
    for n in (0..depth - 1).rev() {
        let lp = &params.layers[n];
        let x = p.layer(n);
        let m = matching_trace(p, &lp.fmb)?;
        let values = encapsulate_and_stack(p, &lp.frb)?;
        let borrowed = borrow(&m.matching, &values, x.h(), x.w())?;
        let deeper = ys[n + 1].as_ref().expect("deeper layer computed first");
        let context = context_deconv(deeper, &lp.ffb, x.h(), x.w())?;
        ys[n] = Some(fuse_layer(x, &borrowed, &context, &lp.ffb)?);
        traces[n] = Some(LayerTrace {
            query: m.query,
            keys: m.keys,
            matching: m.matching,
            values,
            borrowed,
            context,
        });
    }
    Ok(ForwardTrace {
        output: EnhancedPyramid {
            layers: ys.into_iter().map(Option::unwrap).collect(),
            status: ForwardStatus::Ok,
        },
        layers: traces.into_iter().map(Option::unwrap).collect(),
    })
}

pub fn forward_pyramid(p: &FeaturePyramid, params: &BorrowNetParams) -> Result<EnhancedPyramid> {
    Ok(forward_trace(p, params)?.output)
}

/// Forward pass that also returns the matching matrix of every non-top layer.
pub fn forward_with_matchings(
    p: &FeaturePyramid,
    params: &BorrowNetParams,
) -> Result<(EnhancedPyramid, Vec<MatchingMatrix>)> {
    let trace = forward_trace(p, params)?;
    let matchings = trace.layers.into_iter().map(|t| t.matching).collect();
    Ok((trace.output, matchings))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SHAPES: [(usize, usize, usize); 3] = [(8, 8, 4), (4, 4, 6), (2, 2, 8)];

    fn seeded_params(seed: u64) -> BorrowNetParams {
        BorrowNetParams::init(&SHAPES, InitOptions::new(InitMode::SeededUniform, seed))
    }

    #[test]
    fn zero_deeper_map_gives_zero_context() {
        let params = seeded_params(1);
        let ctx = context_deconv(&FeatureMap::zeros(4, 4, 6), &params.layers[0].ffb, 8, 8).unwrap();
        assert!(ctx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_cell_context_is_constant() {
        let ffb = FfbParams {
            target_layer: 0,
            c_ctx: 1,
            deconv: DeconvWeights::new(1, 1, vec![1.0; 4]).unwrap(),
            combine: ConvWeights1x1::zeros(3, 1, false),
        };
        let y = FeatureMap::from_vec(1, 1, 1, vec![-0.75]).unwrap();
        let ctx = context_deconv(&y, &ffb, 2, 2).unwrap();
        assert_eq!(ctx.data(), &[-0.75; 4]);
    }

    #[test]
    fn ssd_style_19_from_10() {
        let ffb = FfbParams {
            target_layer: 0,
            c_ctx: 2,
            deconv: DeconvWeights::identity(2, 2),
            combine: ConvWeights1x1::zeros(6, 2, false),
        };
        let y = FeatureMap::from_vec(10, 10, 2, (0..200).map(f64::from).collect()).unwrap();
        let ctx = context_deconv(&y, &ffb, 19, 19).unwrap();
        assert_eq!(ctx.shape(), (19, 19, 2));
        let full = context_deconv(&y, &ffb, 20, 20).unwrap();
        for i in 0..19 {
            for j in 0..19 {
                assert_eq!(ctx.fiber(i, j), full.fiber(i, j));
                assert_eq!(ctx.fiber(i, j), y.fiber(i / 2, j / 2));
            }
        }
    }

    #[test]
    fn ratio_above_two_is_unsupported() {
        let params = seeded_params(1);
        let err = context_deconv(&FeatureMap::zeros(2, 2, 6), &params.layers[0].ffb, 8, 8);
        assert!(matches!(err, Err(Error::UnsupportedGeometry { .. })));
    }

    #[test]
    fn fuse_with_zero_combination_is_residual_identity() {
        let x = FeatureMap::from_vec(1, 2, 2, vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        let z = BorrowedMap {
            z: FeatureMap::from_vec(1, 2, 1, vec![5.0, 6.0]).unwrap(),
        };
        let ctx = FeatureMap::from_vec(1, 2, 1, vec![7.0, 8.0]).unwrap();
        let ffb = FfbParams {
            target_layer: 0,
            c_ctx: 1,
            deconv: DeconvWeights::zeros(1, 1),
            combine: ConvWeights1x1::zeros(4, 2, false),
        };
        assert_eq!(fuse_layer(&x, &z, &ctx, &ffb).unwrap(), x);
    }

    #[test]
    fn fuse_can_pass_the_borrowed_slice_through() {
        // c_n = c_common = c_ctx = 2; combine selects the Z block.
        let x = FeatureMap::zeros(2, 1, 2);
        let z = BorrowedMap {
            z: FeatureMap::from_vec(2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        };
        let ctx = FeatureMap::from_vec(2, 1, 2, vec![9.0; 4]).unwrap();
        let mut w = Matrix::zeros(6, 2);
        w.set(2, 0, 1.0);
        w.set(3, 1, 1.0);
        let ffb = FfbParams {
            target_layer: 0,
            c_ctx: 2,
            deconv: DeconvWeights::zeros(2, 2),
            combine: ConvWeights1x1::new(w, None).unwrap(),
        };
        assert_eq!(fuse_layer(&x, &z, &ctx, &ffb).unwrap(), z.z);
    }

    #[test]
    fn fuse_rejects_mismatched_maps() {
        let x = FeatureMap::zeros(2, 2, 1);
        let z = BorrowedMap {
            z: FeatureMap::zeros(2, 1, 1),
        };
        let ctx = FeatureMap::zeros(2, 2, 1);
        let ffb = FfbParams {
            target_layer: 0,
            c_ctx: 1,
            deconv: DeconvWeights::zeros(1, 1),
            combine: ConvWeights1x1::zeros(3, 1, false),
        };
        assert!(matches!(
            fuse_layer(&x, &z, &ctx, &ffb),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn forward_preserves_shapes_and_top_layer() {
        let p = FeaturePyramid::seeded(&SHAPES, 7).unwrap();
        let y = forward_pyramid(&p, &seeded_params(8)).unwrap();
        assert_eq!(y.shapes(), p.shapes());
        assert_eq!(y.layers[2], *p.layer(2));
        assert!(y
            .layers
            .iter()
            .all(|l| l.data().iter().all(|v| v.is_finite())));
        assert_eq!(y.status, ForwardStatus::Ok);
        assert_ne!(y.layers[0], *p.layer(0));
    }

    #[test]
    fn single_layer_pyramid_passes_through() {
        let p = FeaturePyramid::seeded(&[(3, 3, 2)], 7).unwrap();
        let params =
            BorrowNetParams::init(&p.shapes(), InitOptions::new(InitMode::SeededUniform, 1));
        assert!(params.layers.is_empty());
        let y = forward_pyramid(&p, &params).unwrap();
        assert_eq!(y.layers, p.layers());
        assert_eq!(y.status, ForwardStatus::NoDeeperLayers);
    }

    #[test]
    fn params_depth_mismatch_is_rejected() {
        let p = FeaturePyramid::seeded(&SHAPES[..2], 7).unwrap();
        assert!(forward_pyramid(&p, &seeded_params(1)).is_err());
    }

    #[test]
    fn tensor_views_agree() {
        let mut params = seeded_params(3);
        let ids: Vec<_> = params
            .tensors()
            .iter()
            .map(|(id, t)| (*id, t.len()))
            .collect();
        let ids_mut: Vec<_> = params
            .tensors_mut()
            .iter()
            .map(|(id, t)| (*id, t.len()))
            .collect();
        assert_eq!(ids, ids_mut);
        // 2 layers: query, keys, values, deconv, combine w + b.
        let kinds: Vec<_> = ids
            .iter()
            .filter(|(id, _)| id.layer == 0)
            .map(|(id, _)| id.kind)
            .collect();
        assert_eq!(
            kinds,
            vec![
                ParamKind::QueryWeight,
                ParamKind::KeyWeight,
                ParamKind::KeyWeight,
                ParamKind::ValueWeight,
                ParamKind::ValueWeight,
                ParamKind::DeconvKernel,
                ParamKind::CombineWeight,
                ParamKind::CombineBias,
            ]
        );
        assert_eq!(params.zeros_like().scalar_count(), params.scalar_count());
    }
}
