//! Feature matching: how strongly each shallow descriptor resembles every
//! descriptor of the deeper layers.
//!
//! For target layer `n` the query descriptors of `X(n)` and the key
//! descriptors of all deeper layers are embedded by 1x1 convolutions into
//! `c_n` channels, L2-normalized, compared by dot product (cosine) and
//! softmaxed per query row. The result is the row-stochastic
//! `m_n x d_n` matching matrix, where `m_n = h_n·w_n` and `d_n` counts every
//! deeper cell.

use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::rng::SplitMix64;
use crate::tensor::{
    conv1x1, l2_normalize_rows, map_to_matrix, matmul_nt, row_softmax, ConvWeights1x1, FeatureMap,
    Matrix, NORM_EPS,
};

/// Detection-layer feature maps ordered from shallowest to deepest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    layers: Vec<FeatureMap>,
}

/// Checks that resolutions never grow with depth and shrink at every step.
pub fn validate_pyramid_shapes(shapes: &[(usize, usize, usize)]) -> Result<()> {
    if shapes.is_empty() {
        return Err(Error::validation("pyramid", "needs at least one layer"));
    }
    for (n, &(h, w, c)) in shapes.iter().enumerate() {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::validation(
                format!("pyramid[{n}]"),
                format!("dimensions must be positive, got {h}x{w}x{c}"),
            ));
        }
    }
    for (n, pair) in shapes.windows(2).enumerate() {
        let ((h0, w0, _), (h1, w1, _)) = (pair[0], pair[1]);
        if h1 > h0 || w1 > w0 || (h1 == h0 && w1 == w0) {
            return Err(Error::validation(
                format!("pyramid[{}]", n + 1),
                format!(
                    "spatial resolution must decrease with depth: {h1}x{w1} after {h0}x{w0} \
                     (need h and w non-increasing, at least one strictly)"
                ),
            ));
        }
    }
    Ok(())
}

impl FeaturePyramid {
    pub fn new(layers: Vec<FeatureMap>) -> Result<Self> {
        let shapes: Vec<_> = layers.iter().map(FeatureMap::shape).collect();
        validate_pyramid_shapes(&shapes)?;
        Ok(FeaturePyramid { layers })
    }

    /// Synthetic pyramid with values uniform in `[-1, 1)`, drawn layer by
    /// layer in row-major order.
    pub fn seeded(shapes: &[(usize, usize, usize)], seed: u64) -> Result<Self> {
        validate_pyramid_shapes(shapes)?;
        let mut rng = SplitMix64::new(seed);
        let layers = shapes
            .iter()
            .map(|&(h, w, c)| {
                let mut data = vec![0.0; h * w * c];
                rng.fill_uniform(&mut data, -1.0, 1.0);
                FeatureMap::from_vec(h, w, c, data)
            })
            .collect::<Result<_>>()?;
        Ok(FeaturePyramid { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, n: usize) -> &FeatureMap {
        &self.layers[n]
    }

    pub fn layers(&self) -> &[FeatureMap] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<FeatureMap> {
        self.layers
    }

    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        self.layers.iter().map(FeatureMap::shape).collect()
    }

    /// `d_n`: number of descriptors in all layers deeper than `n`.
    pub fn deeper_cells(&self, n: usize) -> usize {
        self.layers[n + 1..].iter().map(FeatureMap::cells).sum()
    }

    pub(crate) fn check_has_deeper(&self, n: usize) -> Result<()> {
        if n + 1 >= self.layers.len() {
            return Err(Error::NoDeeperLayers {
                layer: n,
                depth: self.layers.len(),
            });
        }
        Ok(())
    }
}

/// Embedding weights of the matching block for one target layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FmbParams {
    /// Zero-based index of the target layer.
    pub target_layer: usize,
    /// `c_n -> c_n` query embedding.
    pub query: ConvWeights1x1,
    /// One `c_{n'} -> c_n` key embedding per deeper layer, in depth order.
    pub keys: Vec<ConvWeights1x1>,
}

impl FmbParams {
    /// Embeddings without bias for target layer `n` of a pyramid with `shapes`.
    pub fn init(shapes: &[(usize, usize, usize)], n: usize, init: &mut Initializer) -> Self {
        let c_n = shapes[n].2;
        FmbParams {
            target_layer: n,
            query: init.conv(c_n, c_n, false),
            keys: shapes[n + 1..]
                .iter()
                .map(|&(_, _, c)| init.conv(c, c_n, false))
                .collect(),
        }
    }

    pub fn validate(&self, p: &FeaturePyramid) -> Result<()> {
        let n = self.target_layer;
        p.check_has_deeper(n)?;
        let c_n = p.layer(n).c();
        if self.query.c_in() != c_n || self.query.c_out() != c_n {
            return Err(Error::shape(
                "fmb",
                format!(
                    "query embedding is {}->{}, layer {n} needs {c_n}->{c_n}",
                    self.query.c_in(),
                    self.query.c_out()
                ),
            ));
        }
        check_deeper_weights("fmb keys", p, n, &self.keys, c_n)
    }
}

/// Verifies one `c_{n'} -> c_out` weight per deeper layer.
pub(crate) fn check_deeper_weights(
    op: &'static str,
    p: &FeaturePyramid,
    n: usize,
    weights: &[ConvWeights1x1],
    c_out: usize,
) -> Result<()> {
    let deeper = &p.layers()[n + 1..];
    if weights.len() != deeper.len() {
        return Err(Error::shape(
            op,
            format!(
                "{} weights for {} deeper layers of layer {n}",
                weights.len(),
                deeper.len()
            ),
        ));
    }
    for (k, (w, x)) in weights.iter().zip(deeper).enumerate() {
        if w.c_in() != x.c() || w.c_out() != c_out {
            return Err(Error::shape(
                op,
                format!(
                    "weight for layer {} is {}->{}, expected {}->{c_out}",
                    n + 1 + k,
                    w.c_in(),
                    w.c_out(),
                    x.c()
                ),
            ));
        }
    }
    Ok(())
}

/// Applies one 1x1 convolution per deeper layer and stacks the flattened
/// results in depth order.
pub(crate) fn embed_and_stack(
    p: &FeaturePyramid,
    n: usize,
    weights: &[ConvWeights1x1],
) -> Result<Matrix> {
    let parts = p.layers()[n + 1..]
        .iter()
        .zip(weights)
        .map(|(x, w)| conv1x1(x, w).map(|y| map_to_matrix(&y)))
        .collect::<Result<Vec<_>>>()?;
    Matrix::vstack(&parts)
}

/// Embedded query descriptors of the target layer, `m_n x c_n`.
pub fn embed_query(p: &FeaturePyramid, params: &FmbParams) -> Result<Matrix> {
    params.validate(p)?;
    Ok(map_to_matrix(&conv1x1(
        p.layer(params.target_layer),
        &params.query,
    )?))
}

/// Embedded descriptors of layers `n+1..N`, each flattened row-major and
/// stacked in layer order, `d_n x c_n`.
pub fn embed_and_stack_keys(p: &FeaturePyramid, params: &FmbParams) -> Result<Matrix> {
    params.validate(p)?;
    embed_and_stack(p, params.target_layer, &params.keys)
}

/// Cosine similarity of every query row against every key row.
pub fn similarity_matrix(query: &Matrix, keys: &Matrix) -> Result<Matrix> {
    if query.cols() != keys.cols() {
        return Err(Error::shape(
            "similarity_matrix",
            format!(
                "query {}x{} vs keys {}x{}",
                query.rows(),
                query.cols(),
                keys.rows(),
                keys.cols()
            ),
        ));
    }
    matmul_nt(
        &l2_normalize_rows(query, NORM_EPS),
        &l2_normalize_rows(keys, NORM_EPS),
    )
}

/// Row-stochastic matching weights between a layer and all deeper layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingMatrix {
    values: Matrix,
}

impl MatchingMatrix {
    /// Wraps a matrix, checking rows are nonnegative and sum to one within `1e-9`.
    pub fn new(values: Matrix) -> Result<Self> {
        for r in 0..values.rows() {
            let row = values.row(r);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::validation(
                    "matching matrix",
                    format!("row {r} is not stochastic (sum {sum})"),
                ));
            }
        }
        Ok(MatchingMatrix { values })
    }

    /// Number of shallow descriptors `m_n`.
    pub fn m(&self) -> usize {
        self.values.rows()
    }

    /// Number of deeper descriptors `d_n`.
    pub fn d(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_matrix(self) -> Matrix {
        self.values
    }
}

/// Intermediate products of the matching block, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct MatchingTrace {
    pub query: Matrix,
    pub keys: Matrix,
    pub matching: MatchingMatrix,
}

pub(crate) fn matching_trace(p: &FeaturePyramid, params: &FmbParams) -> Result<MatchingTrace> {
    params.validate(p)?;
    let n = params.target_layer;
    let query = map_to_matrix(&conv1x1(p.layer(n), &params.query)?);
    let keys = embed_and_stack(p, n, &params.keys)?;
    let scores = similarity_matrix(&query, &keys)?;
    Ok(MatchingTrace {
        query,
        keys,
        matching: MatchingMatrix {
            values: row_softmax(&scores),
        },
    })
}

pub fn matching_matrix(p: &FeaturePyramid, params: &FmbParams) -> Result<MatchingMatrix> {
    Ok(matching_trace(p, params)?.matching)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::InitMode;

    fn fm(h: usize, w: usize, c: usize, data: Vec<f64>) -> FeatureMap {
        FeatureMap::from_vec(h, w, c, data).unwrap()
    }

    fn identity_params(shapes: &[(usize, usize, usize)], n: usize) -> FmbParams {
        FmbParams::init(shapes, n, &mut Initializer::new(InitMode::Identity, 0))
    }

    #[test]
    fn pyramid_validation() {
        assert!(validate_pyramid_shapes(&[(8, 8, 4), (4, 4, 6), (2, 2, 8)]).is_ok());
        assert!(validate_pyramid_shapes(&[(4, 4, 1), (4, 3, 1)]).is_ok());
        assert!(validate_pyramid_shapes(&[(4, 4, 1), (4, 4, 2)]).is_err());
        assert!(validate_pyramid_shapes(&[(2, 2, 1), (4, 4, 1)]).is_err());
        assert!(validate_pyramid_shapes(&[(4, 2, 1), (2, 3, 1)]).is_err());
        assert!(validate_pyramid_shapes(&[]).is_err());
    }

    #[test]
    fn single_deeper_cell_gives_single_key_row() {
        let x0 = fm(2, 2, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, -1.0, 2.0]);
        let x1 = fm(1, 1, 3, vec![0.5, -0.25, 2.0]);
        let p = FeaturePyramid::new(vec![x0, x1.clone()]).unwrap();
        let mut init = Initializer::new(InitMode::SeededUniform, 3);
        let params = FmbParams::init(&p.shapes(), 0, &mut init);
        let keys = embed_and_stack_keys(&p, &params).unwrap();
        assert_eq!(keys.shape(), (1, 2));
        let embedded = conv1x1(&x1, &params.keys[0]).unwrap();
        assert_eq!(keys.row(0), embedded.fiber(0, 0));
    }

    #[test]
    fn identity_keys_are_raw_descriptors() {
        let shapes = [(4, 4, 3), (2, 2, 3), (1, 1, 3)];
        let p = FeaturePyramid::seeded(&shapes, 11).unwrap();
        let keys = embed_and_stack_keys(&p, &identity_params(&shapes, 0)).unwrap();
        assert_eq!(keys.shape(), (5, 3));
        // Loop oracle: layer by layer, row-major cells.
        let mut expected = Vec::new();
        for x in &p.layers()[1..] {
            for i in 0..x.h() {
                for j in 0..x.w() {
                    expected.extend_from_slice(x.fiber(i, j));
                }
            }
        }
        assert_eq!(keys.data(), expected.as_slice());
    }

    #[test]
    fn deepest_layer_has_nothing_to_match() {
        let shapes = [(2, 2, 1), (1, 1, 1)];
        let p = FeaturePyramid::seeded(&shapes, 1).unwrap();
        let params = FmbParams {
            target_layer: 1,
            query: ConvWeights1x1::identity(1, 1),
            keys: vec![],
        };
        assert!(matches!(
            matching_matrix(&p, &params),
            Err(Error::NoDeeperLayers { layer: 1, depth: 2 })
        ));
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let shapes = [(2, 2, 2), (1, 1, 3)];
        let p = FeaturePyramid::seeded(&shapes, 1).unwrap();
        let mut params = identity_params(&shapes, 0);
        params.keys[0] = ConvWeights1x1::identity(2, 2);
        assert!(matches!(
            embed_and_stack_keys(&p, &params),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn similarity_examples() {
        let q = Matrix::from_rows(&[vec![0.3, -0.7, 1.1]]).unwrap();
        assert!((similarity_matrix(&q, &q).unwrap().get(0, 0) - 1.0).abs() < 1e-9);

        let a = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(similarity_matrix(&a, &b).unwrap().get(0, 0), 0.0);

        let a = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![6.0, 8.0]]).unwrap();
        assert!((similarity_matrix(&a, &b).unwrap().get(0, 0) - 1.0).abs() < 1e-12);

        assert!(similarity_matrix(&a, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn all_equal_descriptors_give_uniform_rows() {
        let shapes = [(3, 3, 2), (2, 2, 2), (1, 1, 2)];
        let layers = shapes
            .iter()
            .map(|&(h, w, c)| fm(h, w, c, vec![0.5; h * w * c]))
            .collect();
        let p = FeaturePyramid::new(layers).unwrap();
        let s = matching_matrix(&p, &identity_params(&shapes, 0)).unwrap();
        assert_eq!((s.m(), s.d()), (9, 5));
        for v in s.values().data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn collinear_key_dominates() {
        // Query (1,0) everywhere; keys (0,1), (0,-3), (2,0): cosines 0, 0, 1.
        let x1 = fm(1, 1, 2, vec![2.0, 0.0]);
        let x0 = fm(2, 2, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let deeper = fm(1, 2, 2, vec![0.0, 1.0, 0.0, -3.0]);
        let p = FeaturePyramid::new(vec![x0, deeper, x1]).unwrap();
        let s = matching_matrix(&p, &identity_params(&p.shapes(), 0)).unwrap();
        let e = 1f64.exp();
        let expected = [1.0 / (e + 2.0), 1.0 / (e + 2.0), e / (e + 2.0)];
        for r in 0..s.m() {
            for (t, want) in expected.iter().enumerate() {
                assert!((s.values().get(r, t) - want).abs() < 1e-12);
            }
        }
        assert!((e / (e + 2.0) - 0.5761).abs() < 1e-4);
        assert!((1.0 / (e + 2.0) - 0.2119).abs() < 1e-4);
    }

    #[test]
    fn matching_matrix_rejects_non_stochastic_input() {
        let bad = Matrix::from_rows(&[vec![0.7, 0.7]]).unwrap();
        assert!(MatchingMatrix::new(bad).is_err());
        let good = Matrix::from_rows(&[vec![0.25, 0.75]]).unwrap();
        assert!(MatchingMatrix::new(good).is_ok());
    }
}
