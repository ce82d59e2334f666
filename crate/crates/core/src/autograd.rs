//! Hand-written reverse-mode gradients of a squared-error surrogate loss with
//! respect to every learnable tensor, plus a central-difference checker.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ffb::{forward_trace, BorrowNetParams, EnhancedPyramid, ParamId, ParamKind};
use crate::fmb::FeaturePyramid;
use crate::tensor::{
    concat_channels, crop_offset, dot, l2_normalize_rows, map_to_matrix, matmul, matmul_nt,
    matmul_tn, ConvWeights1x1, FeatureMap, Matrix, NORM_EPS,
};

/// Floor of the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Gradients laid out exactly like the parameters they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients(pub BorrowNetParams);

impl ParamGradients {
    pub fn tensors(&self) -> Vec<(ParamId, &[f64])> {
        self.0.tensors()
    }

    pub fn tensors_mut(&mut self) -> Vec<(ParamId, &mut [f64])> {
        self.0.tensors_mut()
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.tensors()
            .into_iter()
            .find(|(i, _)| *i == id)
            .map(|(_, t)| t)
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `½ Σ (Y − T)²` over every layer and cell.
pub fn sq_loss(y: &EnhancedPyramid, target: &EnhancedPyramid) -> Result<f64> {
    if y.shapes() != target.shapes() {
        return Err(Error::shape(
            "sq_loss",
            format!("{:?} vs {:?}", y.shapes(), target.shapes()),
        ));
    }
    Ok(y.layers
        .iter()
        .zip(&target.layers)
        .flat_map(|(a, b)| a.data().iter().zip(b.data()))
        .map(|(a, b)| 0.5 * (a - b) * (a - b))
        .sum())
}

fn loss_of(p: &FeaturePyramid, params: &BorrowNetParams, target: &EnhancedPyramid) -> Result<f64> {
    sq_loss(&forward_trace(p, params)?.output, target)
}

fn column_slice(m: &Matrix, start: usize, len: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), len);
    for r in 0..m.rows() {
        out.row_mut(r)
            .copy_from_slice(&m.row(r)[start..start + len]);
    }
    out
}

fn row_slice(m: &Matrix, start: usize, len: usize) -> Matrix {
    let data = m.data()[start * m.cols()..(start + len) * m.cols()].to_vec();
    Matrix::from_vec(len, m.cols(), data).expect("row slice of a valid matrix")
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut sums = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (s, v) in sums.iter_mut().zip(m.row(r)) {
            *s += v;
        }
    }
    sums
}

/// Accumulates the weight (and bias) gradient of `y = conv1x1(x)` given `dy`.
fn conv_backward(x: &Matrix, dy: &Matrix, grad: &mut ConvWeights1x1) -> Result<()> {
    let gw = matmul_tn(x, dy)?;
    for (g, v) in grad.w.data_mut().iter_mut().zip(gw.data()) {
        *g += v;
    }
    if let Some(gb) = &mut grad.bias {
        for (g, v) in gb.iter_mut().zip(column_sums(dy)) {
            *g += v;
        }
    }
    Ok(())
}

/// Backward of row-wise L2 normalization: `(g − u (u·g)) / ‖x‖`, zero for
/// guarded rows.
fn l2_normalize_backward(x: &Matrix, du: &Matrix) -> Matrix {
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let norm = dot(row, row).sqrt();
        if norm < NORM_EPS {
            continue;
        }
        let g = du.row(r);
        let ug = dot(row, g) / norm;
        for ((d, &xv), &gv) in dx.row_mut(r).iter_mut().zip(row).zip(g) {
            *d = (gv - xv / norm * ug) / norm;
        }
    }
    dx
}

/// Backward of the row softmax in Jacobian-vector form.
fn softmax_backward(s: &Matrix, ds: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(s.rows(), s.cols());
    for r in 0..s.rows() {
        let (sr, gr) = (s.row(r), ds.row(r));
        let inner = dot(sr, gr);
        for ((o, &p), &g) in out.row_mut(r).iter_mut().zip(sr).zip(gr) {
            *o = p * (g - inner);
        }
    }
    out
}

/// Splits stacked deeper-layer rows and accumulates each layer's weight gradient.
fn stacked_backward(
    p: &FeaturePyramid,
    n: usize,
    d_stack: &Matrix,
    grads: &mut [ConvWeights1x1],
) -> Result<()> {
    let mut offset = 0;
    for (x, g) in p.layers()[n + 1..].iter().zip(grads) {
        let part = row_slice(d_stack, offset, x.cells());
        conv_backward(&map_to_matrix(x), &part, g)?;
        offset += x.cells();
    }
    Ok(())
}

/// Loss and exact gradients of [`sq_loss`] of the forward pass against `target`.
pub fn backward(
    p: &FeaturePyramid,
    params: &BorrowNetParams,
    target: &EnhancedPyramid,
) -> Result<(f64, ParamGradients)> {
    let trace = forward_trace(p, params)?;
    let ys = &trace.output.layers;
    let loss = sq_loss(&trace.output, target)?;
    let mut grads = params.zeros_like();

    // dL/dY per layer, starting from the residual error.
    let mut d_ys: Vec<Vec<f64>> = ys
        .iter()
        .zip(&target.layers)
        .map(|(y, t)| y.data().iter().zip(t.data()).map(|(a, b)| a - b).collect())
        .collect();

    // Y(n) feeds only Y(n-1) through the context path, so shallow-to-deep
    // order sees each dL/dY(n) complete before it is used.
    for n in 0..trace.layers.len() {
        let lt = &trace.layers[n];
        let lp = &params.layers[n];
        let g = &mut grads.layers[n];
        let x = p.layer(n);
        let (c_n, c_common, c_ctx) = (x.c(), lp.frb.c_common, lp.ffb.c_ctx);

        let d_out = Matrix::from_vec(x.cells(), c_n, d_ys[n].clone())?;

        // Combination layer.
        let cat = concat_channels(&[x, &lt.borrowed.z, &lt.context])?;
        conv_backward(&map_to_matrix(&cat), &d_out, &mut g.ffb.combine)?;
        let d_cat = matmul_nt(&d_out, &lp.ffb.combine.w)?;
        let d_z = column_slice(&d_cat, c_n, c_common);
        let d_ctx = column_slice(&d_cat, c_n + c_common, c_ctx);

        // Context deconvolution: kernel gradient and dL/dY(n+1).
        let deeper = &ys[n + 1];
        let (oi, oj) = (
            crop_offset(2 * deeper.h(), x.h()),
            crop_offset(2 * deeper.w(), x.w()),
        );
        let c_deep = deeper.c();
        let mut d_deeper = FeatureMap::zeros(deeper.h(), deeper.w(), c_deep);
        let d_kernel = g.ffb.deconv.kernel_mut();
        let kernel = lp.ffb.deconv.kernel();
        for i in 0..deeper.h() {
            for j in 0..deeper.w() {
                let fiber = deeper.fiber(i, j);
                let d_fiber = d_deeper.fiber_mut(i, j);
                for ki in 0..2 {
                    let Some(r) = (2 * i + ki).checked_sub(oi).filter(|&r| r < x.h()) else {
                        continue;
                    };
                    for kj in 0..2 {
                        let Some(c) = (2 * j + kj).checked_sub(oj).filter(|&c| c < x.w()) else {
                            continue;
                        };
                        let d_cell = d_ctx.row(r * x.w() + c);
                        for ci in 0..c_deep {
                            let base = ((ki * 2 + kj) * c_deep + ci) * c_ctx;
                            let taps = &kernel[base..base + c_ctx];
                            d_fiber[ci] += dot(taps, d_cell);
                            for (dk, &dv) in d_kernel[base..base + c_ctx].iter_mut().zip(d_cell) {
                                *dk += fiber[ci] * dv;
                            }
                        }
                    }
                }
            }
        }
        for (acc, v) in d_ys[n + 1].iter_mut().zip(d_deeper.data()) {
            *acc += v;
        }

        // Borrowing: Z = Ŝ · V.
        let s_hat = lt.matching.values();
        let d_s_hat = matmul_nt(&d_z, &lt.values)?;
        let d_values = matmul_tn(s_hat, &d_z)?;
        stacked_backward(p, n, &d_values, &mut g.frb.values)?;

        // Matching: Ŝ = softmax(norm(Q) · norm(K)ᵀ).
        let d_scores = softmax_backward(s_hat, &d_s_hat);
        let q_unit = l2_normalize_rows(&lt.query, NORM_EPS);
        let k_unit = l2_normalize_rows(&lt.keys, NORM_EPS);
        let d_q_unit = matmul(&d_scores, &k_unit)?;
        let d_k_unit = matmul_tn(&d_scores, &q_unit)?;
        let d_query = l2_normalize_backward(&lt.query, &d_q_unit);
        let d_keys = l2_normalize_backward(&lt.keys, &d_k_unit);
        conv_backward(&map_to_matrix(x), &d_query, &mut g.fmb.query)?;
        stacked_backward(p, n, &d_keys, &mut g.fmb.keys)?;
    }
    Ok((loss, ParamGradients(grads)))
}

/// `(f(x + eps) − f(x − eps)) / (2 eps)`.
pub fn central_difference<F: Fn(f64) -> f64>(f: F, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

/// Central-difference estimate of every parameter gradient, one pair of
/// forward passes per scalar. With `threads > 1` the probes run on a rayon
/// pool; each result lands in its own slot, so output does not depend on
/// scheduling.
pub fn finite_difference(
    p: &FeaturePyramid,
    params: &BorrowNetParams,
    target: &EnhancedPyramid,
    eps: f64,
    threads: usize,
) -> Result<ParamGradients> {
    if !(eps > 0.0) {
        return Err(Error::Domain {
            op: "finite_difference",
            detail: format!("step must be positive, got {eps}"),
        });
    }
    params.validate(p)?;
    let slots: Vec<(usize, usize)> = params
        .tensors()
        .iter()
        .enumerate()
        .flat_map(|(t, (_, v))| (0..v.len()).map(move |k| (t, k)))
        .collect();

    let probe = |&(t, k): &(usize, usize)| -> Result<f64> {
        let mut shifted = params.clone();
        let at = |delta: f64, shifted: &mut BorrowNetParams| -> Result<f64> {
            shifted.tensors_mut()[t].1[k] = params.tensors()[t].1[k] + delta;
            loss_of(p, shifted, target)
        };
        let plus = at(eps, &mut shifted)?;
        let minus = at(-eps, &mut shifted)?;
        Ok((plus - minus) / (2.0 * eps))
    };

    let estimates: Vec<f64> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Domain {
                op: "finite_difference",
                detail: format!("thread pool: {e}"),
            })?;
        pool.install(|| slots.par_iter().map(probe).collect::<Result<_>>())?
    } else {
        slots.iter().map(probe).collect::<Result<_>>()?
    };

    let mut grads = params.zeros_like();
    let mut tensors = grads.tensors_mut();
    for (&(t, k), v) in slots.iter().zip(estimates) {
        tensors[t].1[k] = v;
    }
    drop(tensors);
    Ok(ParamGradients(grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub id: ParamId,
    pub max_rel: f64,
    pub max_abs: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub groups: Vec<GroupError>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failing(&self) -> impl Iterator<Item = &GroupError> {
        self.groups.iter().filter(|g| !g.passed)
    }

    pub fn worst_rel(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel).fold(0.0, f64::max)
    }

    /// Largest relative error among groups of one kind.
    pub fn worst_rel_for(&self, kind: ParamKind) -> Option<f64> {
        self.groups
            .iter()
            .filter(|g| g.id.kind == kind)
            .map(|g| g.max_rel)
            .reduce(f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "gradient check (eps {:e}, tol {:e})", self.eps, self.tol)?;
        writeln!(
            f,
            "{:<32} {:>12} {:>12}  status",
            "group", "max rel", "max abs"
        )?;
        for g in &self.groups {
            writeln!(
                f,
                "{:<32} {:>12.3e} {:>12.3e}  {}",
                g.id.to_string(),
                g.max_rel,
                g.max_abs,
                if g.passed { "ok" } else { "FAIL" }
            )?;
        }
        write!(f, "overall: {}", if self.passed { "PASS" } else { "FAIL" })
    }
}

/// Per-tensor comparison of analytic and numeric gradients.
///
/// The relative error of a group is the largest entrywise
/// `|g_a − g_fd| / max(1e-8, |g_a| + |g_fd|)`.
pub fn compare_gradients(
    analytic: &ParamGradients,
    numeric: &ParamGradients,
    eps: f64,
    tol: f64,
) -> GradCheckReport {
    let groups: Vec<GroupError> = analytic
        .tensors()
        .into_iter()
        .zip(numeric.tensors())
        .map(|((id, a), (_, fd))| {
            let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
            for (&ga, &gf) in a.iter().zip(fd) {
                let diff = (ga - gf).abs();
                max_abs = max_abs.max(diff);
                max_rel = max_rel.max(diff / (ga.abs() + gf.abs()).max(REL_ERR_FLOOR));
            }
            GroupError {
                id,
                max_rel,
                max_abs,
                passed: max_rel < tol,
            }
        })
        .collect();
    let passed = groups.iter().all(|g| g.passed);
    GradCheckReport {
        eps,
        tol,
        groups,
        passed,
    }
}

pub fn gradcheck(
    p: &FeaturePyramid,
    params: &BorrowNetParams,
    target: &EnhancedPyramid,
    eps: f64,
    tol: f64,
    threads: usize,
) -> Result<GradCheckReport> {
    if !(tol > 0.0) {
        return Err(Error::Domain {
            op: "gradcheck",
            detail: format!("tolerance must be positive, got {tol}"),
        });
    }
    let (_, analytic) = backward(p, params, target)?;
    let numeric = finite_difference(p, params, target, eps, threads)?;
    Ok(compare_gradients(&analytic, &numeric, eps, tol))
}
