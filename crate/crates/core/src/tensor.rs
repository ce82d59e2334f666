//! Dense rank-2 and rank-3 tensors in double precision.
//!
//! Feature maps are stored row-major as `(h, w, c)`, so the descriptor at
//! cell `(i, j)` is the contiguous fiber starting at `(i * w + j) * c`.
//! Flattening a map into a matrix uses the same order: row `i * w + j`.

use crate::error::{Error, Result};

/// Norm below which a row is treated as zero by [`l2_normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Domain {
            op,
            detail: format!("non-finite value {} at flat index {i}", data[i]),
        }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major values, rejecting empty shapes,
    /// length mismatches and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("empty shape {rows}x{cols}"),
            ));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!(
                    "{rows}x{cols} needs {} values, got {}",
                    rows * cols,
                    data.len()
                ),
            ));
        }
        check_finite("Matrix::from_vec", &data)?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Matrix::from_rows", "ragged rows"));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Stacks matrices with equal column counts along the first dimension.
    pub fn vstack(parts: &[Matrix]) -> Result<Matrix> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("vstack", "no matrices to stack"))?;
        let cols = first.cols;
        if let Some(bad) = parts.iter().find(|m| m.cols != cols) {
            return Err(Error::shape(
                "vstack",
                format!("column mismatch: {} vs {}", cols, bad.cols),
            ));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        max_abs_diff(&self.data, &other.data)
    }
}

pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "max_abs_diff length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        FeatureMap {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::shape(
                "FeatureMap::from_vec",
                format!("empty shape {h}x{w}x{c}"),
            ));
        }
        if data.len() != h * w * c {
            return Err(Error::shape(
                "FeatureMap::from_vec",
                format!("{h}x{w}x{c} needs {} values, got {}", h * w * c, data.len()),
            ));
        }
        check_finite("FeatureMap::from_vec", &data)?;
        Ok(FeatureMap { h, w, c, data })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    /// Number of descriptor vectors (spatial cells).
    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// The descriptor vector at cell `(i, j)`.
    pub fn fiber(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.w + j) * self.c;
        &self.data[start..start + self.c]
    }

    pub fn fiber_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let start = (i * self.w + j) * self.c;
        &mut self.data[start..start + self.c]
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.w + j) * self.c + k]
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> f64 {
        max_abs_diff(&self.data, &other.data)
    }
}

/// Weights of a 1x1 convolution: `w` is `c_in x c_out`, so an output fiber is
/// `wᵀ · fiber + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights1x1 {
    pub w: Matrix,
    pub bias: Option<Vec<f64>>,
}

impl ConvWeights1x1 {
    pub fn new(w: Matrix, bias: Option<Vec<f64>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != w.cols() {
                return Err(Error::shape(
                    "ConvWeights1x1::new",
                    format!("bias length {} for {} output channels", b.len(), w.cols()),
                ));
            }
            check_finite("ConvWeights1x1::new", b)?;
        }
        Ok(ConvWeights1x1 { w, bias })
    }

    /// Rectangular identity: channel `k` maps to channel `k` where both exist.
    pub fn identity(c_in: usize, c_out: usize) -> Self {
        let mut w = Matrix::zeros(c_in, c_out);
        for k in 0..c_in.min(c_out) {
            w.set(k, k, 1.0);
        }
        ConvWeights1x1 { w, bias: None }
    }

    pub fn zeros(c_in: usize, c_out: usize, with_bias: bool) -> Self {
        ConvWeights1x1 {
            w: Matrix::zeros(c_in, c_out),
            bias: with_bias.then(|| vec![0.0; c_out]),
        }
    }

    pub fn c_in(&self) -> usize {
        self.w.rows()
    }

    pub fn c_out(&self) -> usize {
        self.w.cols()
    }
}

/// Kernel of the fixed stride-2, 2x2 transposed convolution.
///
/// Layout is `[ki][kj][ci][co]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DeconvWeights {
    c_in: usize,
    c_out: usize,
    kernel: Vec<f64>,
}

impl DeconvWeights {
    pub const KERNEL: usize = 2;
    pub const STRIDE: usize = 2;

    pub fn new(c_in: usize, c_out: usize, kernel: Vec<f64>) -> Result<Self> {
        if c_in == 0 || c_out == 0 {
            return Err(Error::shape("DeconvWeights::new", "zero channel count"));
        }
        if kernel.len() != 4 * c_in * c_out {
            return Err(Error::shape(
                "DeconvWeights::new",
                format!(
                    "2x2x{c_in}x{c_out} kernel needs {} values, got {}",
                    4 * c_in * c_out,
                    kernel.len()
                ),
            ));
        }
        check_finite("DeconvWeights::new", &kernel)?;
        Ok(DeconvWeights {
            c_in,
            c_out,
            kernel,
        })
    }

    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        DeconvWeights {
            c_in,
            c_out,
            kernel: vec![0.0; 4 * c_in * c_out],
        }
    }

    /// Every kernel tap copies channel `k` to channel `k`.
    pub fn identity(c_in: usize, c_out: usize) -> Self {
        let mut d = DeconvWeights::zeros(c_in, c_out);
        for tap in 0..4 {
            for k in 0..c_in.min(c_out) {
                d.kernel[(tap * c_in + k) * c_out + k] = 1.0;
            }
        }
        d
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn kernel_mut(&mut self) -> &mut [f64] {
        &mut self.kernel
    }

    pub fn at(&self, ki: usize, kj: usize, ci: usize, co: usize) -> f64 {
        self.kernel[((ki * 2 + kj) * self.c_in + ci) * self.c_out + co]
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for r in 0..a.rows {
        let out_row = &mut out.data[r * b.cols..(r + 1) * b.cols];
        for (k, &av) in a.row(r).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(b.row(k)) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape(
            "matmul_nt",
            format!("{}x{} times ({}x{})ᵀ", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for r in 0..a.rows {
        let ar = a.row(r);
        for t in 0..b.rows {
            out.data[r * b.rows + t] = dot(ar, b.row(t));
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::shape(
            "matmul_tn",
            format!("({}x{})ᵀ times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let br = b.row(r);
        for (k, &av) in a.row(r).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out.data[k * b.cols..(k + 1) * b.cols].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax of every row, computed after subtracting the row maximum.
pub fn row_softmax(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Scales each row to unit Euclidean norm. Rows whose norm is below `eps`
/// come back as all zeros.
pub fn l2_normalize_rows(m: &Matrix, eps: f64) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let norm = dot(row, row).sqrt();
        if norm < eps {
            row.fill(0.0);
        } else {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

pub fn conv1x1(x: &FeatureMap, w: &ConvWeights1x1) -> Result<FeatureMap> {
    if x.c != w.c_in() {
        return Err(Error::shape(
            "conv1x1",
            format!("input has {} channels, weights expect {}", x.c, w.c_in()),
        ));
    }
    let flat = matmul(&map_to_matrix(x), &w.w)?;
    let mut out = matrix_to_map(flat, x.h, x.w)?;
    if let Some(bias) = &w.bias {
        for fiber in out.data.chunks_mut(w.c_out()) {
            for (v, b) in fiber.iter_mut().zip(bias) {
                *v += b;
            }
        }
    }
    Ok(out)
}

/// Offset of the top-left-biased center crop from `full` down to `target`.
pub(crate) fn crop_offset(full: usize, target: usize) -> usize {
    (full - target) / 2
}

/// Stride-2, 2x2 transposed convolution to a `2h x 2w` map, center-cropped
/// (top-left biased for odd margins) to `target_h x target_w`.
pub fn transposed_conv(
    x: &FeatureMap,
    w: &DeconvWeights,
    target_h: usize,
    target_w: usize,
) -> Result<FeatureMap> {
    if x.c != w.c_in {
        return Err(Error::shape(
            "transposed_conv",
            format!("input has {} channels, kernel expects {}", x.c, w.c_in),
        ));
    }
    if !(x.h..=2 * x.h).contains(&target_h) || !(x.w..=2 * x.w).contains(&target_w) {
        return Err(Error::shape(
            "transposed_conv",
            format!(
                "target {target_h}x{target_w} outside [{}, {}] x [{}, {}]",
                x.h,
                2 * x.h,
                x.w,
                2 * x.w
            ),
        ));
    }
    let (oi, oj) = (
        crop_offset(2 * x.h, target_h),
        crop_offset(2 * x.w, target_w),
    );
    let mut out = FeatureMap::zeros(target_h, target_w, w.c_out);
    for i in 0..x.h {
        for j in 0..x.w {
            let fiber = x.fiber(i, j);
            for ki in 0..2 {
                let Some(r) = (2 * i + ki).checked_sub(oi).filter(|&r| r < target_h) else {
                    continue;
                };
                for kj in 0..2 {
                    let Some(c) = (2 * j + kj).checked_sub(oj).filter(|&c| c < target_w) else {
                        continue;
                    };
                    let dst = out.fiber_mut(r, c);
                    for (ci, &xv) in fiber.iter().enumerate() {
                        let taps = &w.kernel[((ki * 2 + kj) * w.c_in + ci) * w.c_out..][..w.c_out];
                        for (d, &k) in dst.iter_mut().zip(taps) {
                            *d += xv * k;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Concatenates maps with equal spatial size along the channel dimension.
pub fn concat_channels(xs: &[&FeatureMap]) -> Result<FeatureMap> {
    let first = xs
        .first()
        .ok_or_else(|| Error::shape("concat_channels", "no maps to concatenate"))?;
    let (h, w) = (first.h, first.w);
    if let Some(bad) = xs.iter().find(|m| m.h != h || m.w != w) {
        return Err(Error::shape(
            "concat_channels",
            format!("spatial mismatch: {h}x{w} vs {}x{}", bad.h, bad.w),
        ));
    }
    let c: usize = xs.iter().map(|m| m.c).sum();
    let mut data = Vec::with_capacity(h * w * c);
    for cell in 0..h * w {
        for m in xs {
            data.extend_from_slice(&m.data[cell * m.c..(cell + 1) * m.c]);
        }
    }
    Ok(FeatureMap { h, w, c, data })
}

/// Unrolls a map into an `(h·w) x c` matrix, row `i·w + j` holding fiber `(i, j)`.
pub fn map_to_matrix(x: &FeatureMap) -> Matrix {
    Matrix {
        rows: x.h * x.w,
        cols: x.c,
        data: x.data.clone(),
    }
}

pub fn matrix_to_map(m: Matrix, h: usize, w: usize) -> Result<FeatureMap> {
    if h == 0 || w == 0 || m.rows != h * w {
        return Err(Error::shape(
            "matrix_to_map",
            format!("{} rows cannot form a {h}x{w} map", m.rows),
        ));
    }
    Ok(FeatureMap {
        h,
        w,
        c: m.cols,
        data: m.data,
    })
}
