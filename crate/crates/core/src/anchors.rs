//! Anchor design for single-shot detection layers.
//!
//! Scales follow an equal-proportion (geometric) progression with a second,
//! interleaved square set at the geometric means of neighbouring scales.
//! Aspect ratios are bounded by the maximum-AR rule
//!
//! ```text
//! mAR_anchor = mAR_obj · max{ (2 / (1 + 1/IoU))², IoU / (2 − 2·IoU), IoU }
//! ```
//!
//! and audited by IoU coverage of sampled objects. The coverage model is
//! translation-free: each object sits on the center of its best anchor, so
//! only shapes matter.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Axis-aligned box given by center and size, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Box {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0)
            || !cx.is_finite()
            || !cy.is_finite()
            || !w.is_finite()
            || !h.is_finite()
        {
            return Err(Error::validation(
                "box",
                format!("needs finite center and positive size, got ({cx}, {cy}, {w}, {h})"),
            ));
        }
        Ok(Box { cx, cy, w, h })
    }

    /// Box of side `scale` (geometric mean of w and h) and aspect ratio `ar = w/h`.
    pub fn from_scale_ar(cx: f64, cy: f64, scale: f64, ar: f64) -> Self {
        let r = ar.sqrt();
        Box {
            cx,
            cy,
            w: scale * r,
            h: scale / r,
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn aspect_ratio(&self) -> f64 {
        self.w / self.h
    }
}

pub fn iou(a: &Box, b: &Box) -> f64 {
    let overlap = |c1: f64, s1: f64, c2: f64, s2: f64| {
        let lo = (c1 - s1 / 2.0).max(c2 - s2 / 2.0);
        let hi = (c1 + s1 / 2.0).min(c2 + s2 / 2.0);
        (hi - lo).max(0.0)
    };
    let inter = overlap(a.cx, a.w, b.cx, b.w) * overlap(a.cy, a.h, b.cy, b.h);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// The three candidate factors of the maximum-AR rule at a given IoU.
pub fn max_ar_terms(iou: f64) -> Result<[f64; 3]> {
    if !(iou > 0.0 && iou < 1.0) {
        return Err(Error::Domain {
            op: "max_anchor_ar",
            detail: format!("IoU threshold must lie in (0, 1), got {iou}"),
        });
    }
    let contain = 2.0 / (1.0 + 1.0 / iou);
    Ok([contain * contain, iou / (2.0 - 2.0 * iou), iou])
}

/// Largest anchor aspect ratio a layer needs so that objects up to
/// `mar_obj` stay matchable at `iou`. The raw formula value is returned even
/// when it drops below 1.
pub fn max_anchor_ar(mar_obj: f64, iou: f64) -> Result<f64> {
    if !(mar_obj >= 1.0) || !mar_obj.is_finite() {
        return Err(Error::Domain {
            op: "max_anchor_ar",
            detail: format!("object aspect ratio bound must be >= 1, got {mar_obj}"),
        });
    }
    let terms = max_ar_terms(iou)?;
    Ok(mar_obj * terms.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// One row of the reference detection-layer table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionLayer {
    pub name: &'static str,
    pub stride: usize,
    pub receptive_field: usize,
    pub anchor_size: f64,
    pub aspect_ratios: &'static [f64],
}

const FIVE_ARS: &[f64] = &[1.0, 1.5, 3.0, 2.0 / 3.0, 1.0 / 3.0];
const THREE_ARS: &[f64] = &[1.0, 1.5, 2.0 / 3.0];

/// Detection layers of the VGG-16 based SSD300 variant.
pub const DETECTION_LAYERS: [DetectionLayer; 4] = [
    DetectionLayer {
        name: "conv4_3",
        stride: 8,
        receptive_field: 108,
        anchor_size: 32.0,
        aspect_ratios: FIVE_ARS,
    },
    DetectionLayer {
        name: "conv5_3",
        stride: 16,
        receptive_field: 228,
        anchor_size: 64.0,
        aspect_ratios: FIVE_ARS,
    },
    DetectionLayer {
        name: "conv_fc7",
        stride: 32,
        receptive_field: 340,
        anchor_size: 128.0,
        aspect_ratios: FIVE_ARS,
    },
    DetectionLayer {
        name: "conv6_2",
        stride: 64,
        receptive_field: 468,
        anchor_size: 256.0,
        aspect_ratios: THREE_ARS,
    },
];

pub const DEFAULT_IMAGE_SIZE: f64 = 300.0;

/// First- and second-set anchor scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleDesign {
    pub sizes: Vec<f64>,
    pub second_sizes: Vec<f64>,
}

fn check_increasing(field: &str, sizes: &[f64]) -> Result<()> {
    if sizes.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::validation(
            field,
            "sizes must be positive and finite",
        ));
    }
    if sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::validation(
            field,
            format!("sizes must be strictly increasing, got {sizes:?}"),
        ));
    }
    Ok(())
}

/// Second-set scales `√(S_k · S_{k+1})`, with the last one equal to the image size.
pub fn design_scales(base_sizes: &[f64], image_size: f64) -> Result<ScaleDesign> {
    if base_sizes.len() < 2 {
        return Err(Error::validation("sizes", "needs at least two scales"));
    }
    check_increasing("sizes", base_sizes)?;
    if !(image_size > 0.0) {
        return Err(Error::validation("image_size", "must be positive"));
    }
    let mut second: Vec<f64> = base_sizes
        .windows(2)
        .map(|w| (w[0] * w[1]).sqrt())
        .collect();
    second.push(image_size);
    Ok(ScaleDesign {
        sizes: base_sizes.to_vec(),
        second_sizes: second,
    })
}

/// Anchor scales and aspect ratios for one or more detection layers.
///
/// Layer `k` carries first-set size `sizes[k]` with every aspect ratio, and
/// second-set size `second_sizes[k]` (if present) with ratio 1 only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub sizes: Vec<f64>,
    #[serde(default)]
    pub second_sizes: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
    /// Per-layer override of `aspect_ratios`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_aspect_ratios: Option<Vec<Vec<f64>>>,
    pub image_size: f64,
}

fn check_ar_set(field: &str, ars: &[f64]) -> Result<()> {
    if ars.is_empty() {
        return Err(Error::validation(field, "needs at least one aspect ratio"));
    }
    for &a in ars {
        if !(a > 0.0) || !a.is_finite() {
            return Err(Error::validation(
                field,
                format!("aspect ratio {a} must be positive"),
            ));
        }
        let closed = (a - 1.0).abs() < 1e-9 || ars.iter().any(|&b| (a * b - 1.0).abs() < 1e-9);
        if !closed {
            return Err(Error::validation(
                field,
                format!("aspect ratio {a} has no reciprocal {} in the set", 1.0 / a),
            ));
        }
    }
    Ok(())
}

impl AnchorSpec {
    /// The reference four-layer design at 300 px.
    pub fn reference() -> Self {
        let sizes: Vec<f64> = DETECTION_LAYERS.iter().map(|l| l.anchor_size).collect();
        let design = design_scales(&sizes, DEFAULT_IMAGE_SIZE).expect("reference sizes increase");
        AnchorSpec {
            sizes: design.sizes,
            second_sizes: design.second_sizes,
            aspect_ratios: FIVE_ARS.to_vec(),
            layer_aspect_ratios: Some(
                DETECTION_LAYERS
                    .iter()
                    .map(|l| l.aspect_ratios.to_vec())
                    .collect(),
            ),
            image_size: DEFAULT_IMAGE_SIZE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() {
            return Err(Error::validation("sizes", "needs at least one scale"));
        }
        check_increasing("sizes", &self.sizes)?;
        if self.second_sizes.len() > self.sizes.len() {
            return Err(Error::validation(
                "second_sizes",
                "at most one second-set size per layer",
            ));
        }
        if self.second_sizes.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::validation("second_sizes", "sizes must be positive"));
        }
        check_ar_set("aspect_ratios", &self.aspect_ratios)?;
        if let Some(per_layer) = &self.layer_aspect_ratios {
            if per_layer.len() != self.sizes.len() {
                return Err(Error::validation(
                    "layer_aspect_ratios",
                    format!("{} lists for {} layers", per_layer.len(), self.sizes.len()),
                ));
            }
            for (k, ars) in per_layer.iter().enumerate() {
                check_ar_set(&format!("layer_aspect_ratios[{k}]"), ars)?;
            }
        }
        if !(self.image_size > 0.0) {
            return Err(Error::validation("image_size", "must be positive"));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.sizes.len()
    }

    pub fn aspect_ratios_for(&self, k: usize) -> &[f64] {
        match &self.layer_aspect_ratios {
            Some(per_layer) => &per_layer[k],
            None => &self.aspect_ratios,
        }
    }

    /// Single-layer spec for layer `k`.
    pub fn layer(&self, k: usize) -> AnchorSpec {
        AnchorSpec {
            sizes: vec![self.sizes[k]],
            second_sizes: self.second_sizes.get(k).copied().into_iter().collect(),
            aspect_ratios: self.aspect_ratios_for(k).to_vec(),
            layer_aspect_ratios: None,
            image_size: self.image_size,
        }
    }

    /// Every distinct anchor shape `(scale, ar)` over all layers.
    pub fn shapes(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for (k, &s) in self.sizes.iter().enumerate() {
            out.extend(self.aspect_ratios_for(k).iter().map(|&a| (s, a)));
            if let Some(&s2) = self.second_sizes.get(k) {
                out.push((s2, 1.0));
            }
        }
        out
    }

    /// Anchors generated per grid cell.
    pub fn anchors_per_cell(&self) -> usize {
        (0..self.layers())
            .map(|k| self.aspect_ratios_for(k).len() + usize::from(k < self.second_sizes.len()))
            .sum()
    }
}

/// Tiles the spec's anchor shapes over a `grid_h x grid_w` map with the given
/// stride. Cell `(i, j)` is centered at `((j + ½)·stride, (i + ½)·stride)`.
pub fn generate_anchors(
    spec: &AnchorSpec,
    grid_h: usize,
    grid_w: usize,
    stride: f64,
) -> Result<Vec<Box>> {
    spec.validate()?;
    if grid_h == 0 || grid_w == 0 || !(stride > 0.0) {
        return Err(Error::validation(
            "grid",
            format!("needs positive grid and stride, got {grid_h}x{grid_w} at {stride}"),
        ));
    }
    let shapes = spec.shapes();
    let mut out = Vec::with_capacity(grid_h * grid_w * shapes.len());
    for i in 0..grid_h {
        for j in 0..grid_w {
            let (cx, cy) = ((j as f64 + 0.5) * stride, (i as f64 + 0.5) * stride);
            out.extend(
                shapes
                    .iter()
                    .map(|&(s, a)| Box::from_scale_ar(cx, cy, s, a)),
            );
        }
    }
    Ok(out)
}

/// IoU of an object and an anchor sharing a center, with the anchor's
/// scale set to `scale_ratio` times the object's.
pub fn centered_iou_at_scale(object_ar: f64, anchor_ar: f64, scale_ratio: f64) -> f64 {
    iou(
        &Box::from_scale_ar(0.0, 0.0, 1.0, object_ar),
        &Box::from_scale_ar(0.0, 0.0, scale_ratio, anchor_ar),
    )
}

/// Best IoU of an object against anchors of the given ratios when both share
/// a center.
///
/// With `free_scale` the anchor scale is optimal, which is equal area, and
/// the closed form `1 / (2√ρ − 1)` with `ρ = max(o/a, a/o)` is used.
/// Without it the anchor keeps the object's area and IoU comes from the box
/// geometry. Ties go to the earlier anchor ratio.
pub fn best_centered_iou(object_ar: f64, anchor_ars: &[f64], free_scale: bool) -> (f64, f64) {
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    for &a in anchor_ars {
        let value = if free_scale {
            let rho = (object_ar / a).max(a / object_ar);
            1.0 / (2.0 * rho.sqrt() - 1.0)
        } else {
            centered_iou_at_scale(object_ar, a, 1.0)
        };
        if value > best.0 {
            best = (value, a);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoverageMode {
    /// Aspect ratio only, anchor scale free.
    ArOnly,
    /// Scale and aspect ratio against the discrete anchor shapes.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorstCase {
    pub object_ar: f64,
    pub object_scale: f64,
    pub best_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub mode: CoverageMode,
    pub samples: usize,
    pub covered: usize,
    pub fraction: f64,
    pub iou_threshold: f64,
    pub worst_case: WorstCase,
}

impl fmt::Display for CoverageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "# model: translation-free (object centered on its anchor); mode: {}",
            match self.mode {
                CoverageMode::ArOnly => "aspect ratio only, free scale",
                CoverageMode::Joint => "joint scale and aspect ratio",
            }
        )?;
        writeln!(f, "samples     {}", self.samples)?;
        writeln!(f, "covered     {}", self.covered)?;
        writeln!(f, "fraction    {:.6}", self.fraction)?;
        writeln!(f, "iou >=      {}", self.iou_threshold)?;
        write!(
            f,
            "worst case  object AR {:.4}, scale {:.2}, best IoU {:.4}",
            self.worst_case.object_ar, self.worst_case.object_scale, self.worst_case.best_iou
        )
    }
}

/// Best IoU of one object against every shape of the spec.
fn object_best_iou(spec: &AnchorSpec, mode: CoverageMode, object_ar: f64, scale: f64) -> f64 {
    match mode {
        CoverageMode::ArOnly => {
            let mut ars: Vec<f64> = (0..spec.layers())
                .flat_map(|k| spec.aspect_ratios_for(k).iter().copied())
                .collect();
            if !spec.second_sizes.is_empty() {
                ars.push(1.0);
            }
            best_centered_iou(object_ar, &ars, true).0
        }
        CoverageMode::Joint => {
            let object = Box::from_scale_ar(0.0, 0.0, scale, object_ar);
            spec.shapes()
                .iter()
                .map(|&(s, a)| iou(&object, &Box::from_scale_ar(0.0, 0.0, s, a)))
                .fold(0.0, f64::max)
        }
    }
}

/// Coverage of an explicit object list `(aspect ratio, scale)`.
pub fn evaluate_objects(
    spec: &AnchorSpec,
    mode: CoverageMode,
    objects: &[(f64, f64)],
    iou_threshold: f64,
) -> Result<CoverageReport> {
    spec.validate()?;
    if objects.is_empty() {
        return Err(Error::validation("samples", "needs at least one object"));
    }
    let results: Vec<f64> = objects
        .iter()
        .map(|&(a, s)| object_best_iou(spec, mode, a, s))
        .collect();
    Ok(summarize(mode, objects, &results, iou_threshold))
}

fn summarize(
    mode: CoverageMode,
    objects: &[(f64, f64)],
    best: &[f64],
    iou_threshold: f64,
) -> CoverageReport {
    let covered = best.iter().filter(|&&b| b >= iou_threshold).count();
    let (worst_idx, _) =
        best.iter().enumerate().fold(
            (0, f64::INFINITY),
            |acc, (i, &b)| if b < acc.1 { (i, b) } else { acc },
        );
    CoverageReport {
        mode,
        samples: objects.len(),
        covered,
        fraction: covered as f64 / objects.len() as f64,
        iou_threshold,
        worst_case: WorstCase {
            object_ar: objects[worst_idx].0,
            object_scale: objects[worst_idx].1,
            best_iou: best[worst_idx],
        },
    }
}

/// Samples drawn from one generator stream.
const CHUNK: usize = 4096;

/// Sampled `(ar, scale)` objects and their best IoUs.
type SampledChunk = (Vec<(f64, f64)>, Vec<f64>);

/// Inclusive sampling range; sampled log-uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    fn validate(&self, field: &str) -> Result<()> {
        if !(self.lo > 0.0 && self.hi >= self.lo && self.hi.is_finite()) {
            return Err(Error::validation(
                field,
                format!("needs 0 < lo <= hi, got [{}, {}]", self.lo, self.hi),
            ));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut SplitMix64) -> f64 {
        (rng.uniform(self.lo.ln(), self.hi.ln())).exp()
    }
}

/// Monte-Carlo coverage with log-uniform aspect ratio and scale.
///
/// Samples are drawn in fixed chunks from per-chunk streams of `seed`, so the
/// report depends only on the seed, never on `threads`.
#[allow(clippy::too_many_arguments)]
pub fn coverage_report(
    spec: &AnchorSpec,
    mode: CoverageMode,
    ar_range: Range,
    scale_range: Range,
    iou_threshold: f64,
    samples: usize,
    seed: u64,
    threads: usize,
) -> Result<CoverageReport> {
    spec.validate()?;
    ar_range.validate("ar_range")?;
    scale_range.validate("scale_range")?;
    if samples == 0 {
        return Err(Error::validation("samples", "must be at least 1"));
    }
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::validation("iou", "threshold must lie in (0, 1]"));
    }
    let chunks: Vec<usize> = (0..samples.div_ceil(CHUNK)).collect();
    let run_chunk = |&c: &usize| -> SampledChunk {
        let mut rng = SplitMix64::stream(seed, c as u64);
        let n = CHUNK.min(samples - c * CHUNK);
        let objects: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                let a = ar_range.sample(&mut rng);
                (a, scale_range.sample(&mut rng))
            })
            .collect();
        let best = objects
            .iter()
            .map(|&(a, s)| object_best_iou(spec, mode, a, s))
            .collect();
        (objects, best)
    };
    let parts: Vec<SampledChunk> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Domain {
                op: "coverage_report",
                detail: format!("thread pool: {e}"),
            })?;
        pool.install(|| chunks.par_iter().map(run_chunk).collect())
    } else {
        chunks.iter().map(run_chunk).collect()
    };
    let (objects, best): (Vec<_>, Vec<_>) = parts
        .into_iter()
        .flat_map(|(o, b)| o.into_iter().zip(b))
        .unzip();
    Ok(summarize(mode, &objects, &best, iou_threshold))
}
