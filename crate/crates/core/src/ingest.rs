//! COCO-style annotation loading and object aspect-ratio statistics.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Object {
    pub image_id: i64,
    pub category_id: i64,
    pub w: f64,
    pub h: f64,
}

impl Object {
    /// Orientation-free aspect ratio `max(w/h, h/w)`.
    pub fn aspect_ratio(&self) -> f64 {
        (self.w / self.h).max(self.h / self.w)
    }

    pub fn scale(&self) -> f64 {
        (self.w * self.h).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct AnnotationSet {
    pub objects: Vec<Object>,
    /// Annotations dropped for a missing/malformed bbox or non-positive size.
    pub skipped: usize,
}

impl AnnotationSet {
    pub fn filter_category(&self, category_id: i64) -> AnnotationSet {
        AnnotationSet {
            objects: self
                .objects
                .iter()
                .copied()
                .filter(|o| o.category_id == category_id)
                .collect(),
            skipped: self.skipped,
        }
    }
}

fn parse_object(entry: &Value) -> Option<Object> {
    let bbox = entry.get("bbox")?.as_array()?;
    if bbox.len() != 4 {
        return None;
    }
    let w = bbox[2].as_f64()?;
    let h = bbox[3].as_f64()?;
    if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
        return None;
    }
    Some(Object {
        image_id: entry.get("image_id").and_then(Value::as_i64).unwrap_or(-1),
        category_id: entry
            .get("category_id")
            .and_then(Value::as_i64)
            .unwrap_or(-1),
        w,
        h,
    })
}

pub fn parse_annotations(text: &str) -> Result<AnnotationSet> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::Format {
        detail: format!("annotation file is not valid JSON: {e}"),
    })?;
    let entries = doc
        .get("annotations")
        .ok_or_else(|| Error::Format {
            detail: "missing key \"annotations\"".to_string(),
        })?
        .as_array()
        .ok_or_else(|| Error::Format {
            detail: "key \"annotations\" must be an array".to_string(),
        })?;
    let mut set = AnnotationSet::default();
    for entry in entries {
        match parse_object(entry) {
            Some(o) => set.objects.push(o),
            None => set.skipped += 1,
        }
    }
    Ok(set)
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<AnnotationSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_annotations(&text)
}

/// Nearest-rank percentile of ascending `sorted`: the value at rank
/// `⌈p/100 · n⌉` (at least 1).
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArStats {
    pub count: usize,
    pub percentiles: Vec<(f64, f64)>,
    pub scale_histogram: Vec<ScaleBin>,
}

pub const DEFAULT_PERCENTILES: [f64; 5] = [50.0, 90.0, 95.0, 99.0, 100.0];

pub fn ar_stats(set: &AnnotationSet, percentiles: &[f64]) -> Result<ArStats> {
    if set.objects.is_empty() {
        return Err(Error::Domain {
            op: "ar_stats",
            detail: "no objects to summarize".to_string(),
        });
    }
    if let Some(p) = percentiles.iter().find(|p| !(**p > 0.0 && **p <= 100.0)) {
        return Err(Error::validation(
            "percentiles",
            format!("{p} is outside (0, 100]"),
        ));
    }
    let mut ars: Vec<f64> = set.objects.iter().map(Object::aspect_ratio).collect();
    ars.sort_by(f64::total_cmp);
    let mut ps = percentiles.to_vec();
    ps.sort_by(f64::total_cmp);
    let percentiles = ps.iter().map(|&p| (p, nearest_rank(&ars, p))).collect();

    let scales: Vec<f64> = set.objects.iter().map(Object::scale).collect();
    let smallest = scales.iter().copied().fold(f64::INFINITY, f64::min);
    let ratio = std::f64::consts::SQRT_2;
    let bin_of = |s: f64| ((s / smallest).ln() / ratio.ln() + 1e-12).floor() as usize;
    let bins = scales.iter().map(|&s| bin_of(s)).max().unwrap_or(0) + 1;
    let mut scale_histogram: Vec<ScaleBin> = (0..bins)
        .map(|k| ScaleBin {
            lo: smallest * ratio.powi(k as i32),
            hi: smallest * ratio.powi(k as i32 + 1),
            count: 0,
        })
        .collect();
    for &s in &scales {
        scale_histogram[bin_of(s)].count += 1;
    }
    Ok(ArStats {
        count: ars.len(),
        percentiles,
        scale_histogram,
    })
}

impl fmt::Display for ArStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "objects  {}", self.count)?;
        writeln!(f, "aspect ratio max(w/h, h/w), nearest-rank percentiles:")?;
        for (p, v) in &self.percentiles {
            writeln!(f, "  p{p:<6} {v:.4}")?;
        }
        write!(f, "scale sqrt(w*h), bins of ratio sqrt(2):")?;
        for b in &self.scale_histogram {
            write!(f, "\n  [{:>9.2}, {:>9.2})  {}", b.lo, b.hi, b.count)?;
        }
        Ok(())
    }
}
