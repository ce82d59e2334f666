//! Quick end-to-end checks over every module, run by `featborrow selfcheck`.

use std::fmt;

use featborrow::anchors::{
    best_centered_iou, coverage_report, design_scales, max_anchor_ar, AnchorSpec, CoverageMode,
    Range,
};
use featborrow::autograd::gradcheck;
use featborrow::ffb::forward_with_matchings;
use featborrow::ingest::{ar_stats, parse_annotations};
use featborrow::rf::{audit, ChainSpec};
use featborrow::{
    forward_pyramid, BorrowNetParams, FeaturePyramid, InitMode, InitOptions, Matrix, Result,
};

use crate::tensorfile::TensorFile;

const ANNOTATIONS: &str = include_str!("../fixtures/annotations.json");

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "ok  " } else { "FAIL" };
        write!(f, "{status} {:<28} {}", self.name, self.detail)
    }
}

type Check = fn(usize) -> Result<(bool, String)>;

const CHECKS: [(&str, Check); 10] = [
    ("max anchor ar", max_ar),
    ("matching row-stochastic", stochastic),
    ("zero combine is identity", residual_identity),
    ("top layer passes through", top_layer),
    ("gradient check", grads),
    ("aspect-ratio coverage", ar_coverage),
    ("second anchor set", second_set),
    ("detection strides", strides),
    ("tensor file round trip", tensor_round_trip),
    ("annotation percentiles", percentiles),
];

pub fn run_all(threads: usize) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|&(name, check)| match check(threads) {
            Ok((passed, detail)) => CheckResult {
                name,
                passed,
                detail,
            },
            Err(e) => CheckResult {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        })
        .collect()
}

const SHAPES: [(usize, usize, usize); 3] = [(8, 8, 4), (4, 4, 6), (2, 2, 8)];

fn max_ar(_: usize) -> Result<(bool, String)> {
    let v = max_anchor_ar(6.0, 0.5)?;
    Ok(((v - 3.0).abs() <= 1e-12, format!("mAR(6, 0.5) = {v}")))
}

fn stochastic(_: usize) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    let mut in_range = true;
    for seed in 0..20 {
        let p = FeaturePyramid::seeded(&SHAPES, seed)?;
        let params = BorrowNetParams::init(
            &SHAPES,
            InitOptions::new(InitMode::SeededUniform, seed + 100),
        );
        let (_, matchings) = forward_with_matchings(&p, &params)?;
        for s in &matchings {
            for i in 0..s.m() {
                let row = s.values().row(i);
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                in_range &= row.iter().all(|v| (0.0..=1.0).contains(v));
            }
        }
    }
    Ok((
        worst <= 1e-9 && in_range,
        format!("max |row sum - 1| = {worst:.1e}"),
    ))
}

fn residual_identity(_: usize) -> Result<(bool, String)> {
    let p = FeaturePyramid::seeded(&SHAPES, 5)?;
    let params = BorrowNetParams::init(&SHAPES, InitOptions::new(InitMode::Zeros, 0));
    let y = forward_pyramid(&p, &params)?;
    let same = y.layers.iter().zip(p.layers()).all(|(a, b)| a == b);
    Ok((same, "Y == X bit for bit".into()))
}

fn top_layer(_: usize) -> Result<(bool, String)> {
    let p = FeaturePyramid::seeded(&SHAPES, 6)?;
    let params = BorrowNetParams::init(&SHAPES, InitOptions::new(InitMode::SeededUniform, 7));
    let y = forward_pyramid(&p, &params)?;
    let top = SHAPES.len() - 1;
    Ok((y.layers[top] == *p.layer(top), "Y(top) == X(top)".into()))
}

fn grads(threads: usize) -> Result<(bool, String)> {
    let shapes = [(4, 4, 3), (2, 2, 4)];
    let p = FeaturePyramid::seeded(&shapes, 11)?;
    let params = BorrowNetParams::init(&shapes, InitOptions::new(InitMode::SeededUniform, 12));
    let target = FeaturePyramid::seeded(&shapes, 13)?.into();
    let report = gradcheck(&p, &params, &target, 1e-5, 1e-4, threads)?;
    Ok((
        report.passed,
        format!("worst relative error {:.2e}", report.worst_rel()),
    ))
}

fn ar_coverage(threads: usize) -> Result<(bool, String)> {
    let r = coverage_report(
        &AnchorSpec::reference(),
        CoverageMode::ArOnly,
        Range::new(1.0 / 6.0, 6.0),
        Range::new(32.0, 300.0),
        0.5,
        20_000,
        0,
        threads,
    )?;
    let (edge, _) = best_centered_iou(6.0, &AnchorSpec::reference().aspect_ratios, true);
    Ok((
        r.fraction == 1.0 && edge >= 0.5,
        format!("fraction {:.4}, IoU at AR 6 = {edge:.4}", r.fraction),
    ))
}

fn second_set(_: usize) -> Result<(bool, String)> {
    let d = design_scales(&[32.0, 64.0, 128.0, 256.0], 300.0)?;
    let want = [45.2548, 90.5097, 181.0193, 300.0];
    let ok = d
        .second_sizes
        .iter()
        .zip(want)
        .all(|(a, b)| (a - b).abs() <= 1e-3);
    Ok((ok, format!("{:.4?}", d.second_sizes)))
}

fn strides(_: usize) -> Result<(bool, String)> {
    let a = audit(&ChainSpec::vgg16_ssd300())?;
    let s: Vec<usize> = a.rows.iter().map(|r| r.stride).collect();
    Ok((s == [8, 16, 32, 64], format!("{s:?}")))
}

fn tensor_round_trip(_: usize) -> Result<(bool, String)> {
    let m = Matrix::from_vec(2, 3, vec![0.1, -0.0, 1e-310, 3.5, -7.25, f64::MAX])?;
    let t = TensorFile::from(&m);
    let back = TensorFile::decode(&t.encode())?;
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    Ok((
        bits(&back.data) == bits(&t.data) && back.dims == t.dims,
        "rank 2, 6 values".into(),
    ))
}

fn percentiles(_: usize) -> Result<(bool, String)> {
    let set = parse_annotations(ANNOTATIONS)?;
    let stats = ar_stats(&set, &[50.0, 90.0, 99.0, 100.0])?;
    let got: Vec<f64> = stats.percentiles.iter().map(|&(_, v)| v).collect();
    Ok((
        got == [2.0, 4.0, 5.0, 8.0],
        format!("p50/p90/p99/p100 = {got:?}"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for r in run_all(1) {
            assert!(r.passed, "{r}");
        }
    }
}
