//! Straight-line reference forward pass, written against the raw formulas
//! with nested loops and no library kernels.

use featborrow::{BorrowNetParams, ConvWeights1x1, FeaturePyramid};

/// 1x1 conv of one descriptor.
fn project(x: &[f64], w: &ConvWeights1x1) -> Vec<f64> {
    let (c_in, c_out) = (w.w.rows(), w.w.cols());
    assert_eq!(x.len(), c_in);
    (0..c_out)
        .map(|o| {
            let mut acc = w.bias.as_ref().map_or(0.0, |b| b[o]);
            for (i, xi) in x.iter().enumerate() {
                acc += xi * w.w.get(i, o);
            }
            acc
        })
        .collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm < 1e-12 {
        vec![0.0; v.len()]
    } else {
        v.into_iter().map(|a| a / norm).collect()
    }
}

/// Enhanced pyramid as flat `h*w*c` buffers, plus each layer's matching
/// matrix as nested rows.
pub fn forward(
    p: &FeaturePyramid,
    params: &BorrowNetParams,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let depth = p.depth();
    let mut ys: Vec<Vec<f64>> = p.layers().iter().map(|l| l.data().to_vec()).collect();
    let mut matchings = vec![Vec::new(); depth.saturating_sub(1)];
    for n in (0..depth.saturating_sub(1)).rev() {
        let lp = &params.layers[n];
        let x = p.layer(n);
        let (h, w, c) = x.shape();

        // Deeper descriptors in depth order, then row-major within a layer.
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for (k, deeper) in p.layers()[n + 1..].iter().enumerate() {
            for i in 0..deeper.h() {
                for j in 0..deeper.w() {
                    let d = deeper.fiber(i, j);
                    keys.push(unit(project(d, &lp.fmb.keys[k])));
                    values.push(project(d, &lp.frb.values[k]));
                }
            }
        }

        let c_common = lp.frb.c_common;
        let mut z = vec![0.0; h * w * c_common];
        let mut s_rows = Vec::with_capacity(h * w);
        for cell in 0..h * w {
            let q = unit(project(&x.data()[cell * c..(cell + 1) * c], &lp.fmb.query));
            let scores: Vec<f64> = keys
                .iter()
                .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum())
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let total: f64 = exps.iter().sum();
            let row: Vec<f64> = exps.iter().map(|e| e / total).collect();
            for (weight, v) in row.iter().zip(&values) {
                for ch in 0..c_common {
                    z[cell * c_common + ch] += weight * v[ch];
                }
            }
            s_rows.push(row);
        }
        matchings[n] = s_rows;

        // Full 2h' x 2w' deconvolution of the enhanced deeper layer, then crop.
        let deeper = p.layer(n + 1);
        let (dh, dw, dc) = deeper.shape();
        let kernel = &lp.ffb.deconv;
        let c_ctx = kernel.c_out();
        let (fh, fw) = (2 * dh, 2 * dw);
        let mut full = vec![0.0; fh * fw * c_ctx];
        for i in 0..dh {
            for j in 0..dw {
                for ki in 0..2 {
                    for kj in 0..2 {
                        for ci in 0..dc {
                            let xv = ys[n + 1][(i * dw + j) * dc + ci];
                            for co in 0..c_ctx {
                                full[((2 * i + ki) * fw + 2 * j + kj) * c_ctx + co] +=
                                    xv * kernel.at(ki, kj, ci, co);
                            }
                        }
                    }
                }
            }
        }
        let (oi, oj) = ((fh - h) / 2, (fw - w) / 2);

        let mut y = vec![0.0; h * w * c];
        for i in 0..h {
            for j in 0..w {
                let cell = i * w + j;
                let mut cat = x.fiber(i, j).to_vec();
                cat.extend_from_slice(&z[cell * c_common..(cell + 1) * c_common]);
                let src = ((i + oi) * fw + j + oj) * c_ctx;
                cat.extend_from_slice(&full[src..src + c_ctx]);
                let fused = project(&cat, &lp.ffb.combine);
                for ch in 0..c {
                    y[cell * c + ch] = x.data()[cell * c + ch] + fused[ch];
                }
            }
        }
        ys[n] = y;
    }
    (ys, matchings)
}
